//! Pointwise access to complex scalar fields on the plane.

use num_complex::Complex64;

use crate::Point;

pub trait Field: Sync {
    fn value(&self, p: Point) -> Complex64;
    fn gradient(&self, p: Point) -> [Complex64; 2];

    /// Points where the field (or its gradient) is singular; quadrature grades toward them.
    fn singular_points(&self) -> Vec<Point> {
        Vec::new()
    }

    /// Highest oscillation and decay rates, used to size quadrature rules.
    fn rates(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// A field that also supplies arbitrary partial derivatives `d1^a d2^b u`.
pub trait DerivativeOracle: Field {
    fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64;
}
