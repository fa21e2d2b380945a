//! Closed-form Helmholtz solutions used as exact targets and as boundary data.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::field::{DerivativeOracle, Field};
use crate::mesh_geometry::BoundarySegment;
use crate::special::{bessel_j, bessel_j_prime, hankel1_0, hankel1_1};
use crate::{Point, Result, TrefftzError};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `exp(i kappa d . x)` with complex `d`, `d . d = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneWave {
    pub direction: [Complex64; 2],
    pub kappa: f64,
}

impl PlaneWave {
    pub fn new(direction: [Complex64; 2], kappa: f64) -> Result<Self> {
        let dd = direction[0] * direction[0] + direction[1] * direction[1];
        if (dd - 1.0).norm() > 1e-12 {
            return Err(TrefftzError::InvalidInput(format!(
                "plane-wave direction must satisfy d.d = 1, got {dd}"
            )));
        }
        if !(kappa > 0.0) {
            return Err(TrefftzError::InvalidInput("kappa must be positive".into()));
        }
        Ok(PlaneWave { direction, kappa })
    }

    /// Real unit direction at angle `theta`.
    pub fn at_angle(theta: f64, kappa: f64) -> Self {
        PlaneWave {
            direction: [Complex64::new(theta.cos(), 0.0), Complex64::new(theta.sin(), 0.0)],
            kappa,
        }
    }
}

impl Field for PlaneWave {
    fn value(&self, p: Point) -> Complex64 {
        (I * self.kappa * (self.direction[0] * p[0] + self.direction[1] * p[1])).exp()
    }

    fn gradient(&self, p: Point) -> [Complex64; 2] {
        let v = self.value(p);
        [I * self.kappa * self.direction[0] * v, I * self.kappa * self.direction[1] * v]
    }

    fn rates(&self) -> (f64, f64) {
        let d = self.direction;
        let osc = self.kappa * d[0].re.hypot(d[1].re);
        let decay = self.kappa * d[0].im.hypot(d[1].im);
        (osc, decay)
    }
}

impl DerivativeOracle for PlaneWave {
    fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64 {
        (I * self.kappa * self.direction[0]).powu(a as u32)
            * (I * self.kappa * self.direction[1]).powu(b as u32)
            * self.value(p)
    }
}

/// Finite sum `sum c_k exp(i kappa d_k . x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpwSum {
    pub kappa: f64,
    pub terms: Vec<(Complex64, [Complex64; 2])>,
}

impl Field for EpwSum {
    fn value(&self, p: Point) -> Complex64 {
        self.derivative(p, 0, 0)
    }

    fn gradient(&self, p: Point) -> [Complex64; 2] {
        [self.derivative(p, 1, 0), self.derivative(p, 0, 1)]
    }

    fn rates(&self) -> (f64, f64) {
        self.terms
            .iter()
            .map(|(_, d)| {
                PlaneWave {
                    direction: *d,
                    kappa: self.kappa,
                }
                .rates()
            })
            .fold((0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
    }
}

impl DerivativeOracle for EpwSum {
    fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64 {
        self.terms
            .iter()
            .map(|(c, d)| {
                c * PlaneWave {
                    direction: *d,
                    kappa: self.kappa,
                }
                .derivative(p, a, b)
            })
            .sum()
    }
}

/// `J_nu(kappa r) exp(i nu theta)` around a corner at `center`, theta in [-pi, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSingularity {
    pub nu: f64,
    pub kappa: f64,
    pub center: Point,
}

impl CornerSingularity {
    pub fn new(nu: f64, kappa: f64) -> Result<Self> {
        if !(nu > 0.0) || nu == nu.round() {
            return Err(TrefftzError::InvalidInput(
                "corner singularity order must be positive and non-integer".into(),
            ));
        }
        Ok(CornerSingularity {
            nu,
            kappa,
            center: [0.0, 0.0],
        })
    }

    fn polar(&self, p: Point) -> (f64, f64) {
        let x = p[0] - self.center[0];
        let y = p[1] - self.center[1];
        let mut theta = y.atan2(x);
        if theta >= PI {
            theta -= 2.0 * PI;
        }
        (x.hypot(y), theta)
    }

    pub fn try_gradient(&self, p: Point) -> Result<[Complex64; 2]> {
        let (r, _) = self.polar(p);
        if r == 0.0 && self.nu < 1.0 {
            return Err(TrefftzError::Singular(
                "gradient of a corner singularity with order below one at its corner".into(),
            ));
        }
        Ok(self.gradient(p))
    }
}

impl Field for CornerSingularity {
    fn value(&self, p: Point) -> Complex64 {
        let (r, th) = self.polar(p);
        bessel_j(self.nu, self.kappa * r) * (I * self.nu * th).exp()
    }

    fn gradient(&self, p: Point) -> [Complex64; 2] {
        let (r, th) = self.polar(p);
        if r == 0.0 {
            return if self.nu > 1.0 {
                [Complex64::default(); 2]
            } else {
                [Complex64::new(f64::NAN, f64::NAN); 2]
            };
        }
        let z = self.kappa * r;
        let phase = (I * self.nu * th).exp();
        let ur = self.kappa * bessel_j_prime(self.nu, z) * phase;
        let ut_over_r = I * self.nu * bessel_j(self.nu, z) * phase / r;
        let (s, c) = th.sin_cos();
        [ur * c - ut_over_r * s, ur * s + ut_over_r * c]
    }

    fn singular_points(&self) -> Vec<Point> {
        vec![self.center]
    }

    fn rates(&self) -> (f64, f64) {
        (self.kappa, 0.0)
    }
}

/// `(i/4) H0(kappa |x - x0|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalSolution {
    pub x0: Point,
    pub kappa: f64,
}

impl FundamentalSolution {
    pub fn try_value(&self, p: Point) -> Result<Complex64> {
        if p == self.x0 {
            return Err(TrefftzError::Singular("fundamental solution at its source".into()));
        }
        Ok(self.value(p))
    }
}

impl Field for FundamentalSolution {
    fn value(&self, p: Point) -> Complex64 {
        let r = (p[0] - self.x0[0]).hypot(p[1] - self.x0[1]);
        if r == 0.0 {
            return Complex64::new(f64::NAN, f64::NAN);
        }
        0.25 * I * hankel1_0(self.kappa * r)
    }

    fn gradient(&self, p: Point) -> [Complex64; 2] {
        let dx = p[0] - self.x0[0];
        let dy = p[1] - self.x0[1];
        let r = dx.hypot(dy);
        if r == 0.0 {
            return [Complex64::new(f64::NAN, f64::NAN); 2];
        }
        let radial = -0.25 * I * self.kappa * hankel1_1(self.kappa * r);
        [radial * (dx / r), radial * (dy / r)]
    }

    fn singular_points(&self) -> Vec<Point> {
        vec![self.x0]
    }

    fn rates(&self) -> (f64, f64) {
        (self.kappa, 0.0)
    }
}

/// Serializable description of an exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolutionSpec {
    /// Real direction given by its angle in radians.
    PlaneWave { angle: f64 },
    /// Complex direction `[re1, im1, re2, im2]`.
    ComplexPlaneWave { direction: [f64; 4] },
    CornerSingularity { nu: f64 },
    Fundamental { x0: Point },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceSolution {
    PlaneWave(PlaneWave),
    CornerSingularity(CornerSingularity),
    Fundamental(FundamentalSolution),
}

impl ReferenceSolution {
    pub fn from_spec(spec: &SolutionSpec, kappa: f64) -> Result<Self> {
        Ok(match spec {
            SolutionSpec::PlaneWave { angle } => ReferenceSolution::PlaneWave(PlaneWave::at_angle(*angle, kappa)),
            SolutionSpec::ComplexPlaneWave { direction: d } => ReferenceSolution::PlaneWave(PlaneWave::new(
                [Complex64::new(d[0], d[1]), Complex64::new(d[2], d[3])],
                kappa,
            )?),
            SolutionSpec::CornerSingularity { nu } => {
                ReferenceSolution::CornerSingularity(CornerSingularity::new(*nu, kappa)?)
            }
            SolutionSpec::Fundamental { x0 } => ReferenceSolution::Fundamental(FundamentalSolution { x0: *x0, kappa }),
        })
    }

    fn inner(&self) -> &dyn Field {
        match self {
            ReferenceSolution::PlaneWave(u) => u,
            ReferenceSolution::CornerSingularity(u) => u,
            ReferenceSolution::Fundamental(u) => u,
        }
    }

    /// Even x-derivatives are only available for plane waves.
    pub fn derivative(&self, p: Point, a: usize, b: usize) -> Option<Complex64> {
        match self {
            ReferenceSolution::PlaneWave(u) => Some(u.derivative(p, a, b)),
            _ => None,
        }
    }
}

impl Field for ReferenceSolution {
    fn value(&self, p: Point) -> Complex64 {
        self.inner().value(p)
    }
    fn gradient(&self, p: Point) -> [Complex64; 2] {
        self.inner().gradient(p)
    }
    fn singular_points(&self) -> Vec<Point> {
        self.inner().singular_points()
    }
    fn rates(&self) -> (f64, f64) {
        self.inner().rates()
    }
}

pub fn plane_wave(d: [Complex64; 2], kappa: f64) -> Result<ReferenceSolution> {
    Ok(ReferenceSolution::PlaneWave(PlaneWave::new(d, kappa)?))
}

pub fn corner_singularity(nu: f64, kappa: f64) -> Result<ReferenceSolution> {
    Ok(ReferenceSolution::CornerSingularity(CornerSingularity::new(nu, kappa)?))
}

pub fn fundamental_solution(x0: Point, kappa: f64) -> ReferenceSolution {
    ReferenceSolution::Fundamental(FundamentalSolution { x0, kappa })
}

/// Impedance data `g = n . grad u - i kappa u` along one boundary segment.
pub struct ImpedanceTrace<'a> {
    pub u: &'a dyn Field,
    pub segment: BoundarySegment,
    pub kappa: f64,
    /// Singular points sitting at the start / end of the segment.
    pub singular_ends: [bool; 2],
}

impl ImpedanceTrace<'_> {
    /// `g` at arclength `s` from the segment start.
    pub fn at(&self, s: f64) -> Complex64 {
        let len = self.segment.length();
        let p = self.segment.point(s / len);
        self.at_point(p)
    }

    pub fn at_point(&self, p: Point) -> Complex64 {
        let g = self.u.gradient(p);
        let n = self.segment.normal;
        g[0] * n[0] + g[1] * n[1] - I * self.kappa * self.u.value(p)
    }
}

/// Builds `g` on a segment; singular points may only sit at its ends.
pub fn impedance_trace<'a>(u: &'a dyn Field, segment: &BoundarySegment, kappa: f64) -> Result<ImpedanceTrace<'a>> {
    let len = segment.length();
    let tol = 1e-12 * len.max(1e-300);
    let mut ends = [false, false];
    for q in u.singular_points() {
        let ab = [segment.b[0] - segment.a[0], segment.b[1] - segment.a[1]];
        let aq = [q[0] - segment.a[0], q[1] - segment.a[1]];
        let t = ((aq[0] * ab[0] + aq[1] * ab[1]) / (len * len)).clamp(0.0, 1.0);
        let foot = segment.point(t);
        let dist = (foot[0] - q[0]).hypot(foot[1] - q[1]);
        if dist > tol {
            continue;
        }
        if t * len <= tol {
            ends[0] = true;
        } else if (1.0 - t) * len <= tol {
            ends[1] = true;
        } else {
            return Err(TrefftzError::Singular(format!(
                "singular point ({}, {}) lies inside a boundary segment",
                q[0], q[1]
            )));
        }
    }
    Ok(ImpedanceTrace {
        u,
        segment: *segment,
        kappa,
        singular_ends: ends,
    })
}
