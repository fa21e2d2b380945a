//! Interpolation operators onto the edge and node spaces and the constants of
//! the approximation estimates.
//!
//! The edge interpolant takes `L2(s)` coefficients of traces, the node operator
//! matches the first `N` even `d1` derivatives at every node by a small
//! collocation solve, and the combined operator applies the first to what the
//! second leaves over.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::field::{DerivativeOracle, Field};
use crate::mesh_geometry::{node_family_distances, CartesianMesh};
use crate::quadrature::{points_for, Rule1D, Rule2D};
use crate::wave_basis::{BasisLabel, DiscreteSpace, ReferenceMode};
use crate::{Point, Result, TrefftzError};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `sum c_n phi_n` on the reference cell.
#[derive(Debug, Clone)]
pub struct ModeCombination {
    pub modes: Vec<ReferenceMode>,
    pub coefficients: Vec<Complex64>,
}

impl ModeCombination {
    /// The first `count` modes of the reference cell.
    pub fn new(h1_ref: f64, h2_ref: f64, kappa: f64, coefficients: Vec<Complex64>) -> Result<Self> {
        let modes = (1..=coefficients.len())
            .map(|n| ReferenceMode::new(n, h1_ref, h2_ref, kappa))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModeCombination { modes, coefficients })
    }

    fn sum(&self, p: Point, dx: usize, dy: usize) -> Complex64 {
        self.modes
            .iter()
            .zip(&self.coefficients)
            .map(|(m, c)| c * m.eval(p[0], p[1], dx, dy))
            .sum()
    }
}

impl Field for ModeCombination {
    fn value(&self, p: Point) -> Complex64 {
        self.sum(p, 0, 0)
    }
    fn gradient(&self, p: Point) -> [Complex64; 2] {
        [self.sum(p, 1, 0), self.sum(p, 0, 1)]
    }
    fn rates(&self) -> (f64, f64) {
        let k = self.modes.first().map_or(0.0, |m| m.kappa);
        let nu = self.modes.iter().map(|m| m.nu).fold(0.0, f64::max);
        let decay = self.modes.iter().map(|m| m.decay()).fold(0.0, f64::max);
        (k * nu.max(1.0), decay)
    }
}

impl DerivativeOracle for ModeCombination {
    fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64 {
        self.sum(p, a, b)
    }
}

/// Tensor rule on the reference cell sized for `u` and the first `ne` modes.
fn reference_rule(u: &dyn Field, h1: f64, h2: f64, kappa: f64, ne: usize) -> Rule2D {
    let (osc, decay) = u.rates();
    let nu_max = ne as f64 * PI / (kappa * h1);
    let mode_decay = kappa * (nu_max * nu_max - 1.0).max(0.0).sqrt();
    let osc = osc.max(kappa) + kappa * nu_max;
    let decay = decay + mode_decay;
    Rule2D::tensor(
        &Rule1D::graded(0.0, h1, osc, 0.0, [false; 2]),
        &Rule1D::graded(0.0, h2, osc, decay, [false; 2]),
    )
}

/// `(u, v)` in the kappa-weighted H1 product over a rule.
fn h1k_product(rule: &Rule2D, kappa: f64, u: &dyn Field, v: &dyn Field) -> Complex64 {
    let k2 = 1.0 / (kappa * kappa);
    rule.points
        .iter()
        .zip(&rule.weights)
        .map(|(p, &w)| {
            let (gu, gv) = (u.gradient(*p), v.gradient(*p));
            (u.value(*p) * v.value(*p).conj() + k2 * (gu[0] * gv[0].conj() + gu[1] * gv[1].conj())) * w
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct LocalProjection {
    pub projection: ModeCombination,
    /// Squared H1_kappa norms of the modes, exact.
    pub norms: Vec<f64>,
}

/// H1_kappa-orthogonal projection onto the first `ne` modes of `(0,h1)x(0,h2)`;
/// `u` is given in reference coordinates.
pub fn local_projection(u: &dyn Field, h1: f64, h2: f64, kappa: f64, ne: usize) -> Result<LocalProjection> {
    if ne == 0 {
        return Err(TrefftzError::InvalidInput("at least one mode is needed".into()));
    }
    let modes = (1..=ne)
        .map(|n| ReferenceMode::new(n, h1, h2, kappa))
        .collect::<Result<Vec<_>>>()?;
    let rule = reference_rule(u, h1, h2, kappa, ne);
    let mut coefficients = Vec::with_capacity(ne);
    let mut norms = Vec::with_capacity(ne);
    for m in &modes {
        let single = ModeCombination {
            modes: vec![*m],
            coefficients: vec![Complex64::new(1.0, 0.0)],
        };
        let nrm = m.norm_squared(1);
        coefficients.push(h1k_product(&rule, kappa, u, &single) / nrm);
        norms.push(nrm);
    }
    Ok(LocalProjection {
        projection: ModeCombination { modes, coefficients },
        norms,
    })
}

/// `(u, phi_n)_{L2(s)} / ||phi_n||^2_{L2(s)}` on the bottom edge of the reference cell.
pub fn reference_trace_coefficients(u: &dyn Field, h1: f64, kappa: f64, ne: usize) -> Vec<Complex64> {
    let (osc, _) = u.rates();
    let rule = Rule1D::gauss(0.0, h1, points_for(osc.max(kappa) + ne as f64 * PI / h1, h1));
    (1..=ne)
        .map(|n| {
            let w = n as f64 * PI / h1;
            let s: Complex64 = rule
                .x
                .iter()
                .zip(&rule.w)
                .map(|(&x, &wt)| u.value([x, 0.0]) * (w * x).sin() * wt)
                .sum();
            s / (0.5 * h1)
        })
        .collect()
}

/// Edge coefficients of `u`: `(u, phi_{s,n})_{L2(s)} / (len(s)/2)`, edge-major.
pub fn edge_interpolant(u: &dyn Field, mesh: &CartesianMesh, ne: usize) -> Vec<Complex64> {
    let (osc, _) = u.rates();
    let singular = u.singular_points();
    mesh.edges
        .par_iter()
        .flat_map_iter(|e| {
            let len = e.length;
            let at_end = |p: Point| singular.iter().any(|s| (s[0] - p[0]).hypot(s[1] - p[1]) <= 1e-12 * len);
            let ends = [at_end(e.point(0.0)), at_end(e.point(len))];
            let rule = Rule1D::graded(0.0, 1.0, (osc.max(1.0) * len) + ne as f64 * PI, 0.0, ends);
            let vals: Vec<(f64, Complex64)> = rule
                .x
                .iter()
                .zip(&rule.w)
                .map(|(&t, &w)| (t, u.value(e.point(t * len)) * w))
                .collect();
            (1..=ne)
                .map(|n| {
                    // the weights live on [0,1]; len cancels against len/2
                    let s: Complex64 = vals.iter().map(|(t, uw)| uw * (n as f64 * PI * t).sin()).sum();
                    2.0 * s
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Node collocation matrix `A_{nm} = (-1)^{n+m} nu_m^{2(n-1)}`, `nu_m = (2m-1) pi / (2 kappa h1)`.
pub fn collocation_matrix(n: usize, kappa_h1: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        let nu = (2 * c + 1) as f64 * PI / (2.0 * kappa_h1);
        let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
        sign * nu.powi(2 * r as i32)
    })
}

/// Inverse of the collocation matrix through Lagrange coefficients; row `m` of
/// the result holds the monomial coefficients of the `m`-th Lagrange polynomial
/// in the squared nodes, with the sign pattern restored.
#[cfg(test)]
fn explicit_inverse(n: usize, kappa_h1: f64) -> DMatrix<f64> {
    let x: Vec<f64> = (0..n)
        .map(|m| ((2 * m + 1) as f64 * PI / (2.0 * kappa_h1)).powi(2))
        .collect();
    let mut inv = DMatrix::zeros(n, n);
    for m in 0..n {
        let mut poly = vec![1.0];
        let mut denom = 1.0;
        for k in (0..n).filter(|&k| k != m) {
            let mut next = vec![0.0; poly.len() + 1];
            for (i, c) in poly.iter().enumerate() {
                next[i + 1] += c;
                next[i] -= c * x[k];
            }
            poly = next;
            denom *= x[m] - x[k];
        }
        for (r, c) in poly.iter().enumerate() {
            let sign = if (r + m) % 2 == 0 { 1.0 } else { -1.0 };
            inv[(m, r)] = sign * c / denom;
        }
    }
    inv
}

/// Closed-form `||A^{-1}||_inf = max_n prod_{m != n} (1/4 + (k h1/pi)^2 + m(m-1)) / (|n-m| (n+m-1))`.
pub fn vandermonde_inverse_norm(n: usize, kappa_h1: f64) -> f64 {
    let c = 0.25 + (kappa_h1 / PI).powi(2);
    (1..=n)
        .map(|i| {
            (1..=n)
                .filter(|&m| m != i)
                .map(|m| {
                    let (i, m) = (i as f64, m as f64);
                    (c + m * (m - 1.0)) / ((i - m).abs() * (i + m - 1.0))
                })
                .product::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Lower-triangular `L_{nm} = (-1)^n C(n, m)` relating even d1 and d2 derivatives
/// of Helmholtz solutions, indices from 0.
pub fn binomial_transfer(n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for r in 0..n {
        let mut binom = 1.0;
        for c in 0..=r {
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            l[(r, c)] = sign * binom;
            binom = binom * (r - c) as f64 / (c + 1) as f64;
        }
    }
    l
}

/// Node coefficients `beta[node][m]` such that the node expansion matches
/// `(kappa^-1 d1)^{2n} u` at every node for `n < order`.
pub fn collocation_solve(u: &dyn DerivativeOracle, mesh: &CartesianMesh, kappa: f64, order: usize) -> Result<Vec<Vec<Complex64>>> {
    if order == 0 {
        return Err(TrefftzError::InvalidInput("collocation order starts at 1".into()));
    }
    let kh = kappa * mesh.h1;
    // With x_m = nu_m^2 = c y_m and c = x_N the system becomes a Vandermonde
    // system in y_m = ((2m-1)/(2N-1))^2, which does not depend on kappa h1.
    let top = (2 * order - 1) as f64;
    let v = DMatrix::from_fn(order, order, |r, m| (((2 * m + 1) as f64 / top).powi(2)).powi(r as i32));
    let step = 2.0 * mesh.h1 / (top * PI);
    let v = v.map(|x| Complex64::new(x, 0.0));
    let vi = v
        .map(|x| x.re)
        .lu()
        .try_inverse()
        .ok_or_else(|| TrefftzError::Numeric("singular collocation matrix".into()))?
        .map(|x| Complex64::new(x, 0.0));
    mesh.nodes
        .par_iter()
        .map(|node| {
            let rhs = DVector::from_fn(order, |r, _| {
                let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                u.derivative(node.coords, 2 * r, 0) * (sign * step.powi(2 * r as i32))
            });
            let mut z = &vi * &rhs;
            // one refinement step
            z += &vi * (&rhs - &v * &z);
            if z.iter().any(|w| !w.is_finite()) {
                return Err(TrefftzError::Numeric(format!("non-finite collocation coefficients at kappa h1 = {kh}")));
            }
            Ok(z.iter().enumerate().map(|(m, w)| if m % 2 == 0 { *w } else { -*w }).collect())
        })
        .collect()
}

/// Largest node residual of the collocation equations
/// `sum_m A_{nm} beta_m = (kappa^-1 d1)^{2(n-1)} u`, relative to the largest right-hand side.
pub fn collocation_residual(u: &dyn DerivativeOracle, mesh: &CartesianMesh, kappa: f64, beta: &[Vec<Complex64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (node, b) in mesh.nodes.iter().zip(beta) {
        let order = b.len();
        let a = collocation_matrix(order, kappa * mesh.h1);
        let rhs: Vec<Complex64> = (0..order)
            .map(|n| u.derivative(node.coords, 2 * n, 0) / kappa.powi(2 * n as i32))
            .collect();
        let scale = rhs.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for n in 0..order {
            let lhs: Complex64 = (0..order).map(|m| b[m] * a[(n, m)]).sum();
            worst = worst.max((lhs - rhs[n]).norm() / scale);
        }
    }
    worst
}

/// Coefficient vector in the ordering of `space` holding only node coefficients.
fn node_vector(space: &DiscreteSpace, beta: &[Vec<Complex64>]) -> Vec<Complex64> {
    space
        .functions
        .iter()
        .map(|f| match f.label {
            BasisLabel::Node { node, m } => beta[node].get(m - 1).copied().unwrap_or(ZERO),
            BasisLabel::Edge { .. } => ZERO,
        })
        .collect()
}

/// Field `u - v` for two fields.
struct Difference<'a> {
    u: &'a dyn Field,
    v: &'a dyn Field,
}

impl Field for Difference<'_> {
    fn value(&self, p: Point) -> Complex64 {
        self.u.value(p) - self.v.value(p)
    }
    fn gradient(&self, p: Point) -> [Complex64; 2] {
        let (a, b) = (self.u.gradient(p), self.v.gradient(p));
        [a[0] - b[0], a[1] - b[1]]
    }
    fn singular_points(&self) -> Vec<Point> {
        let mut s = self.u.singular_points();
        s.extend(self.v.singular_points());
        s
    }
    fn rates(&self) -> (f64, f64) {
        let (a, b) = (self.u.rates(), self.v.rates());
        (a.0.max(b.0), a.1.max(b.1))
    }
}

/// Coefficients of `E(Id - V)u + Vu` in the ordering of `space`, using
/// `order` node modes (`order <= space.nn`).
pub fn combined_interpolant(u: &dyn DerivativeOracle, mesh: &CartesianMesh, space: &DiscreteSpace, order: usize) -> Result<Vec<Complex64>> {
    if order > space.nn {
        return Err(TrefftzError::InvalidInput(format!(
            "collocation order {order} exceeds the {} node modes of the space",
            space.nn
        )));
    }
    let mut xi = if order == 0 {
        vec![ZERO; space.dim()]
    } else {
        let beta = collocation_solve(u, mesh, space.kappa, order)?;
        node_vector(space, &beta)
    };
    let vu = space.combine(mesh, &xi);
    let rest = Difference { u, v: &vu };
    let alpha = edge_interpolant(&rest, mesh, space.ne);
    for (f, bf) in space.functions.iter().enumerate() {
        if let BasisLabel::Edge { edge, n } = bf.label {
            xi[f] = alpha[edge * space.ne + n - 1];
        }
    }
    Ok(xi)
}

/// `min(rho e^{kh} / (kh), e max(1, kh)^{2(N-1)})`.
pub fn chi(n: usize, kappa_h: f64, rho: f64) -> f64 {
    let a = rho * kappa_h.exp() / kappa_h;
    let b = E * kappa_h.max(1.0).powi(2 * (n as i32 - 1));
    a.min(b)
}

/// Constants of the combined approximation estimate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TheoryConstants {
    pub kappa_h: f64,
    pub rho: f64,
    pub nu_ne: f64,
    pub mu: usize,
    /// ceil(mu / 2)
    pub order: usize,
    pub chi: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub d_tilde: f64,
    pub d_tilde0: f64,
}

impl TheoryConstants {
    /// Factor multiplying `||u||_{H^{mu+1}_kappa}` in the bound on `||u - I u||_{H^r_kappa}`.
    pub fn bound_factor(&self, r: usize) -> f64 {
        let q = self.order as f64;
        let mu = self.mu as f64;
        let inner = q + self.c3 * q.powf(1.5) * (PI * self.rho * q / self.kappa_h).powf(mu + 0.5);
        self.c1 * (1.0 + self.c2 * self.chi * (mu + 2.0) * inner) * self.nu_ne.powf(r as f64 - (mu + 0.5))
    }
}

pub fn theory_constants(kappa: f64, mesh: &CartesianMesh, ne: usize, nn: usize, m_reg: usize) -> Result<TheoryConstants> {
    let h = mesh.h();
    let rho = mesh.rho();
    let kh = kappa * h;
    let nu_ne = ne as f64 * PI / kh;
    if nu_ne < 2f64.sqrt() {
        return Err(TrefftzError::PreAsymptotic { nu_ne });
    }
    let mu = (2 * nn).min(m_reg);
    let order = mu.div_ceil(2);
    let (d_tilde, d_tilde0) = node_family_distances(kappa, mesh.h1, mesh.h2);
    let th = (kh / rho).tanh();
    let c1 = 8.0 * rho.sqrt() * kh.max(1.0) / (kh * th).sqrt();
    let c2 = 2.0 * PI * mesh.nodes.len() as f64 * rho.powf(1.5) * kh.max(1.0).powi(2) / (2f64.sqrt() * kh * d_tilde);
    let c3 = 2.0 * d_tilde / (PI * rho * th * d_tilde0).sqrt();
    Ok(TheoryConstants {
        kappa_h: kh,
        rho,
        nu_ne,
        mu,
        order,
        chi: chi(order.max(1), kh, rho),
        c1,
        c2,
        c3,
        d_tilde,
        d_tilde0,
    })
}

/// `||exp(i kappa d . x)||_{H^M_kappa}` over a region of the given area, real unit `d`.
pub fn plane_wave_sobolev_norm(d: [f64; 2], area: f64, m_order: usize) -> f64 {
    let (a, b) = (d[0] * d[0], d[1] * d[1]);
    let mut s = 0.0;
    for l in 0..=m_order {
        for j in 0..=l {
            s += a.powi(j as i32) * b.powi((l - j) as i32);
        }
    }
    (area * s).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_geometry::{build_mesh, DomainPolygon};
    use crate::reference_solutions::{EpwSum, PlaneWave};
    use crate::solver::{cell_rule, error_norms, NormRequest};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_square(h: f64) -> CartesianMesh {
        let d = DomainPolygon::rectangle(0.0, 0.0, 1.0, 1.0);
        build_mesh(&d, h, h, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn projection_of_a_mode_is_that_mode() {
        let (h1, h2, k) = (0.5, 0.5, 30.0);
        let mut coef = vec![c(0.0, 0.0); 3];
        coef[2] = c(1.0, 0.0);
        let u = ModeCombination::new(h1, h2, k, coef).unwrap();
        let p = local_projection(&u, h1, h2, k, 6).unwrap();
        for (n, a) in p.projection.coefficients.iter().enumerate() {
            let want = if n == 2 { 1.0 } else { 0.0 };
            assert!((a - want).norm() < 1e-10, "n={} {a}", n + 1);
        }
        let mut coef = vec![c(0.0, 0.0); 5];
        coef[4] = c(1.0, 0.0);
        let u5 = ModeCombination::new(h1, h2, k, coef).unwrap();
        let p = local_projection(&u5, h1, h2, k, 4).unwrap();
        assert!(p.projection.coefficients.iter().all(|a| a.norm() < 1e-8));
    }

    #[test]
    fn projection_coefficients_depend_only_on_the_trace() {
        let (h1, h2, k) = (0.5, 0.4, 17.0);
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let coef: Vec<Complex64> = (0..8).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let u = ModeCombination::new(h1, h2, k, coef).unwrap();
        let p = local_projection(&u, h1, h2, k, 6).unwrap();
        // the modes vanish on three sides; phi_n(x, 0) = sin(k nu x) up to the sign of y
        let mirrored = ModeCombination {
            modes: u.modes.clone(),
            coefficients: u.coefficients.clone(),
        };
        let flipped = Flip { u: &mirrored, h2 };
        let t = reference_trace_coefficients(&flipped, h1, k, 6);
        for n in 0..6 {
            let a = p.projection.coefficients[n];
            assert!((a - t[n]).norm() < 1e-8 * a.norm().max(1.0), "n={n}: {a} vs {}", t[n]);
        }
    }

    /// Reflection y -> h2 - y, moving the trace edge to y = 0.
    struct Flip<'a> {
        u: &'a dyn Field,
        h2: f64,
    }
    impl Field for Flip<'_> {
        fn value(&self, p: Point) -> Complex64 {
            self.u.value([p[0], self.h2 - p[1]])
        }
        fn gradient(&self, p: Point) -> [Complex64; 2] {
            let g = self.u.gradient([p[0], self.h2 - p[1]]);
            [g[0], -g[1]]
        }
        fn rates(&self) -> (f64, f64) {
            self.u.rates()
        }
    }

    #[test]
    fn projection_is_the_best_approximation() {
        let (h1, h2, k) = (0.5, 0.5, 12.0);
        let u = PlaneWave::at_angle(0.7, k);
        let ne = 5;
        let p = local_projection(&u, h1, h2, k, ne).unwrap();
        let rule = reference_rule(&u, h1, h2, k, ne);
        let dist = |v: &ModeCombination| {
            let d = Difference { u: &u, v };
            h1k_product(&rule, k, &d, &d).re.sqrt()
        };
        let best = dist(&p.projection);
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        for _ in 0..20 {
            let mut v = p.projection.clone();
            for a in &mut v.coefficients {
                *a += c(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
            }
            assert!(best <= dist(&v) + 1e-12);
        }
    }

    #[test]
    fn edge_interpolant_reproduces_edge_functions() {
        let mesh = unit_square(0.5);
        let space = DiscreteSpace::new(&mesh, 30.0, 5, 1).unwrap();
        let f = space
            .functions
            .iter()
            .position(|b| b.label == BasisLabel::Edge { edge: 7, n: 3 })
            .unwrap();
        let alpha = edge_interpolant(&space.functions[f].mode, &mesh, 5);
        for (i, a) in alpha.iter().enumerate() {
            let want = if i == 7 * 5 + 2 { 1.0 } else { 0.0 };
            assert!((a - want).norm() < 1e-10, "{i}: {a}");
        }
        // node functions vanish on every edge except the horizontal ones through the node
        let zero = EpwSum { kappa: 30.0, terms: vec![] };
        assert!(edge_interpolant(&zero, &mesh, 5).iter().all(|a| *a == c(0.0, 0.0)));
    }

    /// Adaptive Simpson on [a, b].
    fn adaptive<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64) -> Complex64 {
        fn rec<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, fa: Complex64, fm: Complex64, fb: Complex64, whole: Complex64, tol: f64, depth: u32) -> Complex64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            let delta = left + right - whole;
            if depth == 0 || (depth < 34 && delta.norm() <= 15.0 * tol) {
                return left + right + delta / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    #[test]
    fn edge_interpolant_matches_adaptive_quadrature_for_plane_wave() {
        let mesh = unit_square(0.5);
        let u = PlaneWave::at_angle(0.4, 30.0);
        let ne = 6;
        let alpha = edge_interpolant(&u, &mesh, ne);
        for (e, edge) in mesh.edges.iter().enumerate() {
            for n in 1..=ne {
                let f = |t: f64| u.value(edge.point(t * edge.length)) * (n as f64 * PI * t).sin();
                let want = 2.0 * adaptive(&f, 0.0, 1.0, 1e-14);
                let got = alpha[e * ne + n - 1];
                assert!((got - want).norm() < 1e-10 * want.norm().max(1e-3), "edge {e} n {n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn vandermonde_norm_examples() {
        assert_eq!(vandermonde_inverse_norm(1, 3.0), 1.0);
        // N = 2, kappa h1 = 1: nodes x1 = (pi/2)^2, x2 = (3 pi/2)^2
        let a = collocation_matrix(2, 1.0);
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let inv = DMatrix::from_row_slice(2, 2, &[a[(1, 1)] / det, -a[(0, 1)] / det, -a[(1, 0)] / det, a[(0, 0)] / det]);
        let brute = (0..2).map(|r| inv.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        assert!((vandermonde_inverse_norm(2, 1.0) - brute).abs() < 1e-12 * brute);
    }

    /// Dense inverse of the collocation matrix: LU on the Vandermonde matrix of
    /// the squared nodes rescaled to (0, 1], refined by Newton-Schulz steps.
    fn dense_inverse(n: usize, kh: f64) -> DMatrix<f64> {
        let x: Vec<f64> = (0..n).map(|m| ((2 * m + 1) as f64 * PI / (2.0 * kh)).powi(2)).collect();
        let top = x[n - 1];
        let v = DMatrix::from_fn(n, n, |r, m| (x[m] / top).powi(r as i32));
        let mut vi = v.clone().lu().try_inverse().unwrap();
        for _ in 0..3 {
            let r = DMatrix::identity(n, n) - &v * &vi;
            vi += &vi * r;
        }
        DMatrix::from_fn(n, n, |m, r| {
            let sign = if (m + r) % 2 == 0 { 1.0 } else { -1.0 };
            sign * vi[(m, r)] / top.powi(r as i32)
        })
    }

    #[test]
    fn vandermonde_norm_matches_dense_inversion() {
        for &kh in &[0.5, 1.0, 5.0, 15.0] {
            for n in 1..=8 {
                let inv = dense_inverse(n, kh);
                let id = &inv * collocation_matrix(n, kh);
                assert!((id - DMatrix::identity(n, n)).amax() < 1e-6, "kh={kh} n={n}");
                let dense = (0..n).map(|r| inv.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
                let formula = vandermonde_inverse_norm(n, kh);
                assert!((formula - dense).abs() < 1e-8 * dense, "kh={kh} n={n}: {formula} vs {dense}");
            }
        }
    }

    #[test]
    fn vandermonde_norm_matches_extended_precision_values() {
        // 60-digit inversions of the collocation matrix, N = 8
        let frozen = [
            (0.5, 1.2595779677403315),
            (1.0, 1.3380725516915164),
            (5.0, 8.1578804615835443),
            (15.0, 3163.2174769339127),
        ];
        for (kh, want) in frozen {
            let got = vandermonde_inverse_norm(8, kh);
            assert!((got - want).abs() < 1e-12 * want, "kh={kh}: {got}");
        }
        assert!((vandermonde_inverse_norm(7, 0.5) - 1.2534154099595627).abs() < 1e-14);
    }

    #[test]
    fn explicit_inverse_is_an_inverse() {
        for n in 1..=6 {
            let a = collocation_matrix(n, 1.0);
            let id = explicit_inverse(n, 1.0) * a;
            assert!((id - DMatrix::identity(n, n)).amax() < 1e-9);
        }
    }

    #[test]
    fn single_mode_collocation_returns_value() {
        let mesh = unit_square(0.5);
        let u = PlaneWave::at_angle(0.3, 7.0);
        let beta = collocation_solve(&u, &mesh, 7.0, 1).unwrap();
        for (node, b) in mesh.nodes.iter().zip(&beta) {
            assert!((b[0] - u.value(node.coords)).norm() < 1e-14);
        }
    }

    #[test]
    fn collocation_recovers_node_functions() {
        let mesh = unit_square(0.5);
        let kappa = 9.0;
        let space = DiscreteSpace::new(&mesh, kappa, 1, 3).unwrap();
        for f in space.functions.iter().filter(|f| matches!(f.label, BasisLabel::Node { .. })) {
            let BasisLabel::Node { node, m } = f.label else { unreachable!() };
            let beta = collocation_solve(&f.mode, &mesh, kappa, 3).unwrap();
            for (q, b) in beta.iter().enumerate() {
                for (k, v) in b.iter().enumerate() {
                    let want = if q == node && k + 1 == m { 1.0 } else { 0.0 };
                    assert!((v - want).norm() < 1e-9, "node {node} m {m}: beta[{q}][{k}] = {v}");
                }
            }
        }
    }

    /// Residual measured on the assembled node expansion rather than the matrix.
    fn expansion_residual(u: &dyn DerivativeOracle, mesh: &CartesianMesh, kappa: f64, order: usize) -> f64 {
        let space = DiscreteSpace::new(mesh, kappa, 1, order).unwrap();
        let beta = collocation_solve(u, mesh, kappa, order).unwrap();
        let vu = space.combine(mesh, &node_vector(&space, &beta));
        let mut worst: f64 = 0.0;
        for node in &mesh.nodes {
            let rhs: Vec<Complex64> = (0..order).map(|n| u.derivative(node.coords, 2 * n, 0) / kappa.powi(2 * n as i32)).collect();
            let scale = rhs.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for n in 0..order {
                let lhs = vu.evaluate(node.coords, [2 * n, 0]) / kappa.powi(2 * n as i32);
                worst = worst.max((lhs - rhs[n]).norm() / scale);
            }
        }
        worst
    }

    #[test]
    fn collocation_residual_for_plane_waves() {
        let s = 0.5f64.sqrt();
        let u = PlaneWave::new([c(s, 0.0), c(s, 0.0)], 30.0).unwrap();
        let mesh = unit_square(0.5);
        let beta = collocation_solve(&u, &mesh, 30.0, 3).unwrap();
        assert!(collocation_residual(&u, &mesh, 30.0, &beta) < 1e-9);
        assert!(expansion_residual(&u, &mesh, 30.0, 3) < 1e-9);
        for n in 1..=5 {
            for (kappa, angle) in [(2.0, 0.1), (10.0, 1.0), (30.0, 2.2), (60.0, 0.3)] {
                let u = PlaneWave::at_angle(angle, kappa);
                let beta = collocation_solve(&u, &mesh, kappa, n).unwrap();
                let r = collocation_residual(&u, &mesh, kappa, &beta);
                assert!(r < 1e-9, "N={n} kappa={kappa}: {r}");
                if kappa >= 10.0 {
                    let r = expansion_residual(&u, &mesh, kappa, n);
                    assert!(r < 1e-9, "N={n} kappa={kappa}: expansion {r}");
                }
            }
        }
    }

    #[test]
    fn beta_respects_its_bound() {
        let mesh = unit_square(0.5);
        let area = 1.0;
        for &kh in &[1.0, 5.0, 15.0] {
            let kappa = kh / mesh.h();
            for n in 1..=5 {
                let u = PlaneWave::at_angle(0.9, kappa);
                let beta = collocation_solve(&u, &mesh, kappa, n).unwrap();
                let bmax = beta.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
                let unorm = plane_wave_sobolev_norm([0.9f64.cos(), 0.9f64.sin()], area, 2 * n);
                let bound = 2.0 * mesh.rho() * kh.max(1.0).powi(2) / mesh.h() * chi(n, kh, mesh.rho()) * unorm;
                assert!(bmax <= bound, "kh={kh} N={n}: {bmax} > {bound}");
            }
        }
    }

    #[test]
    fn binomial_transfer_links_derivative_stacks() {
        let kappa = 6.0;
        let mut rng = rand::rngs::StdRng::seed_from_u64(12);
        let terms = (0..3)
            .map(|_| {
                let z = c(rng.gen_range(0.0..6.0), rng.gen_range(-1.0..1.0));
                (c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)), [z.cos(), z.sin()])
            })
            .collect();
        let u = EpwSum { kappa, terms };
        let n = 5;
        let l = binomial_transfer(n).map(|v| Complex64::new(v, 0.0));
        for p in [[0.1, 0.2], [0.5, -0.3]] {
            let b1 = DVector::from_fn(n, |k, _| u.derivative(p, 2 * k, 0) / kappa.powi(2 * k as i32));
            let b2 = DVector::from_fn(n, |k, _| u.derivative(p, 0, 2 * k) / kappa.powi(2 * k as i32));
            let diff = (&l * &b2 - &b1).norm();
            assert!(diff < 1e-10 * b1.norm(), "{diff}");
        }
    }

    #[test]
    fn combined_interpolant_reproduces_space_members() {
        let mesh = unit_square(0.5);
        let kappa = 11.0;
        let space = DiscreteSpace::new(&mesh, kappa, 4, 2).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let xi: Vec<Complex64> = (0..space.dim()).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let u = space.combine(&mesh, &xi);
        let got = combined_interpolant(&u, &mesh, &space, 2).unwrap();
        for (a, b) in got.iter().zip(&xi) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
        let iu = space.combine(&mesh, &got);
        for _ in 0..50 {
            let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            assert!((iu.value(p) - u.value(p)).norm() < 1e-8);
        }
    }

    #[test]
    fn combined_interpolant_matches_even_derivatives_at_nodes() {
        let mesh = unit_square(0.5);
        let kappa = 10.0;
        let nn = 3;
        let space = DiscreteSpace::new(&mesh, kappa, 6, nn).unwrap();
        let u = PlaneWave::at_angle(0.5, kappa);
        let iu = space.combine(&mesh, &combined_interpolant(&u, &mesh, &space, nn).unwrap());
        for node in &mesh.nodes {
            for cell in node.cells() {
                let (i, j) = (mesh.cells[cell].i, mesh.cells[cell].j);
                for n in 0..nn {
                    let k = kappa.powi(2 * n as i32);
                    for alpha in [[2 * n, 0], [0, 2 * n]] {
                        let got = iu.evaluate_on(i, j, node.coords, alpha) / k;
                        let want = u.derivative(node.coords, alpha[0], alpha[1]) / k;
                        assert!((got - want).norm() < 1e-8, "{alpha:?} at {:?}: {got} vs {want}", node.coords);
                    }
                }
            }
        }
    }

    #[test]
    fn theory_constants_examples() {
        // chi with kh <= 1 and rho e^{kh}/kh >= e
        assert_eq!(chi(3, 0.5, 1.0), E);
        let mesh = unit_square(0.5);
        let t = theory_constants(30.0, &mesh, 7, 2, 4).unwrap();
        let want = 8.0 * 15.0 / (15.0 * 15f64.tanh()).sqrt();
        assert!((t.c1 - want).abs() < 1e-12 * want);
        assert_eq!(t.mu, 4);
        assert_eq!(t.order, 2);
        assert!(t.c2 > 0.0 && t.c3 > 0.0 && t.chi > 0.0);
        match theory_constants(30.0, &mesh, 6, 2, 4) {
            Err(TrefftzError::PreAsymptotic { nu_ne }) => assert!((nu_ne - 6.0 * PI / 15.0).abs() < 1e-14),
            other => panic!("expected pre-asymptotic error, got {other:?}"),
        }
    }

    #[test]
    fn estimate_dominates_interpolation_error() {
        let mesh = unit_square(0.5);
        let kappa = 30.0;
        let d = [0.6, 0.8];
        let u = PlaneWave::new([c(d[0], 0.0), c(d[1], 0.0)], kappa).unwrap();
        let req = NormRequest { linf: false, ..Default::default() };
        for nn in 1..=2 {
            for ne in [7, 12, 20] {
                let space = DiscreteSpace::new(&mesh, kappa, ne, nn).unwrap();
                let iu = space.combine(&mesh, &combined_interpolant(&u, &mesh, &space, nn).unwrap());
                let e = error_norms(&iu, &u, &mesh, kappa, &req);
                let abs_err = e.rel_h1k * e.exact_h1k;
                let t = theory_constants(kappa, &mesh, ne, nn, 2 * nn).unwrap();
                let bound = t.bound_factor(1) * plane_wave_sobolev_norm(d, 1.0, t.mu + 1);
                assert!(abs_err <= bound, "Ne={ne} Nn={nn}: {abs_err} > {bound}");
            }
        }
        // keep the rule helper exercised for clipped cells too
        let (dom, s) = DomainPolygon::builtin("star5").unwrap();
        let star = build_mesh(&dom, s.h1, s.h2, s.origin).unwrap();
        let total: f64 = star.cells.iter().map(|c| cell_rule(c, 1.0, 0.0, &[]).integrate(|_| 1.0)).sum();
        assert!((total - dom.area()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn binomial_transfer_is_unit_lower_triangular_up_to_sign(n in 1usize..12) {
            let l = binomial_transfer(n);
            for r in 0..n {
                prop_assert_eq!(l[(r, r)].abs(), 1.0);
                for c in r + 1..n {
                    prop_assert_eq!(l[(r, c)], 0.0);
                }
            }
        }

        #[test]
        fn vandermonde_norm_is_at_least_one(n in 1usize..9, kh in 0.1f64..20.0) {
            prop_assert!(vandermonde_inverse_norm(n, kh) >= 1.0 - 1e-12 || n > 1);
            let dense = explicit_inverse(n, kh);
            let rows = (0..n).map(|r| dense.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            prop_assert!((rows - vandermonde_inverse_norm(n, kh)).abs() <= 1e-9 * rows);
        }
    }
}
