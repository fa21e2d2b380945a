//! Closed-form integration of plane-wave products and assembly of the
//! oversampled Petrov–Galerkin system.
//!
//! Every product of a trial and a conjugated test wave is `C exp(i g . x)` with
//! `g = kappa (d - conj d')`. Over full cells this integrates as a product of two
//! 1D integrals. Over clipped polygons the divergence theorem turns it into a
//! sum of segment integrals. All exponentials are referred to the point of the
//! cell where they are largest, so nothing overflows for strongly evanescent
//! modes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::field::Field;
use crate::mesh_geometry::{BoundarySegment, CartesianMesh, Cell, Rect};
use crate::quadrature::{Rule1D, Rule2D};
use crate::reference_solutions::impedance_trace;
use crate::wave_basis::{AnchoredEpw, CellPiece, DiscreteSpace, PiecewiseEpwMode};
use crate::{Point, Result, TrefftzError};

/// Below this value of |a| L the 1D kernel switches to its Taylor series.
pub const SMALL_EXPONENT: f64 = 1e-4;
/// Below this value of |g| diam a polygon integral is done by Gauss quadrature.
const POLYGON_QUADRATURE_LIMIT: f64 = 1.0;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `int_0^L exp(a t) dt`.
pub fn line_exp_integral(a: Complex64, l: f64) -> Complex64 {
    let z = a * l;
    if z.norm() <= SMALL_EXPONENT {
        // L (1 + z/2 + z^2/6 + ... ) with eight terms
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = term;
        for k in 2..=8 {
            term = term * z / k as f64;
            sum += term;
        }
        l * sum
    } else {
        exp_m1(z) / a
    }
}

/// `exp(z) - 1` without cancellation for small `z`.
pub fn exp_m1(z: Complex64) -> Complex64 {
    let (s, c) = z.im.sin_cos();
    let half = (0.5 * z.im).sin();
    let em = z.re.exp_m1();
    Complex64::new(em * c - 2.0 * half * half, (em + 1.0) * s)
}

/// `int_x0^x1 exp(i g (x - c)) dx` started from whichever end keeps the exponent bounded.
fn interval_exp(g: Complex64, x0: f64, x1: f64, c: f64) -> Complex64 {
    let a = I * g;
    let w = x1 - x0;
    if a.re <= 0.0 {
        (a * (x0 - c)).exp() * line_exp_integral(a, w)
    } else {
        (a * (x1 - c)).exp() * line_exp_integral(-a, w)
    }
}

/// Corner of `rect` maximizing `Re(i g . x)`.
pub fn dominant_corner(g: [Complex64; 2], rect: &Rect) -> Point {
    [
        if g[0].im > 0.0 { rect.x0 } else { rect.x1 },
        if g[1].im > 0.0 { rect.y0 } else { rect.y1 },
    ]
}

/// `int_rect exp(i g . (x - c)) dA`.
pub fn rect_exp_integral_at(g: [Complex64; 2], rect: &Rect, c: Point) -> Complex64 {
    interval_exp(g[0], rect.x0, rect.x1, c[0]) * interval_exp(g[1], rect.y0, rect.y1, c[1])
}

/// `int_rect exp(i g . x) dA`.
pub fn rect_exp_integral(g: [Complex64; 2], rect: &Rect) -> Complex64 {
    let c = dominant_corner(g, rect);
    let e = (I * (g[0] * c[0] + g[1] * c[1])).exp();
    e * rect_exp_integral_at(g, rect, c)
}

/// `int_[a,b] exp(i g . (x - c)) ds` along the straight segment.
pub fn segment_exp_integral_at(g: [Complex64; 2], a: Point, b: Point, c: Point) -> Complex64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return ZERO;
    }
    let rate = I * (g[0] * d[0] + g[1] * d[1]) / len;
    let start = |p: Point| I * (g[0] * (p[0] - c[0]) + g[1] * (p[1] - c[1]));
    if rate.re <= 0.0 {
        start(a).exp() * line_exp_integral(rate, len)
    } else {
        start(b).exp() * line_exp_integral(-rate, len)
    }
}

/// Unit vector maximizing |g . w|.
fn principal_direction(g: [Complex64; 2]) -> Point {
    let a = g[0].re * g[0].re + g[0].im * g[0].im;
    let b = g[0].re * g[1].re + g[0].im * g[1].im;
    let c = g[1].re * g[1].re + g[1].im * g[1].im;
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    [theta.cos(), theta.sin()]
}

/// `int_P exp(i g . (x - c)) dA` over a closed polygon; clockwise rings count negatively.
pub fn polygon_exp_integral_at(g: [Complex64; 2], poly: &[Point], c: Point) -> Complex64 {
    if poly.len() < 3 {
        return ZERO;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in poly {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let diam = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
    let gnorm = (g[0].norm_sqr() + g[1].norm_sqr()).sqrt();
    if gnorm * diam <= POLYGON_QUADRATURE_LIMIT {
        let rule = Rule2D::polygon_fan(poly, 14);
        return rule.integrate(|x| (I * (g[0] * (x[0] - c[0]) + g[1] * (x[1] - c[1]))).exp());
    }
    let w = principal_direction(g);
    let gw = g[0] * w[0] + g[1] * w[1];
    let n = poly.len();
    let mut sum = ZERO;
    for k in 0..n {
        let p = poly[k];
        let q = poly[(k + 1) % n];
        let len = (q[0] - p[0]).hypot(q[1] - p[1]);
        if len == 0.0 {
            continue;
        }
        // outward normal of a counterclockwise ring is (dy, -dx)/len
        let wn = (w[0] * (q[1] - p[1]) - w[1] * (q[0] - p[0])) / len;
        if wn != 0.0 {
            sum += wn * segment_exp_integral_at(g, p, q, c);
        }
    }
    sum / (I * gw)
}

/// `int_P exp(i g . x) dA`.
pub fn polygon_exp_integral(g: [Complex64; 2], poly: &[Point]) -> Complex64 {
    let c = poly
        .iter()
        .copied()
        .max_by(|a, b| {
            let fa = -(g[0].im * a[0] + g[1].im * a[1]);
            let fb = -(g[0].im * b[0] + g[1].im * b[1]);
            fa.partial_cmp(&fb).unwrap()
        })
        .unwrap_or([0.0, 0.0]);
    (I * (g[0] * c[0] + g[1] * c[1])).exp() * polygon_exp_integral_at(g, poly, c)
}

/// Coefficients of the cellwise form `grad * (grad v . conj grad w) + mass * v conj w`
/// plus `boundary * v conj w` on the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormWeights {
    pub grad: f64,
    pub mass: f64,
    pub boundary: Complex64,
}

impl FormWeights {
    /// The impedance Helmholtz form.
    pub fn helmholtz(kappa: f64) -> Self {
        FormWeights {
            grad: 1.0,
            mass: -kappa * kappa,
            boundary: Complex64::new(0.0, -kappa),
        }
    }

    /// The kappa-weighted H1 inner product.
    pub fn h1_kappa(kappa: f64) -> Self {
        FormWeights {
            grad: 1.0 / (kappa * kappa),
            mass: 1.0,
            boundary: ZERO,
        }
    }
}

/// Contribution of one cell to the form for a pair of wave pieces.
pub fn cell_pair_integral(trial: &[AnchoredEpw], test: &[AnchoredEpw], cell: &Cell, weights: FormWeights) -> Complex64 {
    let mut total = ZERO;
    for a in trial {
        let ka = a.kappa;
        for b in test {
            let kb = b.kappa;
            let db = [b.direction[0].conj(), b.direction[1].conj()];
            let g = [ka * a.direction[0] - kb * db[0], ka * a.direction[1] - kb * db[1]];
            let dot = a.direction[0] * db[0] + a.direction[1] * db[1];
            let vol = weights.grad * ka * kb * dot + weights.mass;
            let c = dominant_corner(g, &cell.rect);
            // a(c) conj(b(c)), both with non-positive exponents
            let pref = a.amplitude
                * b.amplitude.conj()
                * (I * ka * (a.direction[0] * (c[0] - a.anchor[0]) + a.direction[1] * (c[1] - a.anchor[1]))
                    - I * kb * (db[0] * (c[0] - b.anchor[0]) + db[1] * (c[1] - b.anchor[1])))
                    .exp();
            if pref == ZERO {
                continue;
            }
            let mut acc = ZERO;
            if vol != ZERO {
                let area = if cell.full {
                    rect_exp_integral_at(g, &cell.rect, c)
                } else {
                    cell.clipped
                        .pieces
                        .iter()
                        .map(|p| polygon_exp_integral_at(g, p, c))
                        .sum()
                };
                acc += vol * area;
            }
            if weights.boundary != ZERO {
                let bnd: Complex64 = cell
                    .boundary
                    .iter()
                    .map(|s| segment_exp_integral_at(g, s.a, s.b, c))
                    .sum();
                acc += weights.boundary * bnd;
            }
            total += pref * acc;
        }
    }
    total
}

/// `A(trial, test)` for two piecewise modes on the same mesh.
pub fn sesquilinear_entry(trial: &PiecewiseEpwMode, test: &PiecewiseEpwMode, mesh: &CartesianMesh, kappa: f64) -> Complex64 {
    form_entry(trial, test, mesh, FormWeights::helmholtz(kappa))
}

pub fn form_entry(trial: &PiecewiseEpwMode, test: &PiecewiseEpwMode, mesh: &CartesianMesh, weights: FormWeights) -> Complex64 {
    let mut total = ZERO;
    for pa in &trial.pieces {
        if let Some(pb) = test.piece_for_cell(pa.i, pa.j) {
            total += cell_pair_integral(&pa.terms, &pb.terms, &mesh.cells[pa.cell], weights);
        }
    }
    total
}

/// Dense matrix `M[i, j] = form(trial_j, test_i)`, filled column by column in parallel.
pub fn assemble_matrix(mesh: &CartesianMesh, trial: &DiscreteSpace, test: &DiscreteSpace, weights: FormWeights) -> DMatrix<Complex64> {
    let rows = test.dim();
    let columns: Vec<Vec<Complex64>> = trial
        .functions
        .par_iter()
        .map(|f| {
            let mut col = vec![ZERO; rows];
            for piece in &f.mode.pieces {
                let cell = &mesh.cells[piece.cell];
                for &(ti, tk) in &test.by_cell[piece.cell] {
                    let tp: &CellPiece = &test.functions[ti].mode.pieces[tk];
                    col[ti] += cell_pair_integral(&piece.terms, &tp.terms, cell, weights);
                }
            }
            col
        })
        .collect();
    let mut m = DMatrix::<Complex64>::zeros(rows, trial.dim());
    for (j, col) in columns.into_iter().enumerate() {
        m.column_mut(j).copy_from_slice(&col);
    }
    m
}

/// Gauss rule along a boundary segment, graded toward singular end points.
fn segment_rule(seg: &BoundarySegment, osc: f64, decay: f64, singular_ends: [bool; 2]) -> Rule1D {
    Rule1D::graded(0.0, seg.length(), osc, decay, singular_ends)
}

/// `sum over boundary of g conj(test_i)` for every test function, with `g` the
/// impedance trace of `u`.
pub fn boundary_rhs(mesh: &CartesianMesh, test: &DiscreteSpace, u: &dyn Field, kappa: f64) -> Result<Vec<Complex64>> {
    let (u_osc, u_decay) = u.rates();
    let per_cell: Vec<Result<Vec<(usize, Complex64)>>> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| {
            let cell = &mesh.cells[c];
            let mut out = Vec::new();
            if cell.boundary.is_empty() {
                return Ok(out);
            }
            let test_decay = test.by_cell[c]
                .iter()
                .map(|&(f, _)| test.functions[f].mode.max_decay())
                .fold(0.0, f64::max);
            for seg in &cell.boundary {
                let g = impedance_trace(u, seg, kappa)?;
                let len = seg.length();
                let osc = u_osc.max(kappa) + kappa + test_decay;
                let rule = segment_rule(seg, osc, u_decay + test_decay, g.singular_ends);
                let pts: Vec<(Point, Complex64)> = rule
                    .x
                    .iter()
                    .zip(&rule.w)
                    .map(|(&s, &w)| {
                        let p = seg.point(s / len);
                        (p, g.at_point(p) * w)
                    })
                    .collect();
                for &(f, k) in &test.by_cell[c] {
                    let piece = &test.functions[f].mode.pieces[k];
                    let v: Complex64 = pts.iter().map(|(p, gw)| gw * piece.value(*p).conj()).sum();
                    out.push((f, v));
                }
            }
            Ok(out)
        })
        .collect();
    let mut rhs = vec![ZERO; test.dim()];
    for r in per_cell {
        for (f, v) in r? {
            rhs[f] += v;
        }
    }
    Ok(rhs)
}

/// Dense oversampled system: rows are test functions, columns trial functions.
#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub matrix: DMatrix<Complex64>,
    pub rhs: DVector<Complex64>,
    pub trial_dim: usize,
    pub test_dim: usize,
}

/// Assembles `A` and `F`; `data` supplies the impedance trace, `sources` add
/// `weight * conj(test(x0))` to the right-hand side.
pub fn assemble(
    mesh: &CartesianMesh,
    trial: &DiscreteSpace,
    test: &DiscreteSpace,
    data: Option<&dyn Field>,
    sources: &[(Point, Complex64)],
) -> Result<GalerkinSystem> {
    if (trial.kappa - test.kappa).abs() > 0.0 {
        return Err(TrefftzError::InvalidInput("trial and test spaces use different kappa".into()));
    }
    let kappa = trial.kappa;
    let matrix = assemble_matrix(mesh, trial, test, FormWeights::helmholtz(kappa));
    let mut rhs = match data {
        Some(u) => boundary_rhs(mesh, test, u, kappa)?,
        None => vec![ZERO; test.dim()],
    };
    for &(x0, weight) in sources {
        for (i, f) in test.functions.iter().enumerate() {
            let v = f.mode.evaluate(x0, [0, 0]);
            if v != ZERO {
                rhs[i] += weight * v.conj();
            }
        }
    }
    if matrix.iter().any(|z| !z.is_finite()) || rhs.iter().any(|z| !z.is_finite()) {
        return Err(TrefftzError::Numeric("non-finite entry in the Galerkin system".into()));
    }
    Ok(GalerkinSystem {
        trial_dim: trial.dim(),
        test_dim: test.dim(),
        matrix,
        rhs: DVector::from_vec(rhs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_geometry::{build_mesh, DomainPolygon};
    use crate::quadrature::Rule2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn line_integral_examples() {
        assert_eq!(line_exp_integral(ZERO, 2.5), c(2.5, 0.0));
        let l = 0.7;
        let got = line_exp_integral(c(0.0, std::f64::consts::PI / l), l);
        let want = c(0.0, 2.0 * l / std::f64::consts::PI);
        assert!((got - want).norm() < 1e-15);
        // both branches near the switch
        for a in [c(1e-5, 0.0), c(0.0, 1e-5), c(-7e-6, 7e-6)] {
            let series = line_exp_integral(a, 1.0);
            let direct = (a.exp() - 1.0) / a;
            let ref_val = exp_m1(a) / a;
            assert!((series - ref_val).norm() < 1e-14 * series.norm());
            assert!((series - direct).norm() < 1e-10);
        }
    }

    fn quad_rect(g: [Complex64; 2], r: &Rect, n: usize) -> Complex64 {
        let rule = Rule2D::tensor(&Rule1D::gauss(r.x0, r.x1, n), &Rule1D::gauss(r.y0, r.y1, n));
        rule.integrate(|x| (I * (g[0] * x[0] + g[1] * x[1])).exp())
    }

    #[test]
    fn rect_integral_examples() {
        let r = Rect { x0: 0.2, y0: -0.3, x1: 0.9, y1: 0.4 };
        assert!((rect_exp_integral([ZERO, ZERO], &r) - r.area()).norm() < 1e-15);
        // real g = (3, 0): int e^{3ix} dx over [0.2,0.9] times 0.7
        let g = [c(3.0, 0.0), ZERO];
        let want = (c(0.0, 3.0 * 0.9).exp() - c(0.0, 3.0 * 0.2).exp()) / c(0.0, 3.0) * 0.7;
        assert!((rect_exp_integral(g, &r) - want).norm() < 1e-14);
    }

    #[test]
    fn polygon_integral_examples() {
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let r = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
        assert!((polygon_exp_integral([ZERO, ZERO], &square) - 1.0).norm() < 1e-15);
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let g = [c(rng.gen_range(-40.0..40.0), rng.gen_range(-10.0..10.0)), c(rng.gen_range(-40.0..40.0), rng.gen_range(-10.0..10.0))];
            let a = polygon_exp_integral(g, &square);
            let b = rect_exp_integral(g, &r);
            assert!((a - b).norm() < 1e-12 * b.norm().max(1e-300), "{g:?}");
        }
        // right triangle, g = (pi, 0): int_0^1 (1 - x) e^{i pi x} dx
        let tri = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let pi = std::f64::consts::PI;
        let got = polygon_exp_integral([c(pi, 0.0), ZERO], &tri);
        let want = c(2.0 / (pi * pi), 1.0 / pi);
        assert!((got - want).norm() < 1e-10 * want.norm());
        let rule = Rule2D::triangle(tri[0], tri[1], tri[2], 30);
        let quad: Complex64 = rule.integrate(|x| (I * pi * x[0]).exp());
        assert!((got - quad).norm() < 1e-10 * want.norm());
    }

    fn random_complex_direction(rng: &mut impl Rng) -> [Complex64; 2] {
        // d = (cosh(b) cos a + ..., ) written as (cos z, sin z) for complex z
        let z = c(rng.gen_range(0.0..6.3), rng.gen_range(-2.0..2.0));
        [z.cos(), z.sin()]
    }

    #[test]
    fn rect_integral_matches_quadrature_for_epw_products() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let r = Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 0.5 };
        for _ in 0..100 {
            let k = rng.gen_range(1.0..30.0);
            let d1 = random_complex_direction(&mut rng);
            let d2 = random_complex_direction(&mut rng);
            let g = [k * (d1[0] - d2[0].conj()), k * (d1[1] - d2[1].conj())];
            let a = rect_exp_integral(g, &r);
            let b = quad_rect(g, &r, 40);
            assert!((a - b).norm() < 1e-10 * b.norm(), "{a} {b}");
        }
    }

    #[test]
    fn polygon_integral_matches_quadrature_on_clipped_star_cells() {
        let (d, s) = DomainPolygon::builtin("star5").unwrap();
        let mesh = build_mesh(&d, s.h1, s.h2, s.origin).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for cell in &mesh.cells {
            for _ in 0..25 {
                let k = rng.gen_range(0.01..30.0);
                let d1 = random_complex_direction(&mut rng);
                let d2 = random_complex_direction(&mut rng);
                let g = [k * (d1[0] - d2[0].conj()), k * (d1[1] - d2[1].conj())];
                let cp = dominant_corner(g, &cell.rect);
                let a: Complex64 = cell.clipped.pieces.iter().map(|p| polygon_exp_integral_at(g, p, cp)).sum();
                let b: Complex64 = cell
                    .clipped
                    .pieces
                    .iter()
                    .map(|p| {
                        Rule2D::polygon_fan(p, 60)
                            .integrate(|x| (I * (g[0] * (x[0] - cp[0]) + g[1] * (x[1] - cp[1]))).exp())
                    })
                    .sum();
                assert!((a - b).norm() < 1e-10 * b.norm().max(1e-3 * cell.clipped.area), "{a} {b}");
            }
        }
    }

    /// Direct quadrature of the impedance form on the mesh.
    pub(crate) fn quadrature_entry(trial: &PiecewiseEpwMode, test: &PiecewiseEpwMode, mesh: &CartesianMesh, kappa: f64, n: usize) -> Complex64 {
        let mut total = ZERO;
        for pa in &trial.pieces {
            let Some(pb) = test.piece_for_cell(pa.i, pa.j) else { continue };
            let cell = &mesh.cells[pa.cell];
            let rules: Vec<Rule2D> = if cell.full {
                vec![Rule2D::tensor(
                    &Rule1D::gauss(cell.rect.x0, cell.rect.x1, n),
                    &Rule1D::gauss(cell.rect.y0, cell.rect.y1, n),
                )]
            } else {
                cell.clipped.pieces.iter().map(|p| Rule2D::polygon_fan(p, n)).collect()
            };
            let grad = |terms: &[AnchoredEpw], x: Point| {
                terms.iter().fold([ZERO; 2], |acc, t| {
                    let g = t.gradient(x);
                    [acc[0] + g[0], acc[1] + g[1]]
                })
            };
            for rule in &rules {
                total += rule.integrate(|x| {
                    let ga = grad(&pa.terms, x);
                    let gb = grad(&pb.terms, x);
                    ga[0] * gb[0].conj() + ga[1] * gb[1].conj() - kappa * kappa * pa.value(x) * pb.value(x).conj()
                });
            }
            for seg in &cell.boundary {
                let r = Rule1D::gauss(0.0, 1.0, n);
                let len = seg.length();
                total += r.integrate_c(|t| {
                    let x = seg.point(t);
                    -I * kappa * pa.value(x) * pb.value(x).conj() * len
                });
            }
        }
        total
    }

    trait IntegrateComplex {
        fn integrate_c<F: FnMut(f64) -> Complex64>(&self, f: F) -> Complex64;
    }
    impl IntegrateComplex for Rule1D {
        fn integrate_c<F: FnMut(f64) -> Complex64>(&self, mut f: F) -> Complex64 {
            self.x.iter().zip(&self.w).map(|(&x, &w)| f(x) * w).sum()
        }
    }

    fn check_entries_against_quadrature(domain: &str, kappa: f64, ne: usize, nn: usize, count: usize) {
        let (d, s) = DomainPolygon::builtin(domain).unwrap();
        let mesh = build_mesh(&d, s.h1, s.h2, s.origin).unwrap();
        let space = DiscreteSpace::new(&mesh, kappa, ne, nn).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let n = (kappa * s.h1).ceil() as usize + 15;
        let mut checked = 0;
        while checked < count {
            let i = rng.gen_range(0..space.dim());
            let j = rng.gen_range(0..space.dim());
            let a = sesquilinear_entry(&space.functions[j].mode, &space.functions[i].mode, &mesh, kappa);
            let b = quadrature_entry(&space.functions[j].mode, &space.functions[i].mode, &mesh, kappa, n);
            if b.norm() == 0.0 {
                assert_eq!(a, ZERO);
                continue;
            }
            // entries that cancel to roundoff are measured against the diagonal scale
            let fi = &space.functions[i].mode;
            let fj = &space.functions[j].mode;
            let diag = (sesquilinear_entry(fi, fi, &mesh, kappa).norm() * sesquilinear_entry(fj, fj, &mesh, kappa).norm()).sqrt();
            assert!((a - b).norm() < 1e-9 * b.norm() + 1e-12 * diag, "({i},{j}): {a} vs {b}");
            checked += 1;
        }
    }

    #[test]
    fn entries_match_quadrature_on_unit_square() {
        check_entries_against_quadrature("unit_square", 30.0, 8, 4, 200);
    }

    #[test]
    fn entries_match_quadrature_on_star() {
        check_entries_against_quadrature("star5", 10.0, 6, 3, 100);
    }

    #[test]
    fn volume_part_is_hermitian_and_boundary_part_skew() {
        let (d, s) = DomainPolygon::builtin("star5").unwrap();
        let mesh = build_mesh(&d, s.h1, s.h2, s.origin).unwrap();
        let kappa = 12.0;
        let space = DiscreteSpace::new(&mesh, kappa, 5, 2).unwrap();
        let vol = assemble_matrix(&mesh, &space, &space, FormWeights { grad: 1.0, mass: -kappa * kappa, boundary: ZERO });
        let bnd = assemble_matrix(&mesh, &space, &space, FormWeights { grad: 0.0, mass: 0.0, boundary: c(0.0, -kappa) });
        let scale = vol.norm();
        assert!((&vol - vol.adjoint()).norm() < 1e-12 * scale);
        assert!((&bnd + bnd.adjoint()).norm() < 1e-12 * bnd.norm().max(scale));
    }

    #[test]
    fn interior_diagonal_is_real() {
        let d = DomainPolygon::rectangle(0.0, 0.0, 1.5, 1.5);
        let mesh = build_mesh(&d, 0.5, 0.5, [0.0, 0.0]).unwrap();
        let space = DiscreteSpace::new(&mesh, 20.0, 3, 1).unwrap();
        // the node at (0.5, 0.5) has support away from the boundary except the outer cells
        let node = mesh.nodes.iter().position(|n| n.coords == [0.75 - 0.25, 0.5]).unwrap();
        let f = space.functions.iter().find(|f| f.label == crate::wave_basis::BasisLabel::Node { node, m: 1 }).unwrap();
        let inner: Vec<_> = f.mode.pieces.iter().filter(|p| mesh.cells[p.cell].boundary.is_empty()).collect();
        for p in inner {
            let v = cell_pair_integral(&p.terms, &p.terms, &mesh.cells[p.cell], FormWeights::helmholtz(20.0));
            assert!(v.im.abs() < 1e-12 * v.norm().max(1.0));
        }
    }

    #[test]
    fn sparsity_and_point_source_support() {
        let d = DomainPolygon::rectangle(0.0, 0.0, 2.0, 2.0);
        let mesh = build_mesh(&d, 0.5, 0.5, [0.0, 0.0]).unwrap();
        let trial = DiscreteSpace::new(&mesh, 15.0, 2, 1).unwrap();
        let test = DiscreteSpace::new(&mesh, 15.0, 4, 2).unwrap();
        let x0 = [1.0, 1.0];
        let sys = assemble(&mesh, &trial, &test, None, &[(x0, c(1.0, 0.0))]).unwrap();
        for i in 0..test.dim() {
            let supp: Vec<usize> = test.functions[i].mode.support().collect();
            for j in 0..trial.dim() {
                let overlap = trial.functions[j].mode.support().any(|s| supp.contains(&s));
                if !overlap {
                    assert_eq!(sys.matrix[(i, j)], ZERO);
                }
            }
            let contains = test.functions[i].mode.pieces.iter().any(|p| p.rect.contains(x0, 1e-12));
            if !contains {
                assert_eq!(sys.rhs[i], ZERO);
            }
        }
        let none = assemble(&mesh, &trial, &test, None, &[]).unwrap();
        assert!(none.rhs.iter().all(|z| *z == ZERO));
        assert_eq!(none.matrix.shape(), (test.dim(), trial.dim()));
    }

    #[test]
    fn scaling_a_trial_mode_scales_its_column() {
        let (d, s) = DomainPolygon::builtin("unit_square").unwrap();
        let mesh = build_mesh(&d, s.h1, s.h2, s.origin).unwrap();
        let space = DiscreteSpace::new(&mesh, 10.0, 3, 1).unwrap();
        let mut doubled = space.clone();
        for p in &mut doubled.functions[4].mode.pieces {
            for t in &mut p.terms {
                t.amplitude *= 2.0;
            }
        }
        let a = assemble_matrix(&mesh, &space, &space, FormWeights::helmholtz(10.0));
        let b = assemble_matrix(&mesh, &doubled, &space, FormWeights::helmholtz(10.0));
        for i in 0..space.dim() {
            assert_eq!(b[(i, 4)], a[(i, 4)] * 2.0);
        }
    }

    #[test]
    fn parallel_fill_is_deterministic() {
        let (d, s) = DomainPolygon::builtin("star5").unwrap();
        let mesh = build_mesh(&d, s.h1, s.h2, s.origin).unwrap();
        let space = DiscreteSpace::new(&mesh, 20.0, 6, 2).unwrap();
        let a = assemble_matrix(&mesh, &space, &space, FormWeights::helmholtz(20.0));
        let b = assemble_matrix(&mesh, &space, &space, FormWeights::helmholtz(20.0));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn segment_integral_matches_quadrature(gr in -50.0f64..50.0, gi in -20.0f64..20.0, hr in -50.0f64..50.0, hi in -20.0f64..20.0,
                                               ax in -1.0f64..1.0, ay in -1.0f64..1.0, bx in -1.0f64..1.0, by in -1.0f64..1.0) {
            let g = [c(gr, gi), c(hr, hi)];
            let (a, b) = ([ax, ay], [bx, by]);
            let cp = if -(gi * ax + hi * ay) > -(gi * bx + hi * by) { a } else { b };
            let got = segment_exp_integral_at(g, a, b, cp);
            let len = (bx - ax).hypot(by - ay);
            let rule = Rule1D::gauss(0.0, 1.0, 120);
            let want: Complex64 = rule.x.iter().zip(&rule.w).map(|(&t, &w)| {
                let x = [ax + t * (bx - ax), ay + t * (by - ay)];
                (I * (g[0] * (x[0] - cp[0]) + g[1] * (x[1] - cp[1]))).exp() * w * len
            }).sum();
            prop_assert!((got - want).norm() <= 1e-10 * want.norm().max(1e-12));
        }
    }
}
