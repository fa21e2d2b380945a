//! Truncated-SVD least-squares solve and error measurement.

use faer::complex_native::c64;
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::{assemble_matrix, FormWeights, GalerkinSystem};
use crate::field::Field;
use crate::mesh_geometry::{CartesianMesh, Cell, Rect};
use crate::quadrature::{gauss_legendre, Rule1D, Rule2D};
use crate::wave_basis::{AnchoredEpw, DiscreteSpace, PiecewiseEpwMode};
use crate::{Point, Result, TrefftzError};

/// Relative singular value threshold used unless a run overrides it.
pub const DEFAULT_EPSILON: f64 = 1e-14;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub coefficients: DVector<Complex64>,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rank_kept: usize,
    pub residual_norm: f64,
    pub epsilon: f64,
    pub warning: Option<String>,
}

/// `xi = V Sigma_eps^+ U^* F`, dropping every singular value below `epsilon * sigma_1`.
pub fn regularized_solve(system: &GalerkinSystem, epsilon: f64) -> Result<SolveReport> {
    truncated_lstsq(&system.matrix, &system.rhs, epsilon)
}

pub fn truncated_lstsq(a: &DMatrix<Complex64>, f: &DVector<Complex64>, epsilon: f64) -> Result<SolveReport> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(TrefftzError::InvalidInput(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    if a.nrows() != f.len() {
        return Err(TrefftzError::InvalidInput("matrix and right-hand side sizes differ".into()));
    }
    let cols = a.ncols();
    if a.nrows() == 0 || cols == 0 {
        return Err(TrefftzError::InvalidInput("empty system".into()));
    }
    let rows = a.nrows();
    let to_faer = |z: Complex64| c64::new(z.re, z.im);
    let fa = Mat::<c64>::from_fn(rows, cols, |i, j| to_faer(a[(i, j)]));
    let fb = Mat::<c64>::from_fn(rows, 1, |i, _| to_faer(f[i]));
    if !(fa.is_all_finite() && fb.is_all_finite()) {
        return Err(TrefftzError::Numeric("non-finite entries in the system".into()));
    }
    // faer splits work by thread count; sequential keeps results independent of it
    faer::set_global_parallelism(faer::Parallelism::None);
    let svd = fa.thin_svd();
    let sigma: Vec<f64> = (0..svd.s_diagonal().nrows()).map(|k| svd.s_diagonal().read(k).re).collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    if !sigma_max.is_finite() {
        return Err(TrefftzError::Numeric("non-finite singular values".into()));
    }
    let cut = epsilon * sigma_max;
    let utf = svd.u().adjoint() * &fb;
    let v = svd.v();
    let mut xi = DVector::<Complex64>::zeros(cols);
    let mut rank = 0;
    let mut sigma_min = f64::INFINITY;
    for (k, &s) in sigma.iter().enumerate() {
        if sigma_max > 0.0 && s >= cut {
            rank += 1;
            sigma_min = sigma_min.min(s);
            let c = utf.read(k, 0) * c64::new(1.0 / s, 0.0);
            for j in 0..cols {
                let w = v.read(j, k) * c;
                xi[j] += Complex64::new(w.re, w.im);
            }
        }
    }
    let warning = (rank == 0).then(|| "every singular value was truncated; returning the zero solution".to_string());
    let residual_norm = (a * &xi - f).norm();
    Ok(SolveReport {
        coefficients: xi,
        sigma_max,
        sigma_min: if rank == 0 { 0.0 } else { sigma_min },
        rank_kept: rank,
        residual_norm,
        epsilon,
        warning,
    })
}

/// Discrete solution for the coefficient vector `xi`.
pub fn build_solution(space: &DiscreteSpace, mesh: &CartesianMesh, xi: &[Complex64]) -> Result<PiecewiseEpwMode> {
    if xi.len() != space.dim() {
        return Err(TrefftzError::InvalidInput(format!(
            "coefficient vector has length {} but the space has {} functions",
            xi.len(),
            space.dim()
        )));
    }
    Ok(space.combine(mesh, xi))
}

/// H1_kappa-orthogonal projection of `u` onto `space`: Gram matrix in closed
/// form, load vector by cellwise quadrature, truncated SVD solve.
pub fn h1_projection(space: &DiscreteSpace, mesh: &CartesianMesh, u: &dyn Field, epsilon: f64) -> Result<SolveReport> {
    let kappa = space.kappa;
    let gram = assemble_matrix(mesh, space, space, FormWeights::h1_kappa(kappa));
    let (osc, decay) = u.rates();
    let basis_decay = space.functions.iter().map(|f| f.mode.max_decay()).fold(0.0, f64::max);
    let singular = u.singular_points();
    let k2 = 1.0 / (kappa * kappa);
    let per_cell: Vec<Vec<(usize, Complex64)>> = mesh
        .cells
        .par_iter()
        .enumerate()
        .map(|(c, cell)| {
            let rule = cell_rule(cell, 2.0 * osc.max(kappa), decay + basis_decay, &singular);
            let samples: Vec<(Complex64, [Complex64; 2])> = rule.points.iter().map(|p| (u.value(*p), u.gradient(*p))).collect();
            space.by_cell[c]
                .iter()
                .map(|&(f, k)| {
                    let terms = &space.functions[f].mode.pieces[k].terms;
                    let s: Complex64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .zip(&samples)
                        .map(|((p, &w), (uv, ug))| {
                            let (mut v, mut g) = (ZERO, [ZERO; 2]);
                            for t in terms {
                                v += t.value(*p);
                                let tg = t.gradient(*p);
                                g[0] += tg[0];
                                g[1] += tg[1];
                            }
                            (uv * v.conj() + k2 * (ug[0] * g[0].conj() + ug[1] * g[1].conj())) * w
                        })
                        .sum();
                    (f, s)
                })
                .collect()
        })
        .collect();
    let mut rhs = DVector::<Complex64>::zeros(space.dim());
    for list in per_cell {
        for (f, s) in list {
            rhs[f] += s;
        }
    }
    if rhs.iter().any(|z| !z.is_finite()) {
        return Err(TrefftzError::Numeric("non-finite projection load vector".into()));
    }
    truncated_lstsq(&gram, &rhs, epsilon)
}

/// Which norms to compute; skipped norms come back as NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRequest {
    pub l2: bool,
    pub h1k: bool,
    pub linf: bool,
    /// Sampling density for the maximum norm.
    pub points_per_wavelength: f64,
    /// Upper bound on the number of sample points.
    pub max_samples: usize,
}

impl Default for NormRequest {
    fn default() -> Self {
        NormRequest {
            l2: true,
            h1k: true,
            linf: true,
            points_per_wavelength: 40.0,
            max_samples: 400_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub rel_l2: f64,
    pub rel_h1k: f64,
    pub abs_linf: f64,
    pub exact_l2: f64,
    pub exact_h1k: f64,
    pub coeff_norm: f64,
    pub dofs: usize,
}

impl ErrorSummary {
    pub fn with_coefficients(mut self, xi: &[Complex64]) -> Self {
        self.coeff_norm = xi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        self.dofs = xi.len();
        self
    }
}

/// Rule on `[a, b]`, split at `s` when it lies inside and graded toward it.
fn split_rule(a: f64, b: f64, s: &[f64], osc: f64, decay: f64) -> Rule1D {
    let tol = 1e-12 * (b - a);
    let mut cuts: Vec<f64> = s.iter().copied().filter(|&x| x > a + tol && x < b - tol).collect();
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.dedup();
    let near = |x: f64| s.iter().any(|&y| (x - y).abs() <= tol);
    let mut knots = vec![a];
    knots.extend(cuts);
    knots.push(b);
    let mut r = Rule1D::default();
    for w in knots.windows(2) {
        let part = Rule1D::graded(w[0], w[1], osc, decay, [near(w[0]), near(w[1])]);
        r.x.extend(part.x);
        r.w.extend(part.w);
    }
    r
}

/// Number of geometric layers toward an isolated singular corner.
const CORNER_LAYERS: usize = 40;

/// Tensor blocks covering `r`. The rectangle is cut through every singular point;
/// a piece with one singular corner is covered by boxes shrinking toward it by
/// halves, so the point count grows with the depth and not with its square.
fn tensor_blocks(r: &Rect, singular: &[Point], osc: f64, decay: f64) -> Vec<(Rule1D, Rule1D)> {
    let tol = 1e-12 * r.width().max(r.height());
    let inside: Vec<Point> = singular.iter().copied().filter(|p| r.contains(*p, tol)).collect();
    let knots = |a: f64, b: f64, s: Vec<f64>| {
        let mut k = vec![a];
        k.extend(s.into_iter().filter(|&x| x > a + tol && x < b - tol));
        k.push(b);
        k.sort_by(|p, q| p.partial_cmp(q).unwrap());
        k.dedup_by(|p, q| (*p - *q).abs() <= tol);
        k
    };
    let kx = knots(r.x0, r.x1, inside.iter().map(|p| p[0]).collect());
    let ky = knots(r.y0, r.y1, inside.iter().map(|p| p[1]).collect());
    let plain = |a: f64, b: f64| Rule1D::graded(a, b, osc, decay, [false, false]);
    let mut blocks = Vec::new();
    for wx in kx.windows(2) {
        for wy in ky.windows(2) {
            let corners = [[wx[0], wy[0]], [wx[1], wy[0]], [wx[0], wy[1]], [wx[1], wy[1]]];
            let hit: Vec<usize> = (0..4)
                .filter(|&c| inside.iter().any(|p| (p[0] - corners[c][0]).abs() <= tol && (p[1] - corners[c][1]).abs() <= tol))
                .collect();
            match hit.as_slice() {
                [] => blocks.push((plain(wx[0], wx[1]), plain(wy[0], wy[1]))),
                [c] => {
                    // coordinates measured from the singular corner
                    let [sx, sy] = corners[*c];
                    let (dx, dy) = (wx[1] - wx[0], wy[1] - wy[0]);
                    let (ex, ey) = (if sx == wx[0] { 1.0 } else { -1.0 }, if sy == wy[0] { 1.0 } else { -1.0 });
                    let span = |s: f64, e: f64, t0: f64, t1: f64| {
                        let (a, b) = (s + e * t0, s + e * t1);
                        if a < b { (a, b) } else { (b, a) }
                    };
                    let mut f = 1.0;
                    for layer in 0..=CORNER_LAYERS {
                        let g = 0.5 * f;
                        let (ox, ix) = (span(sx, ex, 0.0, f * dx), span(sx, ex, g * dx, f * dx));
                        let (oy, iy) = (span(sy, ey, 0.0, f * dy), span(sy, ey, g * dy, f * dy));
                        if layer == CORNER_LAYERS {
                            blocks.push((plain(ox.0, ox.1), plain(oy.0, oy.1)));
                            break;
                        }
                        let (lx, ly) = (span(sx, ex, 0.0, g * dx), span(sy, ey, 0.0, g * dy));
                        blocks.push((plain(ix.0, ix.1), plain(ly.0, ly.1)));
                        blocks.push((plain(lx.0, lx.1), plain(iy.0, iy.1)));
                        blocks.push((plain(ix.0, ix.1), plain(iy.0, iy.1)));
                        f = g;
                    }
                }
                _ => {
                    let sx: Vec<f64> = hit.iter().map(|&c| corners[c][0]).collect();
                    let sy: Vec<f64> = hit.iter().map(|&c| corners[c][1]).collect();
                    blocks.push((split_rule(wx[0], wx[1], &sx, osc, decay), split_rule(wy[0], wy[1], &sy, osc, decay)));
                }
            }
        }
    }
    blocks
}

/// Duffy rule on the triangle (a, b, c) with the collapsed vertex at `a`;
/// the radial rule is graded toward `a` when it is singular.
fn push_triangle(rule: &mut Rule2D, a: Point, b: Point, c: Point, osc: f64, decay: f64, singular_apex: bool, depth: usize) {
    let jac = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if jac == 0.0 {
        return;
    }
    let diam = [(a, b), (b, c), (c, a)]
        .iter()
        .map(|(p, q)| (q[0] - p[0]).hypot(q[1] - p[1]))
        .fold(0.0, f64::max);
    if decay * diam > 24.0 && depth < 4 {
        let mid = |p: Point, q: Point| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        push_triangle(rule, a, ab, ca, osc, decay, singular_apex, depth + 1);
        push_triangle(rule, ab, b, bc, osc, decay, false, depth + 1);
        push_triangle(rule, ca, bc, c, osc, decay, false, depth + 1);
        push_triangle(rule, bc, ca, ab, osc, decay, false, depth + 1);
        return;
    }
    let radial = Rule1D::graded(0.0, 1.0, osc * diam, decay * diam, [singular_apex, false]);
    let n = 12 + (osc * diam / 2.0).ceil() as usize + (decay * diam / 4.0).min(12.0).ceil() as usize;
    let g = gauss_legendre(n);
    for (&r, &wr) in radial.x.iter().zip(&radial.w) {
        for k in 0..n {
            let t = 0.5 * (1.0 + g.0[k]);
            let wt = 0.5 * g.1[k];
            let e = [b[0] - a[0] + t * (c[0] - b[0]), b[1] - a[1] + t * (c[1] - b[1])];
            rule.points.push([a[0] + r * e[0], a[1] + r * e[1]]);
            rule.weights.push(wr * wt * r * jac);
        }
    }
}

/// Integration rule for one cell, refined toward `singular` points and exponential layers.
pub fn cell_rule(cell: &Cell, osc: f64, decay: f64, singular: &[Point]) -> Rule2D {
    let r: &Rect = &cell.rect;
    let tol = 1e-12 * r.width().max(r.height());
    let inside: Vec<Point> = singular.iter().copied().filter(|p| r.contains(*p, tol)).collect();
    if cell.full {
        let mut rule = Rule2D::default();
        for (rx, ry) in tensor_blocks(r, &inside, osc, decay) {
            let t = Rule2D::tensor(&rx, &ry);
            rule.points.extend(t.points);
            rule.weights.extend(t.weights);
        }
        return rule;
    }
    let mut rule = Rule2D::default();
    for piece in &cell.clipped.pieces {
        if piece.len() < 3 {
            continue;
        }
        // signed fan from the singular point when there is one, else from a vertex
        let (apex, skip) = match inside.first() {
            Some(&s) => (s, None),
            None => (piece[0], Some(0)),
        };
        let n = piece.len();
        for k in 0..n {
            let (i, j) = (k, (k + 1) % n);
            if skip == Some(i) || skip == Some(j) {
                continue;
            }
            push_triangle(&mut rule, apex, piece[i], piece[j], osc, decay, skip.is_none(), 0);
        }
    }
    rule
}

/// Grid points inside the domain at the resolution of `request`.
pub fn sample_grid(mesh: &CartesianMesh, kappa: f64, request: &NormRequest) -> Vec<Point> {
    let (lo, hi) = mesh.domain.bbox();
    let step0 = 2.0 * std::f64::consts::PI / (kappa * request.points_per_wavelength);
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let step = step0.max((area / request.max_samples as f64).sqrt());
    let nx = ((hi[0] - lo[0]) / step).ceil() as usize + 1;
    let ny = ((hi[1] - lo[1]) / step).ceil() as usize + 1;
    let mut pts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let p = [
                lo[0] + (hi[0] - lo[0]) * i as f64 / (nx - 1) as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / (ny - 1) as f64,
            ];
            if mesh.domain.contains(p) {
                pts.push(p);
            }
        }
    }
    pts
}

/// Relative L2 and H1_kappa errors by cellwise quadrature and the absolute
/// maximum error on a sampling grid.
pub fn error_norms(u_h: &dyn Field, u: &dyn Field, mesh: &CartesianMesh, kappa: f64, request: &NormRequest) -> ErrorSummary {
    norms_impl(u_h, None, u, mesh, kappa, request)
}

/// Same as [`error_norms`] for a discrete solution; on full cells the plane
/// waves are separable, so the quadrature grid is filled by matrix products.
pub fn discrete_error_norms(u_h: &PiecewiseEpwMode, u: &dyn Field, mesh: &CartesianMesh, kappa: f64, request: &NormRequest) -> ErrorSummary {
    norms_impl(u_h, Some(u_h), u, mesh, kappa, request)
}

/// Value and first derivatives of a plane-wave sum on the tensor grid `xs x ys`.
fn tensor_eval(terms: &[AnchoredEpw], xs: &[f64], ys: &[f64]) -> [DMatrix<Complex64>; 3] {
    let i = Complex64::new(0.0, 1.0);
    let nt = terms.len();
    let fx = DMatrix::from_fn(xs.len(), nt, |r, t| {
        let w = &terms[t];
        w.amplitude * (i * w.kappa * w.direction[0] * (xs[r] - w.anchor[0])).exp()
    });
    let fy = DMatrix::from_fn(ys.len(), nt, |r, t| {
        let w = &terms[t];
        (i * w.kappa * w.direction[1] * (ys[r] - w.anchor[1])).exp()
    });
    let kx = DMatrix::from_fn(nt, nt, |a, b| if a == b { i * terms[a].kappa * terms[a].direction[0] } else { ZERO });
    let ky = DMatrix::from_fn(nt, nt, |a, b| if a == b { i * terms[a].kappa * terms[a].direction[1] } else { ZERO });
    let fyt = fy.transpose();
    let value = &fx * &fyt;
    let dx = &fx * &kx * &fyt;
    let dy = &fx * (&ky * &fyt);
    [value, dx, dy]
}

fn norms_impl(
    u_h: &dyn Field,
    tensor: Option<&PiecewiseEpwMode>,
    u: &dyn Field,
    mesh: &CartesianMesh,
    kappa: f64,
    request: &NormRequest,
) -> ErrorSummary {
    let (o1, d1) = u_h.rates();
    let (o2, d2) = u.rates();
    let osc = 2.0 * o1.max(o2).max(kappa);
    let decay = 2.0 * d1.max(d2);
    let mut singular = u.singular_points();
    singular.extend(u_h.singular_points());
    let k2 = 1.0 / (kappa * kappa);
    let want_int = request.l2 || request.h1k;
    let accumulate = |acc: &mut [f64; 4], w: f64, vh: Complex64, gh: [Complex64; 2], p: Point| {
        let vu = u.value(p);
        acc[0] += w * (vh - vu).norm_sqr();
        acc[1] += w * vu.norm_sqr();
        if request.h1k {
            let gu = u.gradient(p);
            let ge = (gh[0] - gu[0]).norm_sqr() + (gh[1] - gu[1]).norm_sqr();
            acc[2] += w * ge * k2;
            acc[3] += w * (gu[0].norm_sqr() + gu[1].norm_sqr()) * k2;
        }
    };
    let per_cell: Vec<[f64; 4]> = if want_int {
        mesh.cells
            .par_iter()
            .map(|cell| {
                let mut acc = [0.0; 4];
                let piece = tensor.and_then(|m| m.piece_for_cell(cell.i, cell.j)).filter(|_| cell.full);
                if let Some(piece) = piece {
                    for (rx, ry) in tensor_blocks(&cell.rect, &singular, osc, decay) {
                        let [v, dx, dy] = tensor_eval(&piece.terms, &rx.x, &ry.x);
                        for (a, (&x, &wx)) in rx.x.iter().zip(&rx.w).enumerate() {
                            for (b, (&y, &wy)) in ry.x.iter().zip(&ry.w).enumerate() {
                                accumulate(&mut acc, wx * wy, v[(a, b)], [dx[(a, b)], dy[(a, b)]], [x, y]);
                            }
                        }
                    }
                } else {
                    let rule = cell_rule(cell, osc, decay, &singular);
                    for (p, &w) in rule.points.iter().zip(&rule.weights) {
                        let gh = if request.h1k { u_h.gradient(*p) } else { [ZERO; 2] };
                        accumulate(&mut acc, w, u_h.value(*p), gh, *p);
                    }
                }
                acc
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut tot = [0.0; 4];
    for a in &per_cell {
        for k in 0..4 {
            tot[k] += a[k];
        }
    }
    let nan = f64::NAN;
    let exact_l2 = tot[1].max(0.0).sqrt();
    let exact_h1k = (tot[1] + tot[3]).max(0.0).sqrt();
    let rel_l2 = if request.l2 { tot[0].max(0.0).sqrt() / exact_l2 } else { nan };
    let rel_h1k = if request.h1k {
        (tot[0] + tot[2]).max(0.0).sqrt() / exact_h1k
    } else {
        nan
    };
    let abs_linf = if request.linf {
        sample_grid(mesh, kappa, request)
            .par_iter()
            .map(|p| (u_h.value(*p) - u.value(*p)).norm())
            .filter(|v| v.is_finite())
            .reduce(|| 0.0, f64::max)
    } else {
        nan
    };
    ErrorSummary {
        rel_l2,
        rel_h1k,
        abs_linf,
        exact_l2: if want_int { exact_l2 } else { nan },
        exact_h1k: if request.h1k { exact_h1k } else { nan },
        coeff_norm: nan,
        dofs: 0,
    }
}
