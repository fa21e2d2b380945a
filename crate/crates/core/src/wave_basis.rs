//! Single-edge Helmholtz modes, the global edge and node basis built from them,
//! and their representation as sums of anchored (evanescent) plane waves.
//!
//! On a reference cell `(0, h1) x (0, h2)` the mode with index `n` is
//! `sin(k nu x) sin(k s y) / sin(k s h2)` with `nu = n pi / (k h1)` and
//! `s = sqrt(1 - nu^2)` (principal root, so `s = i t` once `nu > 1`). Expanding
//! both sines gives four exponentials `exp(i k d . x)` with `d . d = 1`. Each one
//! is stored relative to the cell corner where it is largest, which keeps every
//! exponent non-positive and lets evanescent modes with `k t h2` in the
//! thousands be evaluated without overflow.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::field::{DerivativeOracle, Field};
use crate::mesh_geometry::{CartesianMesh, Edge, Node, Orientation, Rect};
use crate::{Point, Result, TrefftzError};

/// Relative tolerance on |sin(k s h2)| below which a mode is declared resonant.
pub const RESONANCE_TOL: f64 = 1e-10;
/// Tolerance on |nu - 1| (scaled by kappa) below which a mode is grazing.
pub const GRAZING_TOL: f64 = 1e-12;
/// Largest total derivative order accepted by [`PiecewiseEpwMode::evaluate`].
pub const MAX_DERIVATIVE: usize = 8;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ModeKind {
    Propagative,
    Evanescent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceMode {
    pub n: usize,
    pub h1_ref: f64,
    pub h2_ref: f64,
    pub kappa: f64,
    pub nu: f64,
    pub kind: ModeKind,
    /// |sqrt(1 - nu^2)|
    pub s: f64,
}

impl ReferenceMode {
    pub fn new(n: usize, h1_ref: f64, h2_ref: f64, kappa: f64) -> Result<Self> {
        if n == 0 {
            return Err(TrefftzError::InvalidInput("mode index starts at 1".into()));
        }
        if !(kappa > 0.0 && h1_ref > 0.0 && h2_ref > 0.0) {
            return Err(TrefftzError::InvalidInput(
                "kappa and cell sizes must be positive".into(),
            ));
        }
        let nu = n as f64 * PI / (kappa * h1_ref);
        if (nu - 1.0).abs() < GRAZING_TOL * kappa.max(1.0) {
            return Err(TrefftzError::Grazing { family: "reference", n });
        }
        let kind = if nu < 1.0 {
            ModeKind::Propagative
        } else {
            ModeKind::Evanescent
        };
        let s = (1.0 - nu * nu).abs().sqrt();
        if kind == ModeKind::Propagative {
            let z = kappa * s * h2_ref;
            let den = z.sin();
            if den.abs() < RESONANCE_TOL * kappa {
                return Err(TrefftzError::Resonance {
                    family: "reference",
                    n,
                    m: (z / PI).round() as usize,
                    denominator: den.abs(),
                });
            }
        }
        Ok(ReferenceMode {
            n,
            h1_ref,
            h2_ref,
            kappa,
            nu,
            kind,
            s,
        })
    }

    /// Decay rate `k t` of an evanescent mode, zero for propagative ones.
    pub fn decay(&self) -> f64 {
        match self.kind {
            ModeKind::Propagative => 0.0,
            ModeKind::Evanescent => self.kappa * self.s,
        }
    }

    /// Horizontal factor `d^dx/dx^dx sin(k nu x)`.
    pub fn x_factor(&self, x: f64, dx: usize) -> f64 {
        let w = self.kappa * self.nu;
        w.powi(dx as i32) * (w * x + dx as f64 * FRAC_PI_2).sin()
    }

    /// Vertical factor `d^dy/dy^dy [sin(k s y) / sin(k s h2)]`, real in both regimes.
    pub fn y_factor(&self, y: f64, dy: usize) -> f64 {
        let a = self.kappa * self.s;
        let h = self.h2_ref;
        match self.kind {
            ModeKind::Propagative => {
                a.powi(dy as i32) * (a * y + dy as f64 * FRAC_PI_2).sin() / (a * h).sin()
            }
            ModeKind::Evanescent => {
                // sinh(ay)/sinh(ah) and cosh(ay)/sinh(ah) in overflow-free form
                let sign = if dy % 2 == 0 { -1.0 } else { 1.0 };
                let ratio = (a * (y - h)).exp() * (1.0 + sign * (-2.0 * a * y).exp())
                    / (-(-2.0 * a * h).exp_m1());
                a.powi(dy as i32) * ratio
            }
        }
    }

    /// `d1^dx d2^dy` of the mode at a point of the reference cell.
    pub fn eval(&self, x: f64, y: f64, dx: usize, dy: usize) -> f64 {
        self.x_factor(x, dx) * self.y_factor(y, dy)
    }

    /// `|| chi_k ||^2` on (0, h2) for the vertical factor and its derivatives of parity k.
    fn y_norm2(&self, k: usize) -> f64 {
        let z = self.kappa * self.h2_ref * self.s;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let v = match self.kind {
            ModeKind::Propagative => z.cos() / (z.sin() * z) - sign / z.sin().powi(2),
            ModeKind::Evanescent => {
                // coth(z)/z - sign/sinh^2(z), the second term computed through e^{-2z}
                let e = (-2.0 * z).exp();
                let coth = (1.0 + e) / (1.0 - e);
                let inv_sinh2 = 4.0 * e / (1.0 - e).powi(2);
                coth / z - sign * inv_sinh2
            }
        };
        0.5 * self.h2_ref * v.abs()
    }

    /// Exact `||phi_n||^2` in the kappa-weighted H^M norm of the reference cell.
    pub fn norm_squared(&self, m_order: usize) -> f64 {
        let nu2 = self.nu * self.nu;
        let t2 = (1.0 - nu2).abs();
        let mut total = 0.0;
        for l in 0..=m_order {
            for j in 0..=l {
                let w = nu2.powi(j as i32) * t2.powi((l - j) as i32);
                total += w * 0.5 * self.h1_ref * self.y_norm2(l - j);
            }
        }
        total
    }

    /// Upper bound on `||phi_n||^2_{H^M}` from the orthogonality lemma.
    pub fn norm_bound(&self, m_order: usize) -> f64 {
        let mp1 = (m_order + 1) as f64;
        match self.kind {
            ModeKind::Propagative => {
                let d = crate::mesh_geometry::edge_family_distance(self.kappa, self.h1_ref, self.h2_ref);
                self.h1_ref * PI * PI * mp1 * mp1 / (8.0 * self.kappa.powi(2) * self.h2_ref * d * d)
            }
            ModeKind::Evanescent => {
                self.h1_ref * mp1 * mp1 * self.nu.powi(2 * m_order as i32)
                    / (2.0 * self.kappa * (self.kappa * self.h2_ref).tanh() * self.s)
            }
        }
    }
}

/// `d1^dx d2^dy phi_n(x, y)` as a complex number.
pub fn reference_mode_eval(mode: &ReferenceMode, x: f64, y: f64, dx: usize, dy: usize) -> Complex64 {
    Complex64::new(mode.eval(x, y, dx, dy), 0.0)
}

/// Exact squared H^M norm together with the lemma bound.
pub fn reference_mode_norm(mode: &ReferenceMode, m_order: usize) -> (f64, f64) {
    (mode.norm_squared(m_order), mode.norm_bound(m_order))
}

/// `amplitude * exp(i kappa d . (x - anchor))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchoredEpw {
    pub direction: [Complex64; 2],
    pub amplitude: Complex64,
    pub anchor: Point,
    pub kappa: f64,
}

impl AnchoredEpw {
    pub fn exponent(&self, p: Point) -> Complex64 {
        I * self.kappa
            * (self.direction[0] * (p[0] - self.anchor[0]) + self.direction[1] * (p[1] - self.anchor[1]))
    }

    pub fn value(&self, p: Point) -> Complex64 {
        self.amplitude * self.exponent(p).exp()
    }

    /// `d1^a d2^b` of the wave.
    pub fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64 {
        let f1 = I * self.kappa * self.direction[0];
        let f2 = I * self.kappa * self.direction[1];
        f1.powu(a as u32) * f2.powu(b as u32) * self.value(p)
    }

    pub fn gradient(&self, p: Point) -> [Complex64; 2] {
        let v = self.value(p);
        [I * self.kappa * self.direction[0] * v, I * self.kappa * self.direction[1] * v]
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        AnchoredEpw {
            amplitude: self.amplitude * c,
            ..*self
        }
    }

    /// |d . d - 1|
    pub fn direction_defect(&self) -> f64 {
        (self.direction[0] * self.direction[0] + self.direction[1] * self.direction[1] - 1.0).norm()
    }
}

/// Rigid map `X = e1 . (x - o)`, `Y = e2 . (x - o)` onto reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Point,
    pub e1: Point,
    pub e2: Point,
}

impl LocalFrame {
    pub fn local(&self, p: Point) -> (f64, f64) {
        let v = [p[0] - self.origin[0], p[1] - self.origin[1]];
        (
            self.e1[0] * v[0] + self.e1[1] * v[1],
            self.e2[0] * v[0] + self.e2[1] * v[1],
        )
    }
}

/// Corner of `rect` where `|exp(i kappa d . x)|` is largest.
pub fn dominant_corner(direction: [Complex64; 2], rect: &Rect) -> Point {
    let x = if direction[0].im > 0.0 { rect.x0 } else { rect.x1 };
    let y = if direction[1].im > 0.0 { rect.y0 } else { rect.y1 };
    [x, y]
}

/// The four anchored plane waves whose sum equals the mode on `rect`.
pub fn epw_decompose(mode: &ReferenceMode, frame: &LocalFrame, rect: &Rect) -> [AnchoredEpw; 4] {
    let kappa = mode.kappa;
    let h = mode.h2_ref;
    let s: Complex64 = match mode.kind {
        ModeKind::Propagative => Complex64::new(mode.s, 0.0),
        ModeKind::Evanescent => Complex64::new(0.0, mode.s),
    };
    // sin(a)sin(b) = -1/4 sum s1 s2 e^{i(s1 a + s2 b)}; 1/(4D) written so that
    // nothing overflows: D = i sinh(k t h) for evanescent modes.
    let (pref, shift) = match mode.kind {
        ModeKind::Propagative => (Complex64::new(-0.25 / (kappa * mode.s * h).sin(), 0.0), 0.0),
        ModeKind::Evanescent => {
            let a = kappa * mode.s;
            (-1.0 / (2.0 * I * (-(-2.0 * a * h).exp_m1())), -a * h)
        }
    };
    let mut out = [AnchoredEpw {
        direction: [Complex64::new(0.0, 0.0); 2],
        amplitude: Complex64::new(0.0, 0.0),
        anchor: [0.0, 0.0],
        kappa,
    }; 4];
    let mut k = 0;
    for s1 in [1.0, -1.0] {
        for s2 in [1.0, -1.0] {
            let dl = [Complex64::new(s1 * mode.nu, 0.0), s2 * s];
            let d = [
                dl[0] * frame.e1[0] + dl[1] * frame.e2[0],
                dl[0] * frame.e1[1] + dl[1] * frame.e2[1],
            ];
            let anchor = dominant_corner(d, rect);
            let shift_to_anchor =
                I * kappa * (d[0] * (anchor[0] - frame.origin[0]) + d[1] * (anchor[1] - frame.origin[1]));
            out[k] = AnchoredEpw {
                direction: d,
                amplitude: pref * s1 * s2 * (shift_to_anchor + shift).exp(),
                anchor,
                kappa,
            };
            k += 1;
        }
    }
    out
}

/// Expansion of a function on one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPiece {
    pub cell: usize,
    pub i: i64,
    pub j: i64,
    pub rect: Rect,
    pub terms: Vec<AnchoredEpw>,
}

impl CellPiece {
    pub fn value(&self, p: Point) -> Complex64 {
        self.terms.iter().map(|t| t.value(p)).sum()
    }
}

/// Function given cellwise by sums of anchored plane waves and zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseEpwMode {
    pub kappa: f64,
    pub pieces: Vec<CellPiece>,
    index: HashMap<(i64, i64), usize>,
    origin: Point,
    h: [f64; 2],
}

impl PiecewiseEpwMode {
    pub fn new(kappa: f64, origin: Point, h1: f64, h2: f64, pieces: Vec<CellPiece>) -> Self {
        let index = pieces.iter().enumerate().map(|(k, p)| ((p.i, p.j), k)).collect();
        PiecewiseEpwMode {
            kappa,
            pieces,
            index,
            origin,
            h: [h1, h2],
        }
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.pieces.iter().map(|p| p.cell)
    }

    pub fn piece_for_cell(&self, cell_i: i64, cell_j: i64) -> Option<&CellPiece> {
        self.index.get(&(cell_i, cell_j)).map(|&k| &self.pieces[k])
    }

    /// Piece whose closed cell contains `p`.
    pub fn locate(&self, p: Point) -> Option<&CellPiece> {
        crate::mesh_geometry::grid_candidates(self.origin, self.h[0], self.h[1], p)
            .into_iter()
            .find_map(|(i, j)| self.piece_for_cell(i, j))
    }

    /// `d1^a d2^b f(p)` with `a + b <= 8`; zero outside the support.
    pub fn evaluate(&self, p: Point, alpha: [usize; 2]) -> Complex64 {
        assert!(
            alpha[0] + alpha[1] <= MAX_DERIVATIVE,
            "derivative order above {MAX_DERIVATIVE}"
        );
        match self.locate(p) {
            Some(piece) => piece.terms.iter().map(|t| t.derivative(p, alpha[0], alpha[1])).sum(),
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Evaluates with the expansion of a given cell, for one-sided limits.
    pub fn evaluate_on(&self, cell_i: i64, cell_j: i64, p: Point, alpha: [usize; 2]) -> Complex64 {
        self.piece_for_cell(cell_i, cell_j)
            .map(|piece| piece.terms.iter().map(|t| t.derivative(p, alpha[0], alpha[1])).sum())
            .unwrap_or_default()
    }

    pub fn max_decay(&self) -> f64 {
        self.pieces
            .iter()
            .flat_map(|p| p.terms.iter())
            .map(|t| self.kappa * t.direction[0].im.abs().max(t.direction[1].im.abs()))
            .fold(0.0, f64::max)
    }
}

impl Field for PiecewiseEpwMode {
    fn value(&self, p: Point) -> Complex64 {
        self.evaluate(p, [0, 0])
    }

    fn gradient(&self, p: Point) -> [Complex64; 2] {
        match self.locate(p) {
            Some(piece) => piece.terms.iter().fold([Complex64::default(); 2], |acc, t| {
                let g = t.gradient(p);
                [acc[0] + g[0], acc[1] + g[1]]
            }),
            None => [Complex64::default(); 2],
        }
    }

    fn rates(&self) -> (f64, f64) {
        (self.kappa * (1.0 + self.max_decay() / self.kappa.max(1e-300)), self.max_decay())
    }
}

impl DerivativeOracle for PiecewiseEpwMode {
    fn derivative(&self, p: Point, a: usize, b: usize) -> Complex64 {
        self.evaluate(p, [a, b])
    }
}

fn piece(mesh: &CartesianMesh, cell: usize, mode: &ReferenceMode, frame: &LocalFrame) -> CellPiece {
    let c = &mesh.cells[cell];
    CellPiece {
        cell,
        i: c.i,
        j: c.j,
        rect: c.rect,
        terms: epw_decompose(mode, frame, &c.rect).to_vec(),
    }
}

fn edge_reference(edge: &Edge, n: usize, mesh: &CartesianMesh, kappa: f64) -> Result<ReferenceMode> {
    let (a, b) = match edge.orientation {
        Orientation::Horizontal => (mesh.h1, mesh.h2),
        Orientation::Vertical => (mesh.h2, mesh.h1),
    };
    let family = match edge.orientation {
        Orientation::Horizontal => "horizontal edge",
        Orientation::Vertical => "vertical edge",
    };
    ReferenceMode::new(n, a, b, kappa).map_err(|e| e.with_family(family))
}

/// Edge basis function with index `n` on the two cells sharing `edge`.
pub fn edge_basis(edge: &Edge, n: usize, mesh: &CartesianMesh, kappa: f64) -> Result<PiecewiseEpwMode> {
    let mode = edge_reference(edge, n, mesh, kappa)?;
    Ok(edge_basis_with(edge, &mode, mesh))
}

fn edge_frames(edge: &Edge, mesh: &CartesianMesh) -> [LocalFrame; 2] {
    let [xs, ys] = edge.anchor;
    match edge.orientation {
        Orientation::Horizontal => [
            LocalFrame {
                origin: [xs, ys + mesh.h2],
                e1: [1.0, 0.0],
                e2: [0.0, -1.0],
            },
            LocalFrame {
                origin: [xs, ys - mesh.h2],
                e1: [1.0, 0.0],
                e2: [0.0, 1.0],
            },
        ],
        Orientation::Vertical => [
            LocalFrame {
                origin: [xs + mesh.h1, ys],
                e1: [0.0, 1.0],
                e2: [-1.0, 0.0],
            },
            LocalFrame {
                origin: [xs - mesh.h1, ys],
                e1: [0.0, 1.0],
                e2: [1.0, 0.0],
            },
        ],
    }
}

fn edge_basis_with(edge: &Edge, mode: &ReferenceMode, mesh: &CartesianMesh) -> PiecewiseEpwMode {
    let frames = edge_frames(edge, mesh);
    let pieces = [edge.plus, edge.minus]
        .iter()
        .zip(frames.iter())
        .filter_map(|(c, f)| c.map(|c| piece(mesh, c, mode, f)))
        .collect();
    PiecewiseEpwMode::new(mode.kappa, mesh.origin, mesh.h1, mesh.h2, pieces)
}

/// Node basis function: the odd mode `2m - 1` on the doubled cells above and below `node`.
pub fn node_basis(node: &Node, m: usize, mesh: &CartesianMesh, kappa: f64) -> Result<PiecewiseEpwMode> {
    let mode = node_reference(m, mesh, kappa)?;
    Ok(node_basis_with(node, &mode, mesh))
}

fn node_reference(m: usize, mesh: &CartesianMesh, kappa: f64) -> Result<ReferenceMode> {
    if m == 0 {
        return Err(TrefftzError::InvalidInput("node mode index starts at 1".into()));
    }
    ReferenceMode::new(2 * m - 1, 2.0 * mesh.h1, mesh.h2, kappa).map_err(|e| e.with_family("node"))
}

fn node_basis_with(node: &Node, mode: &ReferenceMode, mesh: &CartesianMesh) -> PiecewiseEpwMode {
    let [xp, yp] = node.coords;
    let upper = LocalFrame {
        origin: [xp - mesh.h1, yp + mesh.h2],
        e1: [1.0, 0.0],
        e2: [0.0, -1.0],
    };
    let lower = LocalFrame {
        origin: [xp - mesh.h1, yp - mesh.h2],
        e1: [1.0, 0.0],
        e2: [0.0, 1.0],
    };
    let pieces = node
        .upper
        .iter()
        .map(|c| (c, &upper))
        .chain(node.lower.iter().map(|c| (c, &lower)))
        .filter_map(|(c, f)| c.map(|c| piece(mesh, c, mode, f)))
        .collect();
    PiecewiseEpwMode::new(mode.kappa, mesh.origin, mesh.h1, mesh.h2, pieces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisLabel {
    Edge { edge: usize, n: usize },
    Node { node: usize, m: usize },
}

#[derive(Debug, Clone)]
pub struct BasisFunction {
    pub label: BasisLabel,
    pub mode: PiecewiseEpwMode,
}

/// The space spanned by `ne` modes per edge and `nn` modes per node.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    pub kappa: f64,
    pub ne: usize,
    pub nn: usize,
    pub functions: Vec<BasisFunction>,
    /// For every cell, the (function, piece) pairs supported on it.
    pub by_cell: Vec<Vec<(usize, usize)>>,
}

impl DiscreteSpace {
    /// Edge functions first (edge-major, then n), then node functions.
    pub fn new(mesh: &CartesianMesh, kappa: f64, ne: usize, nn: usize) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(TrefftzError::InvalidInput("kappa must be positive".into()));
        }
        let mut h_modes = Vec::with_capacity(ne);
        let mut v_modes = Vec::with_capacity(ne);
        let has = |o: Orientation| mesh.edges.iter().any(|e| e.orientation == o);
        for n in 1..=ne {
            if has(Orientation::Horizontal) {
                h_modes.push(ReferenceMode::new(n, mesh.h1, mesh.h2, kappa).map_err(|e| e.with_family("horizontal edge"))?);
            }
            if has(Orientation::Vertical) {
                v_modes.push(ReferenceMode::new(n, mesh.h2, mesh.h1, kappa).map_err(|e| e.with_family("vertical edge"))?);
            }
        }
        let node_modes = (1..=nn)
            .map(|m| node_reference(m, mesh, kappa))
            .collect::<Result<Vec<_>>>()?;

        let mut labels = Vec::with_capacity(mesh.edges.len() * ne + mesh.nodes.len() * nn);
        for e in 0..mesh.edges.len() {
            for n in 1..=ne {
                labels.push(BasisLabel::Edge { edge: e, n });
            }
        }
        for p in 0..mesh.nodes.len() {
            for m in 1..=nn {
                labels.push(BasisLabel::Node { node: p, m });
            }
        }
        let functions: Vec<BasisFunction> = labels
            .par_iter()
            .map(|&label| {
                let mode = match label {
                    BasisLabel::Edge { edge, n } => {
                        let e = &mesh.edges[edge];
                        let rm = match e.orientation {
                            Orientation::Horizontal => &h_modes[n - 1],
                            Orientation::Vertical => &v_modes[n - 1],
                        };
                        edge_basis_with(e, rm, mesh)
                    }
                    BasisLabel::Node { node, m } => node_basis_with(&mesh.nodes[node], &node_modes[m - 1], mesh),
                };
                BasisFunction { label, mode }
            })
            .collect();
        let mut by_cell = vec![Vec::new(); mesh.cells.len()];
        for (f, bf) in functions.iter().enumerate() {
            for (k, p) in bf.mode.pieces.iter().enumerate() {
                by_cell[p.cell].push((f, k));
            }
        }
        Ok(DiscreteSpace {
            kappa,
            ne,
            nn,
            functions,
            by_cell,
        })
    }

    pub fn dim(&self) -> usize {
        self.functions.len()
    }

    pub fn edge_dofs(&self) -> usize {
        self.functions
            .iter()
            .filter(|f| matches!(f.label, BasisLabel::Edge { .. }))
            .count()
    }

    /// `sum_k xi_k f_k` merged into one piecewise expansion.
    pub fn combine(&self, mesh: &CartesianMesh, xi: &[Complex64]) -> PiecewiseEpwMode {
        assert_eq!(xi.len(), self.dim(), "coefficient vector length");
        let mut pieces: Vec<CellPiece> = Vec::new();
        for (c, list) in self.by_cell.iter().enumerate() {
            // waves sharing direction and anchor are merged into one term
            let mut terms: Vec<AnchoredEpw> = Vec::new();
            let mut slot: HashMap<[u64; 6], usize> = HashMap::new();
            for &(f, k) in list {
                let coef = xi[f];
                if coef == Complex64::default() {
                    continue;
                }
                for t in &self.functions[f].mode.pieces[k].terms {
                    let key = [
                        t.direction[0].re.to_bits(),
                        t.direction[0].im.to_bits(),
                        t.direction[1].re.to_bits(),
                        t.direction[1].im.to_bits(),
                        t.anchor[0].to_bits(),
                        t.anchor[1].to_bits(),
                    ];
                    let scaled = t.scaled(coef);
                    match slot.get(&key) {
                        Some(&idx) => terms[idx].amplitude += scaled.amplitude,
                        None => {
                            slot.insert(key, terms.len());
                            terms.push(scaled);
                        }
                    }
                }
            }
            if !terms.is_empty() {
                let cell = &mesh.cells[c];
                pieces.push(CellPiece {
                    cell: c,
                    i: cell.i,
                    j: cell.j,
                    rect: cell.rect,
                    terms,
                });
            }
        }
        PiecewiseEpwMode::new(self.kappa, mesh.origin, mesh.h1, mesh.h2, pieces)
    }
}
