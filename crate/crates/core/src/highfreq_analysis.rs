//! Resonance-free wavenumbers for the node family and the quadratic growth of
//! the stability functional along them.
//!
//! For `rho^2 = p/q` the radii `r^2 = ((2n-1) pi/2)^2 + (m pi rho)^2` are sorted
//! and the midpoints `t_j` of consecutive radii serve as values of `kappa h`.
//! Along this sequence `D(rho, t_j) <= C(q) t_j^2`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::mesh_geometry::{growth_functional, node_family_distances};
use crate::{Result, TrefftzError};

/// Relative tolerance under which two radii count as one.
pub const DISTINCT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Radius {
    pub r: f64,
    /// Index pair realising `r`; the smallest one when several coincide.
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeRadii {
    pub p: u64,
    pub q: u64,
    pub rho: f64,
    pub radii: Vec<Radius>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn check_ratio(p: u64, q: u64) -> Result<f64> {
    if p == 0 || q == 0 || gcd(p, q) != 1 || p < q {
        return Err(TrefftzError::InvalidInput(format!(
            "rho^2 = {p}/{q} must be a reduced fraction with p >= q >= 1"
        )));
    }
    Ok((p as f64 / q as f64).sqrt())
}

/// All distinct radii up to `bound`, sorted.
fn radii_below(rho: f64, bound: f64) -> Vec<Radius> {
    let n_max = (2.0 * bound / PI).ceil() as usize + 2;
    let m_max = (bound / (PI * rho)).ceil() as usize + 2;
    let mut all = Vec::new();
    for n in 1..=n_max {
        for m in 0..=m_max {
            let r = ((2 * n - 1) as f64 * PI / 2.0).hypot(m as f64 * PI * rho);
            if r <= bound {
                all.push(Radius { r, n, m });
            }
        }
    }
    all.sort_by(|a, b| a.r.total_cmp(&b.r).then(a.n.cmp(&b.n)).then(a.m.cmp(&b.m)));
    let mut out: Vec<Radius> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(last) if x.r - last.r <= DISTINCT_TOL * x.r => {}
            _ => out.push(x),
        }
    }
    out
}

/// The first `count` distinct lattice radii for `rho^2 = p/q`.
pub fn lattice_radii(p: u64, q: u64, count: usize) -> Result<LatticeRadii> {
    let rho = check_ratio(p, q)?;
    // grow the enumeration radius until the sorted prefix is long enough
    let mut bound = PI * (1.0 + (count as f64 * rho).sqrt());
    let radii = loop {
        let r = radii_below(rho, bound);
        if r.len() >= count {
            break r;
        }
        bound *= 1.5;
    };
    Ok(LatticeRadii {
        p,
        q,
        rho,
        radii: radii.into_iter().take(count).collect(),
    })
}

/// Midpoints `t_j = (r_j + r_{j+1}) / 2`.
pub fn resonance_free_sequence(radii: &LatticeRadii) -> Vec<f64> {
    radii.radii.windows(2).map(|w| 0.5 * (w[0].r + w[1].r)).collect()
}

/// `C(q) = 1 + 8q/pi^2 + sqrt(2 sqrt(q)/pi)`.
pub fn growth_constant(q: u64) -> f64 {
    let q = q as f64;
    1.0 + 8.0 * q / (PI * PI) + (2.0 * q.sqrt() / PI).sqrt()
}

/// `(d, d0)` at `kappa h = t` for the shape parameter `rho`.
pub fn node_distances(rho: f64, t: f64) -> (f64, f64) {
    // h1 = 1, h2 = 1/rho and kappa = t reproduce nu_n = (2n-1) pi / (2t) and the step m pi rho / t
    node_family_distances(t, 1.0, 1.0 / rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthRow {
    pub j: usize,
    pub r_j: f64,
    pub t_j: f64,
    pub d_tilde: f64,
    pub d_tilde0: f64,
    #[serde(rename = "D_tilde")]
    pub big_d_tilde: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqCheck {
    pub p: u64,
    pub q: u64,
    pub constant: f64,
    pub rows: Vec<GrowthRow>,
}

impl HighFreqCheck {
    pub fn t(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_j).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// First index `j` where the bound fails.
    pub fn first_failure(&self) -> Option<usize> {
        self.rows.iter().find(|r| !r.pass).map(|r| r.j)
    }
}

/// Evaluates `D(rho, t_j)` for `j = 1..=j_max` and compares it with `C(q) t_j^2`.
pub fn verify_growth_bound(p: u64, q: u64, j_max: usize) -> Result<HighFreqCheck> {
    if j_max == 0 {
        return Err(TrefftzError::InvalidInput("j_max must be at least 1".into()));
    }
    let radii = lattice_radii(p, q, j_max + 1)?;
    let t = resonance_free_sequence(&radii);
    let constant = growth_constant(q);
    let rows = t
        .par_iter()
        .enumerate()
        .map(|(k, &tj)| {
            let (d, d0) = node_distances(radii.rho, tj);
            let big = growth_functional(d, d0);
            let bound = constant * tj * tj;
            GrowthRow {
                j: k + 1,
                r_j: radii.radii[k].r,
                t_j: tj,
                d_tilde: d,
                d_tilde0: d0,
                big_d_tilde: big,
                bound,
                pass: big.is_finite() && big <= bound,
            }
        })
        .collect();
    Ok(HighFreqCheck { p, q, constant, rows })
}

/// Parses `p/q` or an integer `p`.
pub fn parse_ratio(s: &str) -> Result<(u64, u64)> {
    let bad = || TrefftzError::InvalidInput(format!("cannot read rho^2 = {s:?}, expected p/q"));
    let (p, q) = match s.split_once('/') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => (s.trim().parse().map_err(|_| bad())?, 1),
    };
    if q == 0 {
        return Err(bad());
    }
    let g = gcd(p, q).max(1);
    Ok((p / g, q / g))
}
