//! Cartesian cut-cell meshes over polygonal domains, skeleton enumeration and
//! resonance diagnostics for the edge and node mode families.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Point, Result, TrefftzError};

/// Relative area below which a clipped cell is dropped.
pub const CELL_RETENTION: f64 = 1e-12;

/// Simple polygon, optionally with polygonal holes.
///
/// The outer ring is counterclockwise. Holes are stored clockwise so that the
/// domain always lies to the left of every boundary segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPolygon {
    pub vertices: Vec<Point>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<Point>>,
}

/// Grid placement used by a built-in domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshSpec {
    pub origin: Point,
    pub h1: f64,
    pub h2: f64,
}

pub const BUILTIN_DOMAINS: [&str; 4] = ["unit_square", "rect_1x1_centered", "star5", "invader56"];

// Rows from top (y in [7,8]) to bottom; '#' marks a unit cell.
const INVADER_ROWS: [&str; 8] = [
    "#.#...#.#",
    "####.####",
    ".#######.",
    "##.###.##",
    "#########",
    "#########",
    "#########",
    "..#.#.#..",
];

pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut a = 0.0;
    for k in 0..n {
        let p = ring[k];
        let q = ring[(k + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Point, b: Point, c: Point, d: f64| {
        d == 0.0
            && c[0] >= a[0].min(b[0])
            && c[0] <= a[0].max(b[0])
            && c[1] >= a[1].min(b[1])
            && c[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

impl DomainPolygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        Self::with_holes(vertices, Vec::new())
    }

    pub fn with_holes(vertices: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self> {
        let holes = holes
            .into_iter()
            .map(|mut h| {
                if signed_area(&h) > 0.0 {
                    h.reverse();
                }
                h
            })
            .collect();
        let d = DomainPolygon { vertices, holes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(TrefftzError::InvalidDomain("fewer than 3 vertices".into()));
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(TrefftzError::InvalidDomain("non-finite vertex".into()));
        }
        if signed_area(&self.vertices) <= 0.0 {
            return Err(TrefftzError::InvalidDomain(
                "outer ring must be counterclockwise with positive area".into(),
            ));
        }
        let segs: Vec<(usize, usize, Point, Point)> = self
            .rings()
            .enumerate()
            .flat_map(|(r, ring)| {
                let n = ring.len();
                (0..n).map(move |k| (r, k, ring[k], ring[(k + 1) % n]))
            })
            .collect();
        let ring_len: Vec<usize> = self.rings().map(|r| r.len()).collect();
        for a in 0..segs.len() {
            for b in a + 1..segs.len() {
                let (ra, ka, p1, p2) = segs[a];
                let (rb, kb, q1, q2) = segs[b];
                if ra == rb {
                    let n = ring_len[ra];
                    if kb == ka + 1 || (ka == 0 && kb == n - 1) {
                        continue;
                    }
                }
                if segments_intersect(p1, p2, q1, q2) {
                    return Err(TrefftzError::InvalidDomain(format!(
                        "boundary segments {a} and {b} intersect"
                    )));
                }
            }
        }
        for h in &self.holes {
            if h.len() < 3 || signed_area(h) >= 0.0 {
                return Err(TrefftzError::InvalidDomain("degenerate hole".into()));
            }
            if !point_in_ring(h[0], &self.vertices) {
                return Err(TrefftzError::InvalidDomain("hole outside the outer ring".into()));
            }
        }
        Ok(())
    }

    /// Outer ring followed by the holes.
    pub fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.vertices.as_slice()).chain(self.holes.iter().map(|h| h.as_slice()))
    }

    pub fn area(&self) -> f64 {
        self.rings().map(signed_area).sum()
    }

    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.vertices {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        (lo, hi)
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_ring(p, &self.vertices) && !self.holes.iter().any(|h| point_in_ring(p, h))
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.vertices {
            for b in &self.vertices {
                d = d.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        d
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: DomainPolygon =
            serde_json::from_str(text).map_err(|e| TrefftzError::InvalidDomain(e.to_string()))?;
        Self::with_holes(raw.vertices, raw.holes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrefftzError::InvalidDomain(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        DomainPolygon {
            vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            holes: Vec::new(),
        }
    }

    /// Regular pentagram with outer radius 1, inner radius 1/phi^2, tip pointing up.
    pub fn star5() -> Self {
        let phi = 0.5 * (1.0 + 5f64.sqrt());
        let inner = 1.0 / (phi * phi);
        let mut v = Vec::with_capacity(10);
        for k in 0..10 {
            let ang = PI / 2.0 + k as f64 * PI / 5.0;
            let r = if k % 2 == 0 { 1.0 } else { inner };
            v.push([r * ang.cos(), r * ang.sin()]);
        }
        DomainPolygon {
            vertices: v,
            holes: Vec::new(),
        }
    }

    /// Union of grid cells `(i, j)` of size `h1 x h2` anchored at `origin`.
    pub fn from_cells(cells: &[(i64, i64)], origin: Point, h1: f64, h2: f64) -> Result<Self> {
        let set: BTreeSet<(i64, i64)> = cells.iter().copied().collect();
        if set.is_empty() {
            return Err(TrefftzError::InvalidDomain("empty cell list".into()));
        }
        let mut directed: BTreeSet<((i64, i64), (i64, i64))> = BTreeSet::new();
        for &(i, j) in &set {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            for k in 0..4 {
                let e = (corners[k], corners[(k + 1) % 4]);
                if !directed.remove(&(e.1, e.0)) {
                    directed.insert(e);
                }
            }
        }
        let mut next: HashMap<(i64, i64), (i64, i64)> = HashMap::new();
        for &(a, b) in &directed {
            if next.insert(a, b).is_some() {
                return Err(TrefftzError::InvalidDomain(
                    "cells touch only at a corner".into(),
                ));
            }
        }
        let mut rings = Vec::new();
        let mut unused: BTreeSet<(i64, i64)> = next.keys().copied().collect();
        while let Some(&start) = unused.iter().next() {
            let mut ring = vec![start];
            unused.remove(&start);
            let mut cur = next[&start];
            while cur != start {
                ring.push(cur);
                unused.remove(&cur);
                cur = next[&cur];
            }
            // drop collinear vertices
            let n = ring.len();
            let kept: Vec<(i64, i64)> = (0..n)
                .filter(|&k| {
                    let a = ring[(k + n - 1) % n];
                    let b = ring[k];
                    let c = ring[(k + 1) % n];
                    (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
                })
                .map(|k| ring[k])
                .collect();
            rings.push(
                kept.iter()
                    .map(|&(i, j)| [origin[0] + i as f64 * h1, origin[1] + j as f64 * h2])
                    .collect::<Vec<Point>>(),
            );
        }
        let (outer, holes): (Vec<_>, Vec<_>) = rings.into_iter().partition(|r| signed_area(r) > 0.0);
        if outer.len() != 1 {
            return Err(TrefftzError::InvalidDomain("cells are not connected".into()));
        }
        Self::with_holes(outer.into_iter().next().unwrap(), holes)
    }

    /// The 56-cell polyomino inside (0,9)x(0,8); it has two single-cell holes.
    pub fn invader56() -> Self {
        Self::from_cells(&invader_cells(), [0.0, 0.0], 1.0, 1.0).expect("invader layout is valid")
    }

    /// Built-in domain with its default mesh placement.
    pub fn builtin(name: &str) -> Result<(Self, MeshSpec)> {
        match name {
            "unit_square" => Ok((
                Self::rectangle(0.0, 0.0, 1.0, 1.0),
                MeshSpec {
                    origin: [0.0, 0.0],
                    h1: 0.5,
                    h2: 0.5,
                },
            )),
            "rect_1x1_centered" => Ok((
                Self::rectangle(0.0, -0.5, 1.0, 0.5),
                MeshSpec {
                    origin: [0.0, -0.5],
                    h1: 0.5,
                    h2: 0.5,
                },
            )),
            "star5" => {
                let star = Self::star5();
                let (lo, hi) = star.bbox();
                Ok((
                    star,
                    MeshSpec {
                        origin: lo,
                        h1: 0.5 * (hi[0] - lo[0]),
                        h2: 0.5 * (hi[1] - lo[1]),
                    },
                ))
            }
            "invader56" => Ok((
                Self::invader56(),
                MeshSpec {
                    origin: [0.0, 0.0],
                    h1: 1.0,
                    h2: 1.0,
                },
            )),
            other => Err(TrefftzError::InvalidDomain(format!(
                "unknown built-in domain '{other}' (known: {})",
                BUILTIN_DOMAINS.join(", ")
            ))),
        }
    }
}

pub fn invader_cells() -> Vec<(i64, i64)> {
    let mut cells = Vec::new();
    for (r, row) in INVADER_ROWS.iter().enumerate() {
        let j = (INVADER_ROWS.len() - 1 - r) as i64;
        for (i, c) in row.chars().enumerate() {
            if c == '#' {
                cells.push((i as i64, j));
            }
        }
    }
    cells
}

pub fn point_in_ring(p: Point, ring: &[Point]) -> bool {
    let n = ring.len();
    let mut inside = false;
    for k in 0..n {
        let a = ring[k];
        let b = ring[(k + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn corners(&self) -> [Point; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x1, self.y1],
            [self.x0, self.y1],
        ]
    }
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p[0] >= self.x0 - tol && p[0] <= self.x1 + tol && p[1] >= self.y0 - tol && p[1] <= self.y1 + tol
    }
}

/// Sutherland–Hodgman clip of one ring against a rectangle; orientation is kept.
pub fn clip_ring(ring: &[Point], rect: &Rect) -> Vec<Point> {
    let mut out: Vec<Point> = ring.to_vec();
    // (axis, bound, keep_greater)
    let planes = [(0, rect.x0, true), (0, rect.x1, false), (1, rect.y0, true), (1, rect.y1, false)];
    for &(ax, bound, greater) in &planes {
        if out.is_empty() {
            break;
        }
        let inside = |p: &Point| if greater { p[ax] >= bound } else { p[ax] <= bound };
        let input = std::mem::take(&mut out);
        let n = input.len();
        for k in 0..n {
            let cur = input[k];
            let prev = input[(k + n - 1) % n];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci {
                if !pi {
                    out.push(intersect_axis(prev, cur, ax, bound));
                }
                out.push(cur);
            } else if pi {
                out.push(intersect_axis(prev, cur, ax, bound));
            }
        }
    }
    let scale = rect.width().max(rect.height());
    out.dedup_by(|a, b| (a[0] - b[0]).abs() <= 1e-14 * scale && (a[1] - b[1]).abs() <= 1e-14 * scale);
    while out.len() > 1 {
        let (f, l) = (out[0], out[out.len() - 1]);
        if (f[0] - l[0]).abs() <= 1e-14 * scale && (f[1] - l[1]).abs() <= 1e-14 * scale {
            out.pop();
        } else {
            break;
        }
    }
    if out.len() < 3 {
        out.clear();
    }
    out
}

fn intersect_axis(a: Point, b: Point, ax: usize, bound: f64) -> Point {
    let t = (bound - a[ax]) / (b[ax] - a[ax]);
    let mut p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    p[ax] = bound;
    p
}

/// Intersection of a cell with the domain as signed polygon pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippedCell {
    pub pieces: Vec<Vec<Point>>,
    pub area: f64,
}

impl ClippedCell {
    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

pub fn clip_cell(rect: &Rect, domain: &DomainPolygon) -> ClippedCell {
    let pieces: Vec<Vec<Point>> = domain
        .rings()
        .map(|r| clip_ring(r, rect))
        .filter(|p| !p.is_empty())
        .collect();
    let area = pieces.iter().map(|p| signed_area(p)).sum::<f64>().max(0.0);
    ClippedCell { pieces, area }
}

/// Portion of the domain boundary inside one cell, with outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub a: Point,
    pub b: Point,
    pub normal: Point,
}

impl BoundarySegment {
    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
    pub fn point(&self, t: f64) -> Point {
        [
            self.a[0] + t * (self.b[0] - self.a[0]),
            self.a[1] + t * (self.b[1] - self.a[1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub i: i64,
    pub j: i64,
    pub rect: Rect,
    pub clipped: ClippedCell,
    /// True when the cell lies entirely inside the domain.
    pub full: bool,
    pub boundary: Vec<BoundarySegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub orientation: Orientation,
    pub i: i64,
    pub j: i64,
    pub anchor: Point,
    pub length: f64,
    /// Cell above (horizontal) or to the right (vertical).
    pub plus: Option<usize>,
    /// Cell below (horizontal) or to the left (vertical).
    pub minus: Option<usize>,
}

impl Edge {
    pub fn point(&self, t: f64) -> Point {
        match self.orientation {
            Orientation::Horizontal => [self.anchor[0] + t, self.anchor[1]],
            Orientation::Vertical => [self.anchor[0], self.anchor[1] + t],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub i: i64,
    pub j: i64,
    pub coords: Point,
    /// Upper coarse cell split as (left, right) grid cells.
    pub upper: [Option<usize>; 2],
    /// Lower coarse cell split as (left, right) grid cells.
    pub lower: [Option<usize>; 2],
}

impl Node {
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.upper.iter().chain(self.lower.iter()).flatten().copied()
    }
}

#[derive(Debug, Clone)]
pub struct CartesianMesh {
    pub domain: DomainPolygon,
    pub origin: Point,
    pub h1: f64,
    pub h2: f64,
    pub cells: Vec<Cell>,
    pub edges: Vec<Edge>,
    pub nodes: Vec<Node>,
    lookup: HashMap<(i64, i64), usize>,
}

impl CartesianMesh {
    pub fn h(&self) -> f64 {
        self.h1.max(self.h2)
    }

    pub fn rho(&self) -> f64 {
        self.h() / self.h1.min(self.h2)
    }

    pub fn cell_index(&self, i: i64, j: i64) -> Option<usize> {
        self.lookup.get(&(i, j)).copied()
    }

    pub fn grid_rect(&self, i: i64, j: i64) -> Rect {
        grid_rect(self.origin, self.h1, self.h2, i, j)
    }

    /// Indices of retained cells whose closure contains `p`.
    pub fn locate(&self, p: Point) -> Vec<usize> {
        grid_candidates(self.origin, self.h1, self.h2, p)
            .into_iter()
            .filter_map(|(i, j)| self.cell_index(i, j))
            .collect()
    }

    pub fn boundary_segments(&self) -> impl Iterator<Item = (usize, &BoundarySegment)> {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(c, cell)| cell.boundary.iter().map(move |s| (c, s)))
    }

    pub fn boundary_length(&self) -> f64 {
        self.boundary_segments().map(|(_, s)| s.length()).sum()
    }
}

pub(crate) fn grid_rect(origin: Point, h1: f64, h2: f64, i: i64, j: i64) -> Rect {
    Rect {
        x0: origin[0] + i as f64 * h1,
        y0: origin[1] + j as f64 * h2,
        x1: origin[0] + (i + 1) as f64 * h1,
        y1: origin[1] + (j + 1) as f64 * h2,
    }
}

/// Grid cells whose closure contains `p` (one to four of them).
pub(crate) fn grid_candidates(origin: Point, h1: f64, h2: f64, p: Point) -> Vec<(i64, i64)> {
    let axis = |x: f64, o: f64, h: f64| -> Vec<i64> {
        let f = (x - o) / h;
        let r = f.round();
        if (f - r).abs() < 1e-10 {
            vec![r as i64 - 1, r as i64]
        } else {
            vec![f.floor() as i64]
        }
    };
    let is = axis(p[0], origin[0], h1);
    let js = axis(p[1], origin[1], h2);
    let mut out = Vec::with_capacity(4);
    for &j in &js {
        for &i in &is {
            out.push((i, j));
        }
    }
    out
}

/// Builds the mesh of all grid cells meeting the domain with positive area.
pub fn build_mesh(domain: &DomainPolygon, h1: f64, h2: f64, origin: Point) -> Result<CartesianMesh> {
    if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
        return Err(TrefftzError::InvalidInput("cell sizes must be positive".into()));
    }
    domain.validate()?;
    let (lo, hi) = domain.bbox();
    let i0 = ((lo[0] - origin[0]) / h1).floor() as i64 - 1;
    let i1 = ((hi[0] - origin[0]) / h1).ceil() as i64 + 1;
    let j0 = ((lo[1] - origin[1]) / h2).floor() as i64 - 1;
    let j1 = ((hi[1] - origin[1]) / h2).ceil() as i64 + 1;

    let mut cells = Vec::new();
    for j in j0..j1 {
        for i in i0..i1 {
            let rect = grid_rect(origin, h1, h2, i, j);
            let clipped = clip_cell(&rect, domain);
            if clipped.area > CELL_RETENTION * h1 * h2 {
                let full = (clipped.area - rect.area()).abs() <= 1e-12 * rect.area();
                let clipped = if full {
                    ClippedCell {
                        pieces: vec![rect.corners().to_vec()],
                        area: rect.area(),
                    }
                } else {
                    clipped
                };
                cells.push(Cell {
                    i,
                    j,
                    rect,
                    clipped,
                    full,
                    boundary: Vec::new(),
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(TrefftzError::EmptyMesh);
    }
    let lookup: HashMap<(i64, i64), usize> = cells.iter().enumerate().map(|(k, c)| ((c.i, c.j), k)).collect();

    assign_boundary(domain, origin, h1, h2, &lookup, &mut cells);

    let mut hset = BTreeSet::new();
    let mut vset = BTreeSet::new();
    let mut nset = BTreeSet::new();
    for c in &cells {
        let (i, j) = (c.i, c.j);
        hset.insert((j, i));
        hset.insert((j + 1, i));
        vset.insert((j, i));
        vset.insert((j, i + 1));
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            nset.insert((j + dj, i + di));
        }
    }
    let get = |i: i64, j: i64| lookup.get(&(i, j)).copied();
    let mut edges = Vec::with_capacity(hset.len() + vset.len());
    for &(j, i) in &hset {
        edges.push(Edge {
            orientation: Orientation::Horizontal,
            i,
            j,
            anchor: [origin[0] + i as f64 * h1, origin[1] + j as f64 * h2],
            length: h1,
            plus: get(i, j),
            minus: get(i, j - 1),
        });
    }
    for &(j, i) in &vset {
        edges.push(Edge {
            orientation: Orientation::Vertical,
            i,
            j,
            anchor: [origin[0] + i as f64 * h1, origin[1] + j as f64 * h2],
            length: h2,
            plus: get(i, j),
            minus: get(i - 1, j),
        });
    }
    let nodes = nset
        .iter()
        .map(|&(j, i)| Node {
            i,
            j,
            coords: [origin[0] + i as f64 * h1, origin[1] + j as f64 * h2],
            upper: [get(i - 1, j), get(i, j)],
            lower: [get(i - 1, j - 1), get(i, j - 1)],
        })
        .collect();

    Ok(CartesianMesh {
        domain: domain.clone(),
        origin,
        h1,
        h2,
        cells,
        edges,
        nodes,
        lookup,
    })
}

/// Splits every boundary edge at grid lines and hands each piece to the cell on
/// its inner side.
fn assign_boundary(
    domain: &DomainPolygon,
    origin: Point,
    h1: f64,
    h2: f64,
    lookup: &HashMap<(i64, i64), usize>,
    cells: &mut [Cell],
) {
    let delta = 1e-9 * h1.min(h2);
    for ring in domain.rings() {
        let n = ring.len();
        for k in 0..n {
            let p = ring[k];
            let q = ring[(k + 1) % n];
            let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            if len == 0.0 {
                continue;
            }
            let normal = [(q[1] - p[1]) / len, -(q[0] - p[0]) / len];
            let mut ts = vec![0.0, 1.0];
            for (ax, o, h) in [(0, origin[0], h1), (1, origin[1], h2)] {
                if q[ax] != p[ax] {
                    let (a, b) = (p[ax].min(q[ax]), p[ax].max(q[ax]));
                    let k0 = ((a - o) / h).ceil() as i64;
                    let k1 = ((b - o) / h).floor() as i64;
                    for line in k0..=k1 {
                        let t = (o + line as f64 * h - p[ax]) / (q[ax] - p[ax]);
                        if t > 1e-14 && t < 1.0 - 1e-14 {
                            ts.push(t);
                        }
                    }
                }
            }
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
            for w in ts.windows(2) {
                let a = [p[0] + w[0] * (q[0] - p[0]), p[1] + w[0] * (q[1] - p[1])];
                let b = [p[0] + w[1] * (q[0] - p[0]), p[1] + w[1] * (q[1] - p[1])];
                let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                let owner = [-delta, delta].iter().find_map(|&s| {
                    let x = [m[0] + s * normal[0], m[1] + s * normal[1]];
                    let i = ((x[0] - origin[0]) / h1).floor() as i64;
                    let j = ((x[1] - origin[1]) / h2).floor() as i64;
                    lookup.get(&(i, j)).copied()
                });
                if let Some(c) = owner {
                    cells[c].boundary.push(BoundarySegment { a, b, normal });
                }
            }
        }
    }
}

/// Neumann eigenvalues `(n pi/a)^2 + (m pi/b)^2 <= cutoff`, sorted, with multiplicity.
pub fn neumann_eigenvalues(a: f64, b: f64, cutoff: f64) -> Vec<(f64, usize, usize)> {
    let mut out = Vec::new();
    let nmax = (cutoff.max(0.0).sqrt() * a / PI).floor() as usize;
    for n in 0..=nmax {
        let ln = (n as f64 * PI / a).powi(2);
        let rest = cutoff - ln;
        if rest < 0.0 {
            continue;
        }
        let mmax = (rest.sqrt() * b / PI).floor() as usize + 1;
        for m in 0..=mmax {
            let l = ln + (m as f64 * PI / b).powi(2);
            if l <= cutoff {
                out.push((l, n, m));
            }
        }
    }
    out.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.2.cmp(&y.2)));
    out
}

/// d-hat for edges of length `h_along` lifted across cells of height `h_across`:
/// inf over propagative n and m >= 0 of |sqrt(1 - nu_n^2) - m pi / (kappa h_across)|.
pub fn edge_family_distance(kappa: f64, h_along: f64, h_across: f64) -> f64 {
    lattice_distance(kappa, h_across, |n| n as f64 * PI / (kappa * h_along))
}

/// (d-tilde, d-tilde_0) for the node family with nu_n = (2n-1) pi / (2 kappa h1).
pub fn node_family_distances(kappa: f64, h1: f64, h2: f64) -> (f64, f64) {
    let nu = |n: usize| (2 * n - 1) as f64 * PI / (2.0 * kappa * h1);
    let d = lattice_distance(kappa, h2, nu);
    let mut n = 1;
    while nu(n) <= 1.0 {
        n += 1;
    }
    (d, (nu(n).powi(2) - 1.0).sqrt())
}

fn lattice_distance(kappa: f64, h_across: f64, nu: impl Fn(usize) -> f64) -> f64 {
    let step = PI / (kappa * h_across);
    let mut best = f64::INFINITY;
    let mut n = 1;
    loop {
        let v = nu(n);
        if v >= 1.0 {
            break;
        }
        let s = (1.0 - v * v).sqrt();
        let m = (s / step).floor();
        best = best.min((s - m * step).abs()).min(((m + 1.0) * step - s).abs());
        n += 1;
    }
    best
}

/// 1 + 1/d + 1/sqrt(d0).
pub fn growth_functional(d_tilde: f64, d_tilde0: f64) -> f64 {
    1.0 + 1.0 / d_tilde + 1.0 / d_tilde0.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearestEigenvalue {
    pub lambda: f64,
    pub n: usize,
    pub m: usize,
    /// |lambda - kappa^2| / kappa^2
    pub relative_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonanceReport {
    pub kappa: f64,
    pub h1: f64,
    pub h2: f64,
    pub d_hat: f64,
    pub d_hat_horizontal: f64,
    pub d_hat_vertical: f64,
    pub d_tilde: f64,
    pub d_tilde0: f64,
    pub big_d_tilde: f64,
    pub a0_ok: bool,
    pub a1_ok: bool,
    pub a3_ok: bool,
    pub nearest_eigenvalue: NearestEigenvalue,
}

fn nearest_eigenvalue(kappa: f64, a: f64, b: f64) -> NearestEigenvalue {
    let k2 = kappa * kappa;
    let cutoff = 2.0 * k2 + (PI / a).powi(2) + (PI / b).powi(2);
    let (lambda, n, m) = neumann_eigenvalues(a, b, cutoff)
        .into_iter()
        .min_by(|x, y| (x.0 - k2).abs().partial_cmp(&(y.0 - k2).abs()).unwrap())
        .expect("lattice contains zero");
    NearestEigenvalue {
        lambda,
        n,
        m,
        relative_distance: (lambda - k2).abs() / k2,
    }
}

/// Distances of kappa to the edge and node eigenvalue lattices of an h1 x h2 grid.
pub fn resonance_report(kappa: f64, h1: f64, h2: f64, tol: f64) -> ResonanceReport {
    let d_h = edge_family_distance(kappa, h1, h2);
    let d_v = edge_family_distance(kappa, h2, h1);
    let (d_t, d_t0) = node_family_distances(kappa, h1, h2);
    let near = nearest_eigenvalue(kappa, h1, h2);
    let near_coarse = nearest_eigenvalue(kappa, 2.0 * h1, h2);
    // Grazing hits (nu exactly 1) sit on the m = 0 lattice line and escape the
    // strict inequalities in the infima, so they are tested through the lattice.
    let graze_edge = near.relative_distance > tol;
    let half_lattice_ok = near_coarse.relative_distance > tol || near_coarse.n % 2 == 0;
    ResonanceReport {
        kappa,
        h1,
        h2,
        d_hat: d_h.min(d_v),
        d_hat_horizontal: d_h,
        d_hat_vertical: d_v,
        d_tilde: d_t,
        d_tilde0: d_t0,
        big_d_tilde: growth_functional(d_t, d_t0),
        a0_ok: d_h > tol && graze_edge,
        a1_ok: d_h > tol && d_v > tol && graze_edge,
        a3_ok: d_t > tol && d_t0 > tol && half_lattice_ok,
        nearest_eigenvalue: near,
    }
}

pub fn check_assumptions(kappa: f64, mesh: &CartesianMesh, tol: f64) -> ResonanceReport {
    resonance_report(kappa, mesh.h1, mesh.h2, tol)
}
