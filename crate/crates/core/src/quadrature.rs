//! Gauss–Legendre rules on intervals, rectangles, triangles and polygons.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::Point;

type CachedRule = Arc<(Vec<f64>, Vec<f64>)>;

fn cache() -> &'static Mutex<HashMap<usize, CachedRule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, CachedRule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> CachedRule {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one point");
    if let Some(rule) = cache().lock().unwrap().get(&n) {
        return rule.clone();
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, refined by Newton on P_n.
        let k = i as f64 + 1.0;
        let mut t = (std::f64::consts::PI * (k - 0.25) / (nf + 0.5)).cos()
            * (1.0 - (nf - 1.0) / (8.0 * nf * nf * nf));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let rule = Arc::new((x, w));
    cache().lock().unwrap().insert(n, rule.clone());
    rule
}

fn legendre(n: usize, t: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = t;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

/// Point count used for oscillatory integrands: ceil(k*len/2) + 12.
pub fn points_for(kappa: f64, len: f64) -> usize {
    (kappa * len / 2.0).ceil().max(0.0) as usize + 12
}

#[derive(Debug, Clone, Default)]
pub struct Rule1D {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

impl Rule1D {
    pub fn gauss(a: f64, b: f64, n: usize) -> Self {
        let mut r = Rule1D::default();
        r.push_gauss(a, b, n);
        r
    }

    fn push_gauss(&mut self, a: f64, b: f64, n: usize) {
        let rule = gauss_legendre(n);
        let (t, wt) = (&rule.0, &rule.1);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for k in 0..n {
            self.x.push(mid + half * t[k]);
            self.w.push(half * wt[k]);
        }
    }

    /// Composite rule for integrands oscillating with wavenumber `osc` and carrying
    /// exponential boundary layers of rate up to `decay` at either end. Panels are
    /// refined geometrically toward the ends flagged in `grade`, and toward both
    /// ends when the layers are too thin for a single panel.
    pub fn graded(a: f64, b: f64, osc: f64, decay: f64, grade: [bool; 2]) -> Self {
        let len = b - a;
        let mut r = Rule1D::default();
        if len <= 0.0 {
            return r;
        }
        let layered = decay * len > 24.0;
        let left = grade[0] || layered;
        let right = grade[1] || layered;
        if !left && !right {
            let n = points_for(osc, len) + (decay * len / 2.0).ceil() as usize;
            r.push_gauss(a, b, n);
            return r;
        }
        let smallest = if grade[0] || grade[1] {
            len * 1e-12
        } else {
            (2.0 / decay).min(len / 4.0)
        };
        let mut breaks = vec![0.0, 1.0];
        let mut w = 0.5;
        while w * len > smallest {
            w *= 0.5;
            if left {
                breaks.push(w);
            }
            if right {
                breaks.push(1.0 - w);
            }
        }
        breaks.push(0.5);
        breaks.sort_by(|p, q| p.partial_cmp(q).unwrap());
        breaks.dedup_by(|p, q| (*p - *q).abs() < 1e-15);
        for win in breaks.windows(2) {
            let (pa, pb) = (a + win[0] * len, a + win[1] * len);
            let wl = pb - pa;
            let n = 12 + (osc * wl / 2.0).ceil() as usize + (decay * wl / 4.0).min(12.0).ceil() as usize;
            r.push_gauss(pa, pb, n);
        }
        r
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.x.iter().zip(&self.w).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// A 2D rule; weights may be negative when produced by a signed fan.
#[derive(Debug, Clone, Default)]
pub struct Rule2D {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl Rule2D {
    pub fn tensor(rx: &Rule1D, ry: &Rule1D) -> Self {
        let mut r = Rule2D::default();
        for (&y, &wy) in ry.x.iter().zip(&ry.w) {
            for (&x, &wx) in rx.x.iter().zip(&rx.w) {
                r.points.push([x, y]);
                r.weights.push(wx * wy);
            }
        }
        r
    }

    /// Collapsed (Duffy) Gauss rule on a triangle; weights carry the orientation sign.
    pub fn triangle(a: Point, b: Point, c: Point, n: usize) -> Self {
        let mut r = Rule2D::default();
        r.push_triangle(a, b, c, n);
        r
    }

    fn push_triangle(&mut self, a: Point, b: Point, c: Point, n: usize) {
        let jac = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if jac == 0.0 {
            return;
        }
        let rule = gauss_legendre(n);
        let (t, wt) = (&rule.0, &rule.1);
        for i in 0..n {
            let u = 0.5 * (1.0 + t[i]);
            for k in 0..n {
                let v = 0.5 * (1.0 + t[k]) * (1.0 - u);
                let w = 0.25 * wt[i] * wt[k] * (1.0 - u);
                self.points.push([
                    a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                    a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                ]);
                self.weights.push(w * jac);
            }
        }
    }

    /// Signed fan from the first vertex. Exact for any closed polygon (also
    /// non-convex or degenerate ones) as long as the integrand is smooth on the
    /// convex hull, because the signed triangles add up to the winding number.
    pub fn polygon_fan(poly: &[Point], n: usize) -> Self {
        let mut r = Rule2D::default();
        if poly.len() < 3 {
            return r;
        }
        for k in 1..poly.len() - 1 {
            r.push_triangle(poly[0], poly[k], poly[k + 1], n);
        }
        r
    }

    pub fn integrate<T, F>(&self, mut f: F) -> T
    where
        T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Default,
        F: FnMut(Point) -> T,
    {
        let mut acc = T::default();
        for (p, &w) in self.points.iter().zip(&self.weights) {
            acc = acc + f(*p) * w;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        for n in 1..40 {
            let r = Rule1D::gauss(-1.0, 2.0, n);
            for deg in 0..(2 * n) {
                let d = deg as i32;
                let exact = (2f64.powi(d + 1) - (-1f64).powi(d + 1)) / (deg as f64 + 1.0);
                let scale = (2f64.powi(d + 1) + 1.0) / (deg as f64 + 1.0);
                let got = r.integrate(|x| x.powi(d));
                assert!((got - exact).abs() <= 1e-13 * scale, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn large_rules_have_unit_weight_sum() {
        for n in [50, 120, 300] {
            let rule = gauss_legendre(n);
            let s: f64 = rule.1.iter().sum();
            assert!((s - 2.0).abs() < 1e-13);
            assert!(rule.0.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn graded_rule_resolves_boundary_layer() {
        let a = 800.0;
        let r = Rule1D::graded(0.0, 0.5, 30.0, a, [false, false]);
        let got = r.integrate(|x| (-a * x).exp() + (-a * (0.5 - x)).exp());
        let exact = 2.0 * (1.0 - (-a * 0.5f64).exp()) / a;
        assert!((got - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn graded_rule_handles_endpoint_singularity() {
        let r = Rule1D::graded(0.0, 1.0, 0.0, 0.0, [true, false]);
        let got = r.integrate(|x| x.powf(-1.0 / 3.0));
        assert!((got - 1.5).abs() < 1e-8, "{got}");
    }

    #[test]
    fn triangle_rule_signed_area_and_moments() {
        let r = Rule2D::triangle([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], 6);
        let area: f64 = r.integrate(|_| 1.0);
        assert!((area - 0.5).abs() < 1e-15);
        let m: f64 = r.integrate(|p| p[0] * p[0] * p[1]);
        assert!((m - 1.0 / 60.0).abs() < 1e-15);
        let r2 = Rule2D::triangle([0.0, 0.0], [0.0, 1.0], [1.0, 0.0], 6);
        let area2: f64 = r2.integrate(|_| 1.0);
        assert!((area2 + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fan_handles_nonconvex_polygon() {
        // L-shape of area 3.
        let poly = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        let r = Rule2D::polygon_fan(&poly, 4);
        let area: f64 = r.integrate(|_| 1.0);
        assert!((area - 3.0).abs() < 1e-14);
        let mx: f64 = r.integrate(|p| p[0]);
        assert!((mx - 2.5).abs() < 1e-13);
    }
}
