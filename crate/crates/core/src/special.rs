//! Bessel functions of real order and Hankel functions for real positive arguments.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64;
use statrs::function::gamma::gamma;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Series / asymptotic switch point.
pub const SERIES_LIMIT: f64 = 12.0;

/// Bessel function of the first kind `J_nu(z)` for `z >= 0` and real `nu`.
pub fn bessel_j(nu: f64, z: f64) -> f64 {
    assert!(z >= 0.0, "bessel_j needs a non-negative argument");
    if nu < 0.0 && nu == nu.round() {
        let n = -nu;
        let sign = if (n as i64) % 2 == 0 { 1.0 } else { -1.0 };
        return sign * bessel_j(n, z);
    }
    if z == 0.0 {
        return if nu == 0.0 {
            1.0
        } else if nu > 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    if z <= SERIES_LIMIT {
        j_series(nu, z)
    } else {
        let (p, q) = hankel_pq(nu, z);
        let w = z - nu * FRAC_PI_2 - FRAC_PI_4;
        (2.0 / (PI * z)).sqrt() * (p * w.cos() - q * w.sin())
    }
}

fn j_series(nu: f64, z: f64) -> f64 {
    let half = 0.5 * z;
    let x2 = -half * half;
    let mut term = half.powf(nu) / gamma(nu + 1.0);
    let mut sum = term;
    for k in 0..200 {
        let kf = k as f64;
        term *= x2 / ((kf + 1.0) * (kf + 1.0 + nu));
        sum += term;
        if term.abs() < 1e-18 * sum.abs() && k > 2 {
            break;
        }
    }
    sum
}

/// Asymptotic factors P, Q of the Hankel expansion, summed up to the smallest term.
fn hankel_pq(nu: f64, z: f64) -> (f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut t = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..80 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        t *= (mu - odd * odd) / (kf * 8.0 * z);
        if t.abs() > prev && odd * odd > mu {
            break;
        }
        prev = t.abs();
        // signs follow (-1)^{floor(k/2)}
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            p += sign * t;
        } else {
            q += sign * t;
        }
        if t.abs() < 1e-18 {
            break;
        }
    }
    (p, q)
}

/// Bessel function of the second kind of order 0.
pub fn bessel_y0(z: f64) -> f64 {
    assert!(z > 0.0, "bessel_y0 needs a positive argument");
    if z <= SERIES_LIMIT {
        let x2 = 0.25 * z * z;
        let mut term = 1.0;
        let mut harmonic = 0.0;
        let mut sum = 0.0;
        for k in 1..200 {
            let kf = k as f64;
            term *= -x2 / (kf * kf);
            harmonic += 1.0 / kf;
            let add = -term * harmonic;
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) && k > 2 {
                break;
            }
        }
        2.0 / PI * (((0.5 * z).ln() + EULER_GAMMA) * bessel_j(0.0, z) + sum)
    } else {
        let (p, q) = hankel_pq(0.0, z);
        let w = z - FRAC_PI_4;
        (2.0 / (PI * z)).sqrt() * (p * w.sin() + q * w.cos())
    }
}

/// Bessel function of the second kind of order 1.
pub fn bessel_y1(z: f64) -> f64 {
    assert!(z > 0.0, "bessel_y1 needs a positive argument");
    if z <= SERIES_LIMIT {
        let half = 0.5 * z;
        let x2 = -half * half;
        // term_k = (z/2)^{2k+1} (-1)^k / (k! (k+1)!)
        let mut term = half;
        let mut hk = 0.0;
        let mut hk1 = 1.0;
        let mut sum = term * (hk + hk1);
        for k in 1..200 {
            let kf = k as f64;
            term *= x2 / (kf * (kf + 1.0));
            hk += 1.0 / kf;
            hk1 += 1.0 / (kf + 1.0);
            let add = term * (hk + hk1);
            sum += add;
            if add.abs() < 1e-18 * sum.abs() && k > 2 {
                break;
            }
        }
        2.0 / PI * ((half.ln() + EULER_GAMMA) * bessel_j(1.0, z)) - 2.0 / (PI * z) - sum / PI
    } else {
        let (p, q) = hankel_pq(1.0, z);
        let w = z - 3.0 * FRAC_PI_4;
        (2.0 / (PI * z)).sqrt() * (p * w.sin() + q * w.cos())
    }
}

/// Hankel function of the first kind of order 0.
pub fn hankel1_0(z: f64) -> Complex64 {
    Complex64::new(bessel_j(0.0, z), bessel_y0(z))
}

/// Hankel function of the first kind of order 1.
pub fn hankel1_1(z: f64) -> Complex64 {
    Complex64::new(bessel_j(1.0, z), bessel_y1(z))
}

/// Derivative `J_nu'(z) = (J_{nu-1}(z) - J_{nu+1}(z)) / 2`.
pub fn bessel_j_prime(nu: f64, z: f64) -> f64 {
    0.5 * (bessel_j(nu - 1.0, z) - bessel_j(nu + 1.0, z))
}
