//! Spatial Brown-Resnick fields: semivariogram, bivariate exponent measure,
//! exact simulation and conditional simulation.

mod conditional;
mod simulate;

pub use conditional::{conditional_sample_br, ConditionalBr, MAX_CONDITIONING};
pub use simulate::{simulate_br, BrSimulator};

use crate::error::{Error, Result};
use crate::normal;

/// γ(h) = (‖h‖/κ)^{2H}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Semivariogram {
    pub kappa: f64,
    pub hurst: f64,
}

impl Semivariogram {
    pub fn new(kappa: f64, hurst: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Invalid(format!("range kappa must be positive, got {kappa}")));
        }
        if !(hurst > 0.0 && hurst <= 1.0) {
            return Err(Error::Invalid(format!("Hurst index must lie in (0, 1], got {hurst}")));
        }
        Ok(Self { kappa, hurst })
    }

    #[inline]
    pub fn at_distance(&self, d: f64) -> f64 {
        if d == 0.0 {
            0.0
        } else {
            (d / self.kappa).powf(2.0 * self.hurst)
        }
    }

    #[inline]
    pub fn gamma(&self, h: [f64; 2]) -> f64 {
        self.at_distance(h[0].hypot(h[1]))
    }
}

pub fn gamma(h: [f64; 2], sv: &Semivariogram) -> f64 {
    sv.gamma(h)
}

/// Exponent measure and its partial derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BivariateV {
    pub v: f64,
    pub v1: f64,
    pub v2: f64,
    pub v12: f64,
}

impl BivariateV {
    /// exp(−V)(V₁V₂ − V₁₂).
    pub fn density(&self) -> f64 {
        (-self.v).exp() * (self.v1 * self.v2 - self.v12)
    }
}

/// V(z1, z2) = Φ(q1)/z1 + c·Φ(q2)/z2 + (1−c)/z2 with
/// q1 = log(z2/(c z1))/√(2γ) + √(γ/2), q2 = log(c z1/z2)/√(2γ) + √(γ/2).
/// `c = 1` is the spatial Brown-Resnick pair, `c = a^u` the space-time pair.
pub(crate) fn hr_exponent(z1: f64, z2: f64, c: f64, g: f64) -> BivariateV {
    if g == 0.0 {
        return comonotone_exponent(z1, z2, c);
    }
    let s = (2.0 * g).sqrt();
    let l = (z2 / (c * z1)).ln();
    let q1 = l / s + 0.5 * s;
    let q2 = -l / s + 0.5 * s;
    let (p1, p2) = (normal::cdf(q1), normal::cdf(q2));
    let (d1, d2) = (normal::pdf(q1), normal::pdf(q2));
    let dq1_dz1 = -1.0 / (z1 * s);
    let dq1_dz2 = 1.0 / (z2 * s);
    let dq2_dz1 = 1.0 / (z1 * s);
    let dq2_dz2 = -1.0 / (z2 * s);
    let v = p1 / z1 + c * p2 / z2 + (1.0 - c) / z2;
    let v1 = -p1 / (z1 * z1) + d1 * dq1_dz1 / z1 + c * d2 * dq2_dz1 / z2;
    let v2 = d1 * dq1_dz2 / z1 - c * p2 / (z2 * z2) + c * d2 * dq2_dz2 / z2 - 1.0 / (z2 * z2)
        + c / (z2 * z2);
    let v12 = -d1 * dq1_dz2 / (z1 * z1)
        - (q1 / z1) * d1 * dq1_dz1 * dq1_dz2
        - (c / (z2 * z2)) * d2 * dq2_dz1
        - (c * q2 / z2) * d2 * dq2_dz1 * dq2_dz2;
    BivariateV { v, v1, v2, v12 }
}

/// γ = 0: V = 1/min(z1, z2/c) + (1−c)/z2.
fn comonotone_exponent(z1: f64, z2: f64, c: f64) -> BivariateV {
    let w2 = z2 / c;
    let tail = (1.0 - c) / z2;
    if z1 < w2 {
        BivariateV {
            v: 1.0 / z1 + tail,
            v1: -1.0 / (z1 * z1),
            v2: -(1.0 - c) / (z2 * z2),
            v12: 0.0,
        }
    } else {
        BivariateV {
            v: c / z2 + tail,
            v1: 0.0,
            v2: -1.0 / (z2 * z2),
            v12: 0.0,
        }
    }
}

/// Bivariate Brown-Resnick exponent measure at semivariogram value `gamma_h`.
/// `gamma_h = 0` gives the comonotone V = 1/min(z1, z2).
pub fn exponent_v_spatial(z1: f64, z2: f64, gamma_h: f64) -> BivariateV {
    hr_exponent(z1, z2, 1.0, gamma_h)
}

/// Pairwise extremal coefficient 2Φ(√(γ/2)).
pub fn extremal_coeff_spatial(gamma_h: f64) -> f64 {
    2.0 * normal::cdf((gamma_h / 2.0).sqrt())
}

/// Log of exp(−V)(V₁V₂ − V₁₂) for the non-degenerate pair, written in the
/// simplified form that uses φ(q1)/z1 = c·φ(q2)/z2.
/// `ln_ratio` is log(z2/z1) − log c and `s` is √(2γ).
#[inline]
pub(crate) fn log_density_fast(z1: f64, z2: f64, lnz1: f64, lnz2: f64, ln_ratio: f64, c: f64, s: f64) -> f64 {
    let q1 = ln_ratio / s + 0.5 * s;
    let q2 = -ln_ratio / s + 0.5 * s;
    let p1 = normal::cdf(q1);
    let p2 = normal::cdf(q2);
    let v = p1 / z1 + (c * p2 + 1.0 - c) / z2;
    let core = p1 * (c * p2 + 1.0 - c) + normal::pdf(q1) * z2 / s;
    -v + core.ln() - 2.0 * (lnz1 + lnz2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_examples() {
        let sv = Semivariogram::new(1.0, 0.5).unwrap();
        assert_eq!(sv.gamma([0.0, 0.0]), 0.0);
        assert!((sv.gamma([0.0, 4.0]) - 4.0).abs() < 1e-15);
        let sv = Semivariogram::new(2.19, 0.665).unwrap();
        assert!((sv.at_distance(2.19) - 1.0).abs() < 1e-15);
        assert!(Semivariogram::new(0.0, 0.5).is_err());
        assert!(Semivariogram::new(1.0, 1.2).is_err());
    }

    #[test]
    fn exponent_limits() {
        let v = exponent_v_spatial(1.0, 1.0, 2.0);
        assert!((v.v - 2.0 * normal::cdf(1.0)).abs() < 1e-15);
        let far = exponent_v_spatial(0.7, 2.0, 1e4);
        assert!((far.v - (1.0 / 0.7 + 0.5)).abs() < 1e-12);
        let near = exponent_v_spatial(0.7, 2.0, 1e-10);
        assert!((near.v - 1.0 / 0.7).abs() < 1e-9);
        let edge = exponent_v_spatial(1.3, 1e10, 0.8);
        assert!((edge.v - 1.0 / 1.3).abs() < 1e-8);
        assert_eq!(exponent_v_spatial(0.5, 2.0, 0.0).v, 2.0);
    }

    #[test]
    fn partials_have_expected_signs() {
        for &(z1, z2, g) in &[(0.3, 2.0, 0.5), (1.0, 1.0, 1.0), (5.0, 0.2, 3.0)] {
            let b = exponent_v_spatial(z1, z2, g);
            assert!(b.v > 0.0 && b.v1 < 0.0 && b.v2 < 0.0 && b.v1 * b.v2 - b.v12 > 0.0);
        }
    }

    #[test]
    fn fast_log_density_matches_literal_partials() {
        for &(z1, z2, c, g) in &[(0.3, 2.0, 1.0, 0.5), (1.2, 0.9, 0.8, 1.7), (4.0, 0.1, 0.3, 0.05)] {
            let b = hr_exponent(z1, z2, c, g);
            let s = (2.0f64 * g).sqrt();
            let (l1, l2) = (f64::ln(z1), f64::ln(z2));
            let fast = log_density_fast(z1, z2, l1, l2, l2 - l1 - f64::ln(c), c, s);
            assert!((fast - b.density().ln()).abs() < 1e-12, "{fast} vs {}", b.density().ln());
        }
    }
}
