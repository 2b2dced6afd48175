//! Standard normal CDF, density and quantile, plus bivariate and
//! low-dimensional multivariate normal orthant probabilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Φ(x).
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// 1 - Φ(x), accurate in the upper tail.
#[inline]
pub fn sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// φ(x).
#[inline]
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Φ⁻¹(p): Wichura's AS241 followed by one Halley step against `cdf`.
pub fn quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let x = as241(p);
    // one Halley refinement step; in the lower tail work with p, in the upper with 1-p
    let (e, sign) = if x <= 0.0 {
        (cdf(x) - p, 1.0)
    } else {
        (sf(x) - (1.0 - p), -1.0)
    };
    let d = pdf(x);
    if d <= 0.0 || !d.is_finite() {
        return x;
    }
    let u = sign * e / d;
    x - u / (1.0 + 0.5 * x * u)
}

fn as241(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_545e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_6,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_88e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

struct BvnRules {
    rules: [(Vec<f64>, Vec<f64>); 3],
}

fn bvn_rules() -> &'static BvnRules {
    static RULES: OnceLock<BvnRules> = OnceLock::new();
    RULES.get_or_init(|| {
        let half = |n: usize| {
            let (x, w) = crate::quad::gauss_legendre(n);
            let idx: Vec<usize> = (0..n).filter(|&i| x[i] < 0.0).collect();
            (
                idx.iter().map(|&i| x[i]).collect::<Vec<_>>(),
                idx.iter().map(|&i| w[i]).collect::<Vec<_>>(),
            )
        };
        BvnRules {
            rules: [half(6), half(12), half(20)],
        }
    })
}

/// P(X > h, Y > k) for a standard bivariate normal with correlation r (Genz's BVNU).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return sf(k);
    }
    if k == f64::NEG_INFINITY {
        return sf(h);
    }
    let two_pi = 2.0 * PI;
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (x, w) = &bvn_rules().rules[ng];
    let mut kk = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + kk * kk) / 2.0;
        let asr = r.asin();
        for (xi, wi) in x.iter().zip(w) {
            let sn = (asr * (xi + 1.0) / 2.0).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            let sn = (asr * (-xi + 1.0) / 2.0).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return bvn * asr / (2.0 * two_pi) + sf(h) * sf(kk);
    }
    if r < 0.0 {
        kk = -kk;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - kk) * (h - kk);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / as_ + hk) / 2.0).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp()
                * two_pi.sqrt()
                * cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for (xi, wi) in x.iter().zip(w) {
            let xs = (a * (xi + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            bvn += a
                * wi
                * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                    - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
            let xs = as_ * (-xi + 1.0).powi(2) / 4.0;
            let rs = (1.0 - xs).sqrt();
            bvn += a
                * wi
                * (-(bs / xs + hk) / 2.0).exp()
                * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                    - (1.0 + c * xs * (1.0 + d * xs)));
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn + sf(h.max(kk))
    } else {
        -bvn + (sf(h) - sf(kk)).max(0.0)
    }
}

/// P(X ≤ b1, Y ≤ b2) for standard margins with correlation r.
pub fn bvn_cdf(b1: f64, b2: f64, r: f64) -> f64 {
    bvn_upper(-b1, -b2, r).clamp(0.0, 1.0)
}

const QMC_POINTS: usize = 2048;
const QMC_SHIFTS: usize = 8;
const QMC_GENERATORS: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
const QMC_SHIFT_TABLE: [f64; 8 * QMC_SHIFTS] = {
    // fixed pseudo-random shifts so the estimator is a deterministic function of its inputs
    let mut t = [0.0; 8 * QMC_SHIFTS];
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut i = 0;
    while i < t.len() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        t[i] = (state >> 11) as f64 / (1u64 << 53) as f64;
        i += 1;
    }
    t
};

/// P(X ≤ b) for X ~ N(0, Σ) of dimension up to 8, `cov` row-major.
///
/// Dimensions 1 and 2 are exact; higher dimensions use Genz's separation of
/// variables with a shifted Richtmyer lattice (absolute error of order 1e-5).
/// Components with zero conditional variance are treated as point masses.
pub fn mvn_cdf(b: &[f64], cov: &[f64]) -> f64 {
    mvn_cdf_with(b, cov, QMC_POINTS, QMC_SHIFTS)
}

/// [`mvn_cdf`] with an explicit lattice size and number of shifts (at most 8).
pub fn mvn_cdf_with(b: &[f64], cov: &[f64], points: usize, shifts: usize) -> f64 {
    let shifts = shifts.clamp(1, QMC_SHIFTS);
    let d = b.len();
    assert_eq!(cov.len(), d * d);
    assert!(d <= QMC_GENERATORS.len(), "mvn_cdf supports at most 8 dimensions");
    if d == 0 {
        return 1.0;
    }
    if b.iter().any(|v| *v == f64::NEG_INFINITY) {
        return 0.0;
    }
    // drop unbounded coordinates, they integrate out
    let keep: Vec<usize> = (0..d).filter(|&i| b[i] < f64::INFINITY).collect();
    if keep.len() < d {
        let bb: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
        let cc: Vec<f64> = keep
            .iter()
            .flat_map(|&i| keep.iter().map(move |&j| cov[i * d + j]))
            .collect();
        return mvn_cdf_with(&bb, &cc, points, shifts);
    }
    if d == 1 {
        let s = cov[0].sqrt();
        return if s > 0.0 {
            cdf(b[0] / s)
        } else if b[0] >= 0.0 {
            1.0
        } else {
            0.0
        };
    }
    if d == 2 {
        let (s1, s2) = (cov[0].sqrt(), cov[3].sqrt());
        if s1 > 1e-150 && s2 > 1e-150 {
            let r = (cov[1] / (s1 * s2)).clamp(-1.0, 1.0);
            if r.abs() < 1.0 - 1e-14 {
                return bvn_cdf(b[0] / s1, b[1] / s2, r);
            }
        }
    }
    // order: most restrictive standardized bound first
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        let zi = b[i] / cov[i * d + i].sqrt().max(1e-300);
        let zj = b[j] / cov[j * d + j].sqrt().max(1e-300);
        zi.partial_cmp(&zj).unwrap_or(std::cmp::Ordering::Equal)
    });
    let bb: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = cov[order[i] * d + order[j]];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = if s > 1e-14 * cov[order[i] * d + order[i]].max(1e-300) {
                    s.sqrt()
                } else {
                    0.0
                };
            } else {
                l[i * d + j] = if l[j * d + j] > 0.0 { s / l[j * d + j] } else { 0.0 };
            }
        }
    }
    let gens: Vec<f64> = QMC_GENERATORS[..d - 1].iter().map(|p| p.sqrt()).collect();
    let mut total = 0.0;
    let mut y = vec![0.0; d];
    for shift in 0..shifts {
        let mut acc = 0.0;
        for k in 1..=points {
            let mut f = 1.0;
            for i in 0..d {
                let mut s = bb[i];
                for j in 0..i {
                    s -= l[i * d + j] * y[j];
                }
                let e = if l[i * d + i] > 0.0 {
                    cdf(s / l[i * d + i])
                } else if s >= 0.0 {
                    1.0
                } else {
                    0.0
                };
                f *= e;
                if f == 0.0 {
                    break;
                }
                if i + 1 < d {
                    let raw = (k as f64 * gens[i] + QMC_SHIFT_TABLE[shift * 8 + i]).fract();
                    let w = 1.0 - (2.0 * raw - 1.0).abs();
                    y[i] = if l[i * d + i] > 0.0 {
                        quantile((w * e).clamp(1e-300, 1.0 - 1e-16))
                    } else {
                        0.0
                    };
                }
            }
            acc += f;
        }
        total += acc / points as f64;
    }
    (total / shifts as f64).clamp(0.0, 1.0)
}
