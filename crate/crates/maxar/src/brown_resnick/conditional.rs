//! Conditional simulation of a Brown-Resnick field at one target site given
//! exact values at up to six sites, by enumerating hitting scenarios.
//!
//! Given the observations, the extremal functions split the conditioning
//! sites into blocks. For each block the extremal function is log-Gaussian
//! with its value fixed at the block's sites and truncated below the
//! observations elsewhere; all remaining (sub-extremal) functions form a
//! Poisson process staying below every observation, whose maximum at the
//! target is drawn from its exact CDF.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};

use super::Semivariogram;
use crate::error::{Error, Result};
use crate::normal;
use crate::rng::{substream, Rng};

pub const MAX_CONDITIONING: usize = 6;

const SUB_NODES: usize = 160;
const REJECTION_FLOOR: f64 = 0.01;
const GIBBS_SWEEPS: usize = 60;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
struct Block {
    log_weight: f64,
    ref_value: f64,
    gamma_target_ref: f64,
    mean_c: Vec<f64>,
    cov_c: DMatrix<f64>,
    chol_c: Option<DMatrix<f64>>,
    precision_c: Option<DMatrix<f64>>,
    thr: Vec<f64>,
    p_trunc: f64,
    mean_t: f64,
    beta: Vec<f64>,
    sd_t: f64,
}

/// Precomputed conditional sampler for one configuration.
#[derive(Clone, Debug)]
pub struct ConditionalBr {
    blocks: Vec<Option<Block>>,
    partitions: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
    sub_t: Vec<f64>,
    sub_p: Vec<f64>,
    sub_m: Vec<f64>,
}

impl ConditionalBr {
    pub fn new(obs: &[([f64; 2], f64)], target: [f64; 2], sv: &Semivariogram) -> Result<Self> {
        let k = obs.len();
        if k > MAX_CONDITIONING {
            return Err(Error::TooManyConditioning(k));
        }
        if k == 0 {
            return Err(Error::Invalid("conditional simulation needs at least one observation".into()));
        }
        if let Some((_, v)) = obs.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(format!("conditioning values must be positive, got {v}")));
        }
        let mut sites: Vec<[f64; 2]> = obs.iter().map(|o| o.0).collect();
        sites.push(target);
        let n = k + 1;
        let mut g = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let d = (sites[i][0] - sites[j][0]).hypot(sites[i][1] - sites[j][1]);
                if d == 0.0 {
                    return Err(Error::Invalid(format!(
                        "conditioning sites must be distinct from each other and from the target (sites {j}, {i})"
                    )));
                }
                let v = sv.at_distance(d);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let z: Vec<f64> = obs.iter().map(|o| o.1).collect();
        let mut blocks = vec![None; 1 << k];
        for mask in 1usize..(1 << k) {
            blocks[mask] = Some(block_model(mask, k, &z, &g)?);
        }
        let partitions = set_partitions(k);
        let logw: Vec<f64> = partitions
            .iter()
            .map(|p| p.iter().map(|&m| blocks[m].as_ref().unwrap().log_weight).sum())
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::Invalid("no hitting scenario has positive probability".into()));
        }
        let mut cumulative = Vec::with_capacity(logw.len());
        let mut acc = 0.0;
        for w in &logw {
            acc += (w - top).exp();
            cumulative.push(acc);
        }
        for c in cumulative.iter_mut() {
            *c /= acc;
        }
        let (sub_t, sub_p, sub_m) = sub_extremal_table(&z, &g);
        Ok(Self {
            blocks,
            partitions,
            cumulative,
            sub_t,
            sub_p,
            sub_m,
        })
    }

    /// Probability of each hitting scenario, in enumeration order.
    pub fn scenario_probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|c| {
                let p = c - prev;
                prev = *c;
                p
            })
            .collect()
    }

    pub fn n_scenarios(&self) -> usize {
        self.partitions.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .partition_point(|c| *c < u)
            .min(self.partitions.len() - 1);
        let mut best = 0.0f64;
        for &mask in &self.partitions[idx] {
            let b = self.blocks[mask].as_ref().unwrap();
            best = best.max(sample_block(b, rng));
        }
        best.max(self.sample_sub_extremal(rng))
    }

    fn sample_sub_extremal(&self, rng: &mut Rng) -> f64 {
        let e: f64 = rng.sample(Exp1);
        let last = self.sub_m.len() - 1;
        let w = if e >= self.sub_m[last] {
            self.sub_t[last].exp() + (e - self.sub_m[last])
        } else {
            let i = self.sub_m.partition_point(|m| *m <= e).max(1) - 1;
            let (t0, t1) = (self.sub_t[i], self.sub_t[i + 1]);
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let v = self.sub_m[i] + piece_integral(t0, t1, self.sub_p[i], self.sub_p[i + 1], mid);
                if v < e {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (0.5 * (lo + hi)).exp()
        };
        1.0 / w
    }
}

/// `n` conditional draws of W(target) given W(site_k) = value_k.
pub fn conditional_sample_br(
    obs: &[([f64; 2], f64)],
    target: [f64; 2],
    sv: &Semivariogram,
    seed: u64,
    n: usize,
) -> Result<Vec<f64>> {
    let c = ConditionalBr::new(obs, target, sv)?;
    let mut rng = substream(seed, &[0]);
    Ok((0..n).map(|_| c.sample(&mut rng)).collect())
}

fn block_model(mask: usize, k: usize, z: &[f64], g: &DMatrix<f64>) -> Result<Block> {
    let members: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 1).collect();
    let b = members[0];
    let bm: Vec<usize> = members[1..].to_vec();
    let c: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 0).collect();
    let t = k;
    let cov = |i: usize, j: usize| g[(i, b)] + g[(j, b)] - g[(i, j)];
    let rest: Vec<usize> = c.iter().cloned().chain(std::iter::once(t)).collect();
    let nb = bm.len();
    let nr = rest.len();
    let ytilde: Vec<f64> = bm.iter().map(|&i| (z[i] / z[b]).ln() + g[(i, b)]).collect();

    let mut log_phi = 0.0;
    let mut mean_r = vec![0.0; nr];
    let mut s_rr = DMatrix::from_fn(nr, nr, |i, j| cov(rest[i], rest[j]));
    if nb > 0 {
        let s_bb = DMatrix::from_fn(nb, nb, |i, j| cov(bm[i], bm[j]));
        let chol = s_bb
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invalid("degenerate covariance among conditioning sites".into()))?;
        let y = DVector::from_vec(ytilde.clone());
        let alpha = chol.solve(&y);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        log_phi = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * nb as f64 * LN_2PI;
        let s_rb = DMatrix::from_fn(nr, nb, |i, j| cov(rest[i], bm[j]));
        let m = &s_rb * &alpha;
        mean_r = m.iter().cloned().collect();
        let sol = chol.solve(&s_rb.transpose());
        s_rr -= &s_rb * sol;
    }
    let log_lambda = -2.0 * z[b].ln() - bm.iter().map(|&i| z[i].ln()).sum::<f64>() + log_phi;

    let nc = c.len();
    let thr: Vec<f64> = c.iter().map(|&i| (z[i] / z[b]).ln() + g[(i, b)]).collect();
    let mean_c: Vec<f64> = mean_r[..nc].to_vec();
    let cov_c = s_rr.view((0, 0), (nc, nc)).into_owned();
    let p_trunc = if nc == 0 {
        1.0
    } else {
        let upper: Vec<f64> = thr.iter().zip(&mean_c).map(|(a, m)| a - m).collect();
        let flat: Vec<f64> = cov_c.transpose().iter().cloned().collect();
        normal::mvn_cdf_with(&upper, &flat, 1024, 4)
    };
    let (beta, var_t) = if nc == 0 {
        (Vec::new(), s_rr[(0, 0)])
    } else {
        let s_tc = s_rr.view((nc, 0), (1, nc)).into_owned();
        match cov_c.clone().cholesky() {
            Some(ch) => {
                let beta = ch.solve(&s_tc.transpose());
                let v = s_rr[(nc, nc)] - (s_tc * &beta)[(0, 0)];
                (beta.iter().cloned().collect(), v)
            }
            None => {
                let pinv = cov_c
                    .clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|_| Error::Invalid("degenerate conditional covariance".into()))?;
                let beta = &pinv * s_tc.transpose();
                let v = s_rr[(nc, nc)] - (s_tc * &beta)[(0, 0)];
                (beta.iter().cloned().collect(), v)
            }
        }
    };
    let chol_c = if nc > 0 { cov_c.clone().cholesky().map(|c| c.l()) } else { None };
    let precision_c = if nc > 1 { cov_c.clone().try_inverse() } else { None };
    let log_weight = if p_trunc > 0.0 {
        log_lambda + p_trunc.ln()
    } else {
        f64::NEG_INFINITY
    };
    Ok(Block {
        log_weight,
        ref_value: z[b],
        gamma_target_ref: g[(t, b)],
        mean_c,
        cov_c,
        chol_c,
        precision_c,
        thr,
        p_trunc,
        mean_t: mean_r[nc],
        beta,
        sd_t: var_t.max(0.0).sqrt(),
    })
}

fn truncated_normal_upper(rng: &mut Rng, mean: f64, sd: f64, upper: f64) -> f64 {
    if sd <= 0.0 {
        return mean.min(upper);
    }
    let cap = normal::cdf((upper - mean) / sd);
    let u: f64 = rng.random::<f64>() * cap;
    let x = mean + sd * normal::quantile(u.max(f64::MIN_POSITIVE));
    x.min(upper)
}

fn sample_block(b: &Block, rng: &mut Rng) -> f64 {
    let nc = b.thr.len();
    let yc: Vec<f64> = match nc {
        0 => Vec::new(),
        1 => vec![truncated_normal_upper(rng, b.mean_c[0], b.cov_c[(0, 0)].max(0.0).sqrt(), b.thr[0])],
        _ => {
            let mut out = None;
            if b.p_trunc >= REJECTION_FLOOR {
                if let Some(l) = &b.chol_c {
                    loop {
                        let e = DVector::from_fn(nc, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let x = l * e;
                        let y: Vec<f64> = (0..nc).map(|i| b.mean_c[i] + x[i]).collect();
                        if y.iter().zip(&b.thr).all(|(v, t)| v < t) {
                            out = Some(y);
                            break;
                        }
                    }
                }
            }
            out.unwrap_or_else(|| gibbs_truncated(b, rng))
        }
    };
    let mut yt = b.mean_t;
    for i in 0..nc {
        yt += b.beta[i] * (yc[i] - b.mean_c[i]);
    }
    yt += b.sd_t * rng.sample::<f64, _>(StandardNormal);
    b.ref_value * (yt - b.gamma_target_ref).exp()
}

fn gibbs_truncated(b: &Block, rng: &mut Rng) -> Vec<f64> {
    let nc = b.thr.len();
    let q = match &b.precision_c {
        Some(q) => q.clone(),
        None => {
            // singular: fall back to independent coordinates
            DMatrix::from_fn(nc, nc, |i, j| if i == j { 1.0 / b.cov_c[(i, i)].max(1e-300) } else { 0.0 })
        }
    };
    let mut x: Vec<f64> = (0..nc)
        .map(|i| b.mean_c[i].min(b.thr[i] - 0.1 * b.cov_c[(i, i)].max(0.0).sqrt()))
        .collect();
    for _ in 0..GIBBS_SWEEPS {
        for i in 0..nc {
            let qii = q[(i, i)];
            let mut m = b.mean_c[i];
            for j in 0..nc {
                if j != i {
                    m -= q[(i, j)] * (x[j] - b.mean_c[j]) / qii;
                }
            }
            x[i] = truncated_normal_upper(rng, m, (1.0 / qii).sqrt(), b.thr[i]);
        }
    }
    x
}

/// ∫_{t0}^{t} (p0 + s(x − t0)) eˣ dx with s the slope between (t0, p0) and (t1, p1).
fn piece_integral(t0: f64, t1: f64, p0: f64, p1: f64, t: f64) -> f64 {
    let s = (p1 - p0) / (t1 - t0);
    let (e0, e) = (t0.exp(), t.exp());
    p0 * (e - e0) + s * ((t - t0 - 1.0) * e + e0)
}

/// Tabulate M(t) = ∫_{−∞}^{t} p(x) eˣ dx, p(x) = P(all sub-extremal spectral values at the
/// observed sites stay below z when the function equals e⁻ˣ at the target).
fn sub_extremal_table(z: &[f64], g: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = z.len();
    let t = k;
    let c: Vec<f64> = (0..k).map(|i| z[i].ln() + g[(i, t)]).collect();
    let sd: Vec<f64> = (0..k).map(|i| (2.0 * g[(i, t)]).sqrt()).collect();
    let cov: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| g[(i, t)] + g[(j, t)] - g[(i, j)])
        .collect();
    let t_lo = (0..k).map(|i| -c[i] - 8.5 * sd[i]).fold(f64::NEG_INFINITY, f64::max);
    let t_hi = (0..k).map(|i| -c[i] + 8.5 * sd[i]).fold(f64::NEG_INFINITY, f64::max);
    let t_hi = if t_hi > t_lo { t_hi } else { t_lo + 1e-6 };
    let ts: Vec<f64> = (0..=SUB_NODES)
        .map(|i| t_lo + (t_hi - t_lo) * i as f64 / SUB_NODES as f64)
        .collect();
    let ps: Vec<f64> = ts
        .iter()
        .map(|&x| {
            let b: Vec<f64> = c.iter().map(|ci| ci + x).collect();
            normal::mvn_cdf_with(&b, &cov, 128, 2)
        })
        .collect();
    let mut m = Vec::with_capacity(ts.len());
    m.push(0.0);
    for i in 0..SUB_NODES {
        let prev = m[i];
        m.push(prev + piece_integral(ts[i], ts[i + 1], ps[i], ps[i + 1], ts[i + 1]).max(0.0));
    }
    (ts, ps, m)
}

/// All set partitions of {0..k−1} as lists of block bitmasks (restricted growth strings).
fn set_partitions(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0usize; k];
    fn rec(i: usize, max: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let k = a.len();
        if i == k {
            let nb = a.iter().max().map_or(0, |m| m + 1);
            let mut masks = vec![0usize; nb];
            for (e, &blk) in a.iter().enumerate() {
                masks[blk] |= 1 << e;
            }
            out.push(masks);
            return;
        }
        for v in 0..=max + 1 {
            a[i] = v;
            rec(i + 1, max.max(v), a, out);
        }
    }
    if k == 0 {
        return vec![Vec::new()];
    }
    a[0] = 0;
    rec(1, 0, &mut a, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brown_resnick::exponent_v_spatial;

    #[test]
    fn bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52, 203];
        for k in 1..=6 {
            assert_eq!(set_partitions(k).len(), bell[k]);
        }
    }

    #[test]
    fn too_many_sites() {
        let sv = Semivariogram::new(1.0, 0.5).unwrap();
        let obs: Vec<([f64; 2], f64)> = (0..7).map(|i| ([i as f64, 0.0], 1.0)).collect();
        assert!(matches!(
            ConditionalBr::new(&obs, [0.5, 0.5], &sv),
            Err(Error::TooManyConditioning(7))
        ));
    }

    fn ks_against(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        draws
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = cdf(*x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn one_site_matches_analytic_conditional() {
        // P(W2 ≤ y | W1 = z1) = z1² (−V₁(z1, y)) exp(1/z1 − V(z1, y))
        let sv = Semivariogram::new(1.0, 0.7).unwrap();
        for &(d, z1) in &[(0.6, 2.5), (1.4, 0.4)] {
            let g = sv.at_distance(d);
            let draws = conditional_sample_br(&[([0.0, 0.0], z1)], [d, 0.0], &sv, 3, 20_000).unwrap();
            let ks = ks_against(draws, |y| {
                let b = exponent_v_spatial(z1, y, g);
                z1 * z1 * (-b.v1) * (1.0 / z1 - b.v).exp()
            });
            assert!(ks < 0.015, "d={d} ks={ks}");
        }
    }

    #[test]
    fn near_site_reproduces_observation() {
        let sv = Semivariogram::new(1.0, 0.5).unwrap();
        let draws = conditional_sample_br(&[([0.0, 0.0], 3.0)], [1e-9, 0.0], &sv, 1, 200).unwrap();
        assert!(draws.iter().all(|v| (v - 3.0).abs() < 1e-3), "{:?}", &draws[..5]);
    }

    #[test]
    fn far_site_is_unconditional_frechet() {
        let sv = Semivariogram::new(1e-3, 0.5).unwrap();
        let draws = conditional_sample_br(&[([0.0, 0.0], 0.2)], [5.0, 0.0], &sv, 9, 20_000).unwrap();
        let ks = ks_against(draws, |y| (-1.0 / y).exp());
        assert!(ks < 0.015, "ks={ks}");
    }
}
