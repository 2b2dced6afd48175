//! GEV marginals: maximum likelihood per site and the maps to and from the
//! standard Fréchet scale.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Scale, SpaceTimeField, SpatialGrid};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::par;

const EULER_GAMMA: f64 = 0.5772;
const SUPPORT_PENALTY: f64 = -1e10;
const XI_GUMBEL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !xi.is_finite() || !sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "GEV parameters need finite values and sigma > 0 (got {mu}, {sigma}, {xi})"
            )));
        }
        Ok(Self { mu, sigma, xi })
    }

    /// 1 + ξ(x-μ)/σ, or None for Gumbel.
    #[inline]
    fn support_t(&self, x: f64) -> Option<f64> {
        if self.xi.abs() < XI_GUMBEL {
            None
        } else {
            Some(1.0 + self.xi * (x - self.mu) / self.sigma)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match to_frechet(x, self) {
            Ok(z) => (-1.0 / z).exp(),
            Err(_) => {
                if self.xi > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Quantile function.
    pub fn quantile(&self, p: f64) -> f64 {
        from_frechet(-1.0 / p.ln(), self)
    }

    /// Log density; `None` outside the support.
    #[inline]
    pub fn log_pdf(&self, x: f64) -> Option<f64> {
        let y = (x - self.mu) / self.sigma;
        match self.support_t(x) {
            None => Some(-self.sigma.ln() - y - (-y).exp()),
            Some(t) if t > 0.0 => {
                let lt = (self.xi * y).ln_1p();
                Some(-self.sigma.ln() - (1.0 + 1.0 / self.xi) * lt - (-lt / self.xi).exp())
            }
            Some(_) => None,
        }
    }
}

/// −1/log F(x): the standard Fréchet value of `x`.
pub fn to_frechet(x: f64, g: &GevParams) -> Result<f64> {
    let y = (x - g.mu) / g.sigma;
    let z = if g.xi.abs() < XI_GUMBEL {
        y.exp()
    } else {
        let t = g.xi * y;
        if !(t > -1.0) {
            return Err(Error::ValueOutOfSupport(x));
        }
        (t.ln_1p() / g.xi).exp()
    };
    if z > 0.0 && z.is_finite() {
        Ok(z)
    } else {
        Err(Error::ValueOutOfSupport(x))
    }
}

/// Inverse of [`to_frechet`].
pub fn from_frechet(z: f64, g: &GevParams) -> f64 {
    let lz = z.ln();
    if g.xi.abs() < XI_GUMBEL {
        g.mu + g.sigma * lz
    } else {
        g.mu + g.sigma * (g.xi * lz).exp_m1() / g.xi
    }
}

/// Weighted log-likelihood; −1e10 if any weighted sample is outside the support.
pub fn gev_loglik(samples: &[f64], weights: Option<&[f64]>, g: &GevParams) -> f64 {
    let mut s = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        match g.log_pdf(x) {
            Some(l) => s += w * l,
            None => return SUPPORT_PENALTY,
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct GevFitOptions {
    pub min_samples: usize,
    pub xi_bounds: (f64, f64),
    pub optimizer: NelderMeadOptions,
    /// Warm start; the moment start is used when `None`.
    pub start: Option<GevParams>,
}

impl Default for GevFitOptions {
    fn default() -> Self {
        Self {
            min_samples: 20,
            xi_bounds: (-0.5, 0.5),
            optimizer: NelderMeadOptions {
                max_evals: 3000,
                f_tol: 1e-13,
                x_tol: 1e-8,
            },
            start: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GevFit {
    pub params: GevParams,
    pub loglik: f64,
    pub start_loglik: f64,
    pub evals: usize,
}

/// Moment start: σ₀ = sd·√6/π, μ₀ = mean − 0.5772σ₀, ξ₀ = 0.1 (0 if that violates the support).
pub fn moment_start(samples: &[f64], weights: Option<&[f64]>) -> Result<GevParams> {
    let (mut sw, mut m) = (0.0, 0.0);
    for (i, &x) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        sw += w;
        m += w * x;
    }
    m /= sw;
    let var = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| weights.map_or(1.0, |w| w[i]) * (x - m).powi(2))
        .sum::<f64>()
        / sw;
    let sd = var.sqrt();
    if !(sd > 1e-12 * m.abs().max(1.0)) {
        return Err(Error::Degenerate("constant sample, scale collapses to 0".into()));
    }
    let sigma = sd * 6f64.sqrt() / std::f64::consts::PI;
    let mu = m - EULER_GAMMA * sigma;
    let g = GevParams::new(mu, sigma, 0.1)?;
    if gev_loglik(samples, weights, &g) <= SUPPORT_PENALTY {
        return GevParams::new(mu, sigma, 0.0);
    }
    Ok(g)
}

pub fn fit_gev(samples: &[f64]) -> Result<GevParams> {
    fit_gev_with(samples, None, &GevFitOptions::default()).map(|f| f.params)
}

/// Weighted GEV MLE (weights are case multiplicities).
pub fn fit_gev_with(samples: &[f64], weights: Option<&[f64]>, opts: &GevFitOptions) -> Result<GevFit> {
    let n_eff = match weights {
        Some(w) => {
            if w.len() != samples.len() {
                return Err(Error::Invalid("weights and samples differ in length".into()));
            }
            w.iter().sum::<f64>().round() as usize
        }
        None => samples.len(),
    };
    if n_eff < opts.min_samples {
        return Err(Error::Invalid(format!(
            "GEV fit needs at least {} samples, got {n_eff}",
            opts.min_samples
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite sample".into()));
    }
    let moment = moment_start(samples, weights)?;
    let start = match opts.start {
        Some(g) if gev_loglik(samples, weights, &g) > SUPPORT_PENALTY => g,
        _ => moment,
    };
    let (lo, hi) = opts.xi_bounds;
    let objective = |p: &[f64]| -> f64 {
        let xi_c = p[2].clamp(lo, hi);
        let excess = p[2] - xi_c;
        let g = GevParams {
            mu: p[0],
            sigma: p[1].exp(),
            xi: xi_c,
        };
        -(gev_loglik(samples, weights, &g) - 1e4 * excess * excess)
    };
    let x0 = [start.mu, start.sigma.ln(), start.xi.clamp(lo, hi)];
    let warm = opts.start.is_some();
    let step = if warm {
        [0.05 * start.sigma, 0.05, 0.02]
    } else {
        [0.2 * start.sigma, 0.2, 0.1]
    };
    let start_ll = gev_loglik(samples, weights, &start);
    let res = nelder_mead(objective, &x0, &step, &opts.optimizer);
    let params = GevParams {
        mu: res.x[0],
        sigma: res.x[1].exp(),
        xi: res.x[2].clamp(lo, hi),
    };
    let loglik = gev_loglik(samples, weights, &params);
    if !res.converged {
        return Err(Error::NonConvergence {
            iters: res.evals,
            best: vec![params.mu, params.sigma, params.xi],
            best_value: loglik,
        });
    }
    Ok(GevFit {
        params,
        loglik,
        start_loglik: start_ll,
        evals: res.evals,
    })
}

/// One GEV fit per site; failed sites are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalModel {
    pub m1: usize,
    pub m2: usize,
    pub params: Vec<Option<GevParams>>,
}

impl MarginalModel {
    pub fn site(&self, site: usize) -> Option<&GevParams> {
        self.params[site].as_ref()
    }

    pub fn failed_sites(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&s| self.params[s].is_none()).collect()
    }

    pub fn matches(&self, grid: &SpatialGrid) -> bool {
        self.m1 == grid.m1 && self.m2 == grid.m2
    }
}

/// Fit every site's series, optionally with per-time weights.
pub fn fit_marginals(field: &SpaceTimeField, time_weights: Option<&[f64]>, opts: &GevFitOptions) -> MarginalModel {
    fit_marginals_warm(field, time_weights, opts, None)
}

pub(crate) fn fit_marginals_warm(
    field: &SpaceTimeField,
    time_weights: Option<&[f64]>,
    opts: &GevFitOptions,
    warm: Option<&MarginalModel>,
) -> MarginalModel {
    let params = par::map_range(field.n_sites(), |site| {
        let series = field.series(site);
        let mut o = opts.clone();
        if let Some(w) = warm {
            o.start = w.params[site];
        }
        fit_gev_with(&series, time_weights, &o).ok().map(|f| f.params)
    });
    MarginalModel {
        m1: field.grid.m1,
        m2: field.grid.m2,
        params,
    }
}

/// Cell-wise transform to standard Fréchet; lists every out-of-support cell on failure.
pub fn standardize_field(field: &SpaceTimeField, model: &MarginalModel) -> Result<SpaceTimeField> {
    standardize_times(field, model, None)
}

/// As [`standardize_field`] but only the listed times must be in support;
/// other cells are set to NaN-free placeholders (1.0) and must not be used.
pub(crate) fn standardize_times(
    field: &SpaceTimeField,
    model: &MarginalModel,
    times: Option<&[bool]>,
) -> Result<SpaceTimeField> {
    if !model.matches(&field.grid) {
        return Err(Error::Invalid("marginal model does not match the grid".into()));
    }
    if field.scale == Scale::Frechet {
        return Err(Error::Invalid("field is already on the Fréchet scale".into()));
    }
    let failed = model.failed_sites();
    if !failed.is_empty() {
        return Err(Error::Invalid(format!("GEV fit failed at sites {failed:?}")));
    }
    let n = field.n_sites();
    let mut bad = Vec::new();
    let mut values = Vec::with_capacity(n * field.t_len);
    for t in 0..field.t_len {
        let used = times.is_none_or(|m| m[t]);
        for site in 0..n {
            if !used {
                values.push(1.0);
                continue;
            }
            match to_frechet(field.get(site, t), model.params[site].as_ref().unwrap()) {
                Ok(z) => values.push(z),
                Err(_) => {
                    bad.push((site, t + 1));
                    values.push(1.0);
                }
            }
        }
    }
    if !bad.is_empty() {
        bad.sort();
        return Err(Error::OutOfSupport(bad));
    }
    SpaceTimeField::new(field.grid.clone(), field.t_len, values, Scale::Frechet)
}

/// CSV `i1,i2,mu,sigma,xi` (1-based indices); failed sites are written as `nan`.
pub fn write_marginals<W: Write>(model: &MarginalModel, mut w: W) -> Result<()> {
    writeln!(w, "i1,i2,mu,sigma,xi")?;
    for (site, p) in model.params.iter().enumerate() {
        let (i1, i2) = (site % model.m1 + 1, site / model.m1 + 1);
        match p {
            Some(g) => writeln!(w, "{i1},{i2},{:.16e},{:.16e},{:.16e}", g.mu, g.sigma, g.xi)?,
            None => writeln!(w, "{i1},{i2},nan,nan,nan")?,
        }
    }
    Ok(())
}

pub fn save_marginals(model: &MarginalModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_marginals(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_marginals<R: Read>(r: R) -> Result<MarginalModel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() < 5 {
            return Err(Error::Parse("marginal row needs 5 fields".into()));
        }
        let idx = |k: usize| -> Result<usize> {
            rec[k]
                .parse::<usize>()
                .ok()
                .filter(|v| *v >= 1)
                .ok_or_else(|| Error::Parse(format!("bad index '{}'", &rec[k])))
        };
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number '{}'", &rec[k])))
        };
        rows.push((idx(0)?, idx(1)?, num(2)?, num(3)?, num(4)?));
    }
    let m1 = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let m2 = rows.iter().map(|r| r.1).max().unwrap_or(0);
    if m1 == 0 || rows.len() != m1 * m2 {
        return Err(Error::Parse("marginal table does not cover a full grid".into()));
    }
    let mut params = vec![None; m1 * m2];
    let mut seen = vec![false; m1 * m2];
    for (i1, i2, mu, sigma, xi) in rows {
        let k = (i2 - 1) * m1 + (i1 - 1);
        if seen[k] {
            return Err(Error::Parse(format!("duplicate marginal row ({i1}, {i2})")));
        }
        seen[k] = true;
        params[k] = GevParams::new(mu, sigma, xi).ok();
    }
    Ok(MarginalModel { m1, m2, params })
}

pub fn load_marginals(path: impl AsRef<Path>) -> Result<MarginalModel> {
    read_marginals(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn draws(g: &GevParams, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, &[0]);
        (0..n)
            .map(|_| g.quantile(rng.random_range(1e-300..1.0)))
            .collect()
    }

    #[test]
    fn frechet_transform_examples() {
        let g = GevParams::new(0.0, 1.0, 0.0).unwrap();
        assert!((to_frechet(0.0, &g).unwrap() - 1.0).abs() < 1e-15);
        let x = (-1.0 / 0.5f64.ln()).ln();
        assert!((to_frechet(x, &g).unwrap() - 1.0 / 2f64.ln()).abs() < 1e-14);
        assert_eq!(from_frechet(1.0, &g), 0.0);
        let g2 = GevParams::new(1.3, 0.7, 0.2).unwrap();
        let q = g2.quantile((-1.0f64).exp());
        assert!((to_frechet(q, &g2).unwrap() - 1.0).abs() < 1e-13);
        // independent quantile formula: μ + σ((−log p)^{−ξ} − 1)/ξ at p = e^{−1}
        let g3 = GevParams::new(0.0, 1.0, 0.2).unwrap();
        assert!((from_frechet(1.0, &g3) - 0.0).abs() < 1e-15);
        let p: f64 = 0.9;
        let want = ((-p.ln()).powf(-0.2) - 1.0) / 0.2;
        assert!((g3.quantile(p) - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_is_an_error() {
        let g = GevParams::new(0.0, 1.0, 0.5).unwrap();
        assert!(to_frechet(-2.0, &g).is_err());
        assert!(to_frechet(-2.0 + 1e-9, &g).is_ok());
        let g = GevParams::new(0.0, 1.0, -0.5).unwrap();
        assert!(to_frechet(2.0, &g).is_err());
    }

    #[test]
    fn round_trip_on_quantile_grid() {
        for xi in [-0.4, -1e-9, 0.0, 1e-6, 0.3] {
            let g = GevParams::new(2.0, 0.5, xi).unwrap();
            for k in 1..100 {
                let x = g.quantile(k as f64 / 100.0);
                let back = from_frechet(to_frechet(x, &g).unwrap(), &g);
                assert!((back - x).abs() <= 1e-10 * x.abs().max(1.0), "xi={xi} x={x} back={back}");
            }
        }
    }

    #[test]
    fn constant_sample_is_degenerate() {
        assert!(matches!(fit_gev(&[3.0; 50]), Err(Error::Degenerate(_))));
        assert!(fit_gev(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn recovers_gumbel() {
        let g = GevParams::new(0.0, 1.0, 0.0).unwrap();
        let x = draws(&g, 100_000, 1);
        let fit = fit_gev_with(&x, None, &GevFitOptions::default()).unwrap();
        let p = fit.params;
        assert!(fit.loglik >= fit.start_loglik);
        assert!(p.mu.abs() < 0.02 && (p.sigma - 1.0).abs() < 0.02 && p.xi.abs() < 0.02, "{p:?}");
    }

    #[test]
    fn recovers_frechet_type() {
        let g = GevParams::new(2.0, 0.5, 0.2).unwrap();
        let x = draws(&g, 100_000, 2);
        let p = fit_gev(&x).unwrap();
        assert!((p.mu - 2.0).abs() < 0.03 && (p.sigma - 0.5).abs() < 0.03 && (p.xi - 0.2).abs() < 0.03, "{p:?}");
    }

    #[test]
    fn weights_act_as_multiplicities() {
        let g = GevParams::new(1.0, 2.0, 0.1).unwrap();
        let x = draws(&g, 200, 3);
        let w: Vec<f64> = (0..200).map(|i| (i % 3) as f64).collect();
        let expanded: Vec<f64> = x
            .iter()
            .zip(&w)
            .flat_map(|(v, k)| std::iter::repeat_n(*v, *k as usize))
            .collect();
        let a = fit_gev_with(&x, Some(&w), &GevFitOptions::default()).unwrap().params;
        let b = fit_gev(&expanded).unwrap();
        assert!((a.mu - b.mu).abs() < 1e-5 && (a.sigma - b.sigma).abs() < 1e-5 && (a.xi - b.xi).abs() < 1e-5);
    }

    #[test]
    fn marginal_csv_round_trip() {
        let m = MarginalModel {
            m1: 2,
            m2: 1,
            params: vec![Some(GevParams::new(0.1, 1.2, -0.3).unwrap()), None],
        };
        let mut buf = Vec::new();
        write_marginals(&m, &mut buf).unwrap();
        assert_eq!(read_marginals(buf.as_slice()).unwrap(), m);
    }
}
