//! Pairwise log-likelihoods, the two-step estimator and the term bootstrap.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::brown_resnick::{log_density_fast, Semivariogram};
use crate::error::{Error, Result};
use crate::gev::{fit_marginals_warm, standardize_times, GevFitOptions, MarginalModel};
use crate::grid::{build_mask, DesignMask, Scale, SpaceTimeField, SpatialGrid};
use crate::model::{ModelParams, StPair};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::par;
use crate::rng::substream;

/// Log-density terms below this are clipped and counted.
pub const LOG_DENSITY_FLOOR: f64 = -1e8;

/// The admissible parameter set: a box in (κ, H, τ, a) minus the balls
/// ‖τ − h/u‖ < ε around every h in the mask and u = 1..p.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiEpsilon {
    pub eps: f64,
    pub centers: Vec<[f64; 2]>,
}

impl PsiEpsilon {
    /// min(1/2, μ/p)/10.
    pub fn default_eps(mesh: f64, p: usize) -> f64 {
        0.5f64.min(mesh / p as f64) / 10.0
    }

    pub fn new(eps: f64, mask: &DesignMask) -> Result<Self> {
        let bound = 0.5f64.min(mask.mesh / mask.p as f64);
        if !(eps > 0.0 && eps < bound) {
            return Err(Error::Invalid(format!("epsilon must lie in (0, {bound}), got {eps}")));
        }
        let mut centers = Vec::new();
        for u in 1..=mask.p {
            for h in mask.lags() {
                centers.push([h[0] / u as f64, h[1] / u as f64]);
            }
        }
        Ok(Self { eps, centers })
    }

    pub fn kappa_bounds(&self) -> (f64, f64) {
        (self.eps, 1.0 / self.eps)
    }

    pub fn hurst_bounds(&self) -> (f64, f64) {
        (self.eps, 1.0 - self.eps)
    }

    pub fn tau_bound(&self) -> f64 {
        1.0 / self.eps
    }

    pub fn a_bounds(&self) -> (f64, f64) {
        (self.eps, 1.0 - self.eps)
    }

    /// Distance from τ to the nearest excluded centre.
    pub fn center_distance(&self, tau: [f64; 2]) -> f64 {
        self.centers
            .iter()
            .map(|c| (tau[0] - c[0]).hypot(tau[1] - c[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains_tau(&self, tau: [f64; 2]) -> bool {
        let b = self.tau_bound();
        tau[0].abs() <= b && tau[1].abs() <= b && self.center_distance(tau) >= self.eps
    }

    pub fn contains(&self, psi: &ModelParams) -> bool {
        let within = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
        within(psi.sv.kappa, self.kappa_bounds())
            && within(psi.sv.hurst, self.hurst_bounds())
            && within(psi.a, self.a_bounds())
            && self.contains_tau(psi.tau)
    }

    /// Push τ radially out of any ball containing it. Returns the projected point
    /// and the total depth by which it was inside.
    pub fn project_tau(&self, tau: [f64; 2]) -> ([f64; 2], f64) {
        let mut t = tau;
        let mut depth = 0.0;
        for _ in 0..16 {
            let mut moved = false;
            for c in &self.centers {
                let (dx, dy) = (t[0] - c[0], t[1] - c[1]);
                let d = dx.hypot(dy);
                if d < self.eps {
                    depth += self.eps - d;
                    let (ux, uy) = if d > 0.0 { (dx / d, dy / d) } else { (1.0, 0.0) };
                    let r = self.eps * (1.0 + 1e-9);
                    t = [c[0] + r * ux, c[1] + r * uy];
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        (t, depth)
    }
}

/// Value of a pairwise log-likelihood with bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlEval {
    pub value: f64,
    /// Terms evaluated (times with zero weight are skipped).
    pub terms: usize,
    pub clipped: usize,
}

struct LagPlan {
    offset: (i64, i64),
    u: usize,
    pairs: Vec<(u32, u32)>,
}

struct Plan {
    n: usize,
    t_len: usize,
    mesh: f64,
    lags: Vec<LagPlan>,
}

impl Plan {
    fn new(grid: &SpatialGrid, t_len: usize, mask: &DesignMask, us: &[usize]) -> Self {
        let mut lags = Vec::new();
        for &u in us {
            for &o in &mask.offsets {
                let pairs: Vec<(u32, u32)> = (0..grid.n_sites())
                    .filter_map(|s| grid.offset(s, o).map(|s2| (s as u32, s2 as u32)))
                    .collect();
                if !pairs.is_empty() {
                    lags.push(LagPlan { offset: o, u, pairs });
                }
            }
        }
        Self {
            n: grid.n_sites(),
            t_len,
            mesh: grid.mesh,
            lags,
        }
    }

    fn lag(&self, l: &LagPlan) -> [f64; 2] {
        [self.mesh * l.offset.0 as f64, self.mesh * l.offset.1 as f64]
    }
}

/// ln Z alongside Z for a Fréchet field.
struct Prepared<'a> {
    z: &'a [f64],
    lnz: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(field: &'a SpaceTimeField) -> Result<Self> {
        if field.scale != Scale::Frechet {
            return Err(Error::Invalid("pairwise likelihood needs a Fréchet-scale field".into()));
        }
        let z = field.values();
        Ok(Self {
            z,
            lnz: z.iter().map(|v| v.ln()).collect(),
        })
    }
}

#[derive(Clone, Copy)]
struct LagCoef {
    c: f64,
    lnc: f64,
    s: f64,
}

fn evaluate(prep: &Prepared, plan: &Plan, coefs: &[LagCoef], weights: Option<&[f64]>) -> Result<PlEval> {
    let n = plan.n;
    let per_t = par::map_range(plan.t_len, |t| -> Result<(f64, usize, usize)> {
        let w = weights.map_or(1.0, |w| w[t]);
        if w == 0.0 {
            return Ok((0.0, 0, 0));
        }
        let mut lag_sums = Vec::with_capacity(plan.lags.len());
        let (mut terms, mut clipped) = (0usize, 0usize);
        for (l, k) in plan.lags.iter().zip(coefs) {
            let t2 = t + l.u;
            if t2 >= plan.t_len {
                continue;
            }
            let mut acc = 0.0;
            for &(s1, s2) in &l.pairs {
                let i1 = t * n + s1 as usize;
                let i2 = t2 * n + s2 as usize;
                let (l1, l2) = (prep.lnz[i1], prep.lnz[i2]);
                let mut v = log_density_fast(prep.z[i1], prep.z[i2], l1, l2, l2 - l1 - k.lnc, k.c, k.s);
                if v.is_nan() || v == f64::INFINITY {
                    return Err(Error::NonFiniteTerm {
                        site: s1 as usize,
                        t: t + 1,
                        lag: (l.offset.0, l.offset.1, l.u),
                    });
                }
                if v < LOG_DENSITY_FLOOR {
                    v = LOG_DENSITY_FLOOR;
                    clipped += 1;
                }
                acc += v;
            }
            terms += l.pairs.len();
            lag_sums.push(acc);
        }
        Ok((w * par::tree_sum(&lag_sums), terms, clipped))
    });
    let mut vals = Vec::with_capacity(per_t.len());
    let (mut terms, mut clipped) = (0, 0);
    for r in per_t {
        let (v, k, c) = r?;
        vals.push(v);
        terms += k;
        clipped += c;
    }
    Ok(PlEval {
        value: par::tree_sum(&vals),
        terms,
        clipped,
    })
}

fn check_weights(weights: Option<&[f64]>, t_len: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != t_len || w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Invalid("time weights must be finite, nonnegative, one per time".into()));
        }
    }
    Ok(())
}

fn spatial_coefs(plan: &Plan, sv: &Semivariogram) -> Vec<LagCoef> {
    plan.lags
        .iter()
        .map(|l| LagCoef {
            c: 1.0,
            lnc: 0.0,
            s: (2.0 * sv.gamma(plan.lag(l))).sqrt(),
        })
        .collect()
}

fn spacetime_coefs(plan: &Plan, psi: &ModelParams) -> Result<Vec<LagCoef>> {
    plan.lags
        .iter()
        .map(|l| {
            let g = psi.lag_gamma(StPair::new(plan.lag(l), l.u));
            if g == 0.0 {
                return Err(Error::DegeneratePair);
            }
            let c = psi.a.powi(l.u as i32);
            Ok(LagCoef {
                c,
                lnc: c.ln(),
                s: (2.0 * g).sqrt(),
            })
        })
        .collect()
}

fn spatial_plan(field: &SpaceTimeField, mask: &DesignMask) -> Result<Plan> {
    if !mask.spatial_only {
        return Err(Error::Invalid("spatial likelihood needs a half-plane (spatial-only) mask".into()));
    }
    Ok(Plan::new(&field.grid, field.t_len, mask, &[0]))
}

fn spacetime_plan(field: &SpaceTimeField, mask: &DesignMask) -> Result<Plan> {
    if mask.spatial_only {
        return Err(Error::Invalid("space-time likelihood needs a full-disk mask".into()));
    }
    let us: Vec<usize> = (1..=mask.p).collect();
    Ok(Plan::new(&field.grid, field.t_len, mask, &us))
}

/// Σ_t Σ_s Σ_h log f_{h,0}(Z(s,t), Z(s+h,t); κ, H).
pub fn spatial_pl(field: &SpaceTimeField, mask: &DesignMask, kappa: f64, hurst: f64) -> Result<PlEval> {
    spatial_pl_weighted(field, mask, kappa, hurst, None)
}

/// As [`spatial_pl`] with each time's terms multiplied by `weights[t]`.
pub fn spatial_pl_weighted(
    field: &SpaceTimeField,
    mask: &DesignMask,
    kappa: f64,
    hurst: f64,
    weights: Option<&[f64]>,
) -> Result<PlEval> {
    check_weights(weights, field.t_len)?;
    let sv = Semivariogram::new(kappa, hurst)?;
    let prep = Prepared::new(field)?;
    let plan = spatial_plan(field, mask)?;
    evaluate(&prep, &plan, &spatial_coefs(&plan, &sv), weights)
}

/// Σ_t Σ_s Σ_h Σ_{u ≤ p, t+u ≤ T} log f_{h,u}(Z(s,t), Z(s+h,t+u); ψ). Rejects ψ ∉ Ψ_ε.
pub fn spacetime_pl(field: &SpaceTimeField, mask: &DesignMask, psi: &ModelParams, space: &PsiEpsilon) -> Result<PlEval> {
    spacetime_pl_weighted(field, mask, psi, space, None)
}

/// As [`spacetime_pl`] with weights on the first time index t.
pub fn spacetime_pl_weighted(
    field: &SpaceTimeField,
    mask: &DesignMask,
    psi: &ModelParams,
    space: &PsiEpsilon,
    weights: Option<&[f64]>,
) -> Result<PlEval> {
    check_weights(weights, field.t_len)?;
    if !space.contains(psi) {
        return Err(Error::OutsideParameterSpace(format!(
            "psi = {:?} is outside Psi_epsilon (epsilon = {})",
            psi.as_array(),
            space.eps
        )));
    }
    let prep = Prepared::new(field)?;
    let plan = spacetime_plan(field, mask)?;
    evaluate(&prep, &plan, &spacetime_coefs(&plan, psi)?, weights)
}

/// Number of terms in the spatial likelihood.
pub fn spatial_term_count(grid: &SpatialGrid, mask: &DesignMask, t_len: usize) -> usize {
    mask.offsets.iter().map(|&o| grid.overlap_count(o)).sum::<usize>() * t_len
}

/// Number of terms in the space-time likelihood: Σ_h overlap(h) · Σ_{u ≤ p} (T − u).
pub fn spacetime_term_count(grid: &SpatialGrid, mask: &DesignMask, t_len: usize) -> usize {
    let per_t: usize = mask.offsets.iter().map(|&o| grid.overlap_count(o)).sum();
    let times: usize = (1..=mask.p).map(|u| t_len.saturating_sub(u)).sum();
    per_t * times
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Mask radius in cells for the spatial step.
    pub r_spatial: f64,
    /// Mask radius in cells for the space-time step.
    pub r_spacetime: f64,
    pub p: usize,
    /// Defaults to [`PsiEpsilon::default_eps`].
    pub eps: Option<f64>,
    pub optimizer: NelderMeadOptions,
    /// Simplex runs started from the best coarse-grid points in the second step.
    pub restarts: usize,
}

impl FitOptions {
    /// Masks covering every pair of the grid, p = 1.
    pub fn for_grid(grid: &SpatialGrid) -> Self {
        let r = ((grid.m1 - 1) as f64).hypot((grid.m2 - 1) as f64).ceil().max(1.0);
        Self {
            r_spatial: r,
            r_spacetime: r,
            p: 1,
            eps: None,
            optimizer: NelderMeadOptions {
                max_evals: 600,
                f_tol: 1e-10,
                x_tol: 1e-5,
            },
            restarts: 5,
        }
    }

    fn masks(&self, mesh: f64) -> Result<(DesignMask, DesignMask)> {
        Ok((
            build_mask(mesh, self.r_spatial, 1, true)?,
            build_mask(mesh, self.r_spacetime, self.p, false)?,
        ))
    }

    fn space(&self, mesh: f64, mask_st: &DesignMask) -> Result<PsiEpsilon> {
        PsiEpsilon::new(self.eps.unwrap_or_else(|| PsiEpsilon::default_eps(mesh, self.p)), mask_st)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub eps: f64,
    pub spatial_loglik: f64,
    pub spacetime_loglik: f64,
    pub spatial_terms: usize,
    pub spacetime_terms: usize,
    pub clipped: usize,
    pub spatial_evals: usize,
    pub spacetime_evals: usize,
    /// Best objective after each simplex iteration of the final runs (negated log-likelihood).
    pub trace: Vec<f64>,
    pub boundary: bool,
    pub warnings: Vec<String>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct SpatialStep {
    kappa: f64,
    hurst: f64,
    eval: PlEval,
    evals: usize,
    trace: Vec<f64>,
}

fn fit_spatial(
    field: &SpaceTimeField,
    mask: &DesignMask,
    space: &PsiEpsilon,
    weights: Option<&[f64]>,
    warm: Option<(f64, f64)>,
    opts: &NelderMeadOptions,
) -> Result<SpatialStep> {
    let prep = Prepared::new(field)?;
    let plan = spatial_plan(field, mask)?;
    let (klo, khi) = space.kappa_bounds();
    let (hlo, hhi) = space.hurst_bounds();
    let decode = |x: &[f64]| -> (f64, f64, f64) {
        let lk = x[0].clamp(klo.ln(), khi.ln());
        let pen = 1e3 * (x[0] - lk).powi(2);
        (lk.exp(), hlo + (hhi - hlo) * sigmoid(x[1]), pen)
    };
    let encode = |k: f64, h: f64| vec![k.clamp(klo, khi).ln(), logit(((h - hlo) / (hhi - hlo)).clamp(1e-9, 1.0 - 1e-9))];
    let mut evals = 0usize;
    let mut objective = |x: &[f64]| -> f64 {
        evals += 1;
        let (k, h, pen) = decode(x);
        let sv = Semivariogram { kappa: k, hurst: h };
        match evaluate(&prep, &plan, &spatial_coefs(&plan, &sv), weights) {
            Ok(e) => -e.value + pen,
            Err(_) => f64::INFINITY,
        }
    };
    let x0 = match warm {
        Some((k, h)) => encode(k, h),
        None => {
            let mut best = (f64::INFINITY, encode(field.grid.mesh, 0.5));
            for km in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
                for h in [0.2, 0.5, 0.8] {
                    let x = encode(km * field.grid.mesh, h);
                    let v = objective(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
            best.1
        }
    };
    let step = if warm.is_some() { [0.1, 0.2] } else { [0.5, 0.5] };
    let res = nelder_mead(&mut objective, &x0, &step, opts);
    let (kappa, hurst, _) = decode(&res.x);
    let sv = Semivariogram::new(kappa, hurst)?;
    let eval = evaluate(&prep, &plan, &spatial_coefs(&plan, &sv), weights)?;
    Ok(SpatialStep {
        kappa,
        hurst,
        eval,
        evals,
        trace: res.trace,
    })
}

struct TemporalStep {
    tau: [f64; 2],
    a: f64,
    eval: PlEval,
    evals: usize,
    trace: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn fit_temporal(
    field: &SpaceTimeField,
    mask: &DesignMask,
    space: &PsiEpsilon,
    sv: Semivariogram,
    weights: Option<&[f64]>,
    warm: Option<([f64; 2], f64)>,
    opts: &NelderMeadOptions,
    restarts: usize,
) -> Result<TemporalStep> {
    let prep = Prepared::new(field)?;
    let plan = spacetime_plan(field, mask)?;
    let (alo, ahi) = space.a_bounds();
    let tb = space.tau_bound();
    let decode = |x: &[f64]| -> (ModelParams, f64) {
        let raw = [x[0].clamp(-tb, tb), x[1].clamp(-tb, tb)];
        let mut pen = 1e3 * ((x[0] - raw[0]).powi(2) + (x[1] - raw[1]).powi(2));
        let (tau, depth) = space.project_tau(raw);
        pen += 10.0 * (depth / space.eps).powi(2);
        let a = alo + (ahi - alo) * sigmoid(x[2]);
        (ModelParams { sv, tau, a }, pen)
    };
    let encode = |tau: [f64; 2], a: f64| vec![tau[0], tau[1], logit(((a - alo) / (ahi - alo)).clamp(1e-9, 1.0 - 1e-9))];
    let mut evals = 0usize;
    let mut objective = |x: &[f64]| -> f64 {
        evals += 1;
        let (psi, pen) = decode(x);
        match spacetime_coefs(&plan, &psi).and_then(|c| evaluate(&prep, &plan, &c, weights)) {
            Ok(e) => -e.value + pen,
            Err(_) => f64::INFINITY,
        }
    };
    let mesh = field.grid.mesh;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut run = |x0: Vec<f64>, step: [f64; 3], objective: &mut dyn FnMut(&[f64]) -> f64| {
        let res = nelder_mead(objective, &x0, &step, opts);
        if best.as_ref().is_none_or(|b| res.value < b.0) {
            best = Some((res.value, res.x, res.trace));
        }
    };
    match warm {
        Some((tau, a)) => run(encode(tau, a), [0.1 * mesh, 0.1 * mesh, 0.3], &mut objective),
        None => {
            let mut coarse = Vec::new();
            let dirs = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
            for (dx, dy) in dirs {
                for sc in [0.25, 0.5, 1.0] {
                    for a in [0.3, 0.6, 0.9] {
                        let tau = space.project_tau([sc * mesh * dx, sc * mesh * dy]).0;
                        let x = encode(tau, a);
                        let v = objective(&x);
                        coarse.push((v, x));
                    }
                }
            }
            coarse.sort_by(|p, q| p.0.total_cmp(&q.0));
            let loose = NelderMeadOptions {
                max_evals: opts.max_evals,
                f_tol: opts.f_tol.max(1e-7),
                x_tol: opts.x_tol.max(1e-2 * mesh),
            };
            let mut scout: Option<(f64, Vec<f64>)> = None;
            for (_, x) in coarse.into_iter().take(restarts.max(1)) {
                let res = nelder_mead(&mut objective, &x, &[0.25 * mesh, 0.25 * mesh, 0.5], &loose);
                if scout.as_ref().is_none_or(|b| res.value < b.0) {
                    scout = Some((res.value, res.x));
                }
            }
            let (_, x) = scout.expect("at least one restart");
            run(x, [0.05 * mesh, 0.05 * mesh, 0.1], &mut objective);
        }
    }
    let (_, x, trace) = best.expect("at least one simplex run");
    let (psi, _) = decode(&x);
    let eval = evaluate(&prep, &plan, &spacetime_coefs(&plan, &psi)?, weights)?;
    Ok(TemporalStep {
        tau: psi.tau,
        a: psi.a,
        eval,
        evals,
        trace,
    })
}

/// Step 1 maximizes the spatial likelihood over (κ, H); step 2 holds them fixed and
/// maximizes the space-time likelihood over (τ, a) inside Ψ_ε.
pub fn fit_two_step(field: &SpaceTimeField, opts: &FitOptions) -> Result<FitResult> {
    fit_two_step_weighted(field, field, opts, None, None)
}

fn fit_two_step_weighted(
    spatial_field: &SpaceTimeField,
    temporal_field: &SpaceTimeField,
    opts: &FitOptions,
    weights: Option<&[f64]>,
    warm: Option<&ModelParams>,
) -> Result<FitResult> {
    let mesh = spatial_field.grid.mesh;
    let (mask_s, mask_st) = opts.masks(mesh)?;
    let space = opts.space(mesh, &mask_st)?;
    let s1 = fit_spatial(
        spatial_field,
        &mask_s,
        &space,
        weights,
        warm.map(|w| (w.sv.kappa, w.sv.hurst)),
        &opts.optimizer,
    )?;
    let sv = Semivariogram::new(s1.kappa, s1.hurst)?;
    let s2 = fit_temporal(
        temporal_field,
        &mask_st,
        &space,
        sv,
        weights,
        warm.map(|w| (w.tau, w.a)),
        &opts.optimizer,
        opts.restarts,
    )?;
    let params = ModelParams { sv, tau: s2.tau, a: s2.a };
    let mut warnings = Vec::new();
    let near = |x: f64, (lo, hi): (f64, f64)| (x - lo) < 1e-4 * (1.0 + lo.abs()) || (hi - x) < 1e-4 * (1.0 + hi.abs());
    let mut boundary = false;
    if space.center_distance(params.tau) < space.eps * 1.001 {
        boundary = true;
        warnings.push("boundary solution: tau lies on an excluded ball around some h/u".into());
    }
    if near(params.a, space.a_bounds()) || near(params.sv.kappa, space.kappa_bounds()) || near(params.sv.hurst, space.hurst_bounds()) {
        boundary = true;
        warnings.push("boundary solution: a parameter lies on the edge of its range".into());
    }
    let clipped = s1.eval.clipped + s2.eval.clipped;
    if clipped > 0 {
        warnings.push(format!("{clipped} log-density terms clipped at {LOG_DENSITY_FLOOR:e}"));
    }
    let mut trace = s1.trace;
    trace.extend(s2.trace);
    Ok(FitResult {
        params,
        eps: space.eps,
        spatial_loglik: s1.eval.value,
        spacetime_loglik: s2.eval.value,
        spatial_terms: s1.eval.terms,
        spacetime_terms: s2.eval.terms,
        clipped,
        spatial_evals: s1.evals,
        spacetime_evals: s2.evals,
        trace,
        boundary,
        warnings,
    })
}

/// Refit with ε scaled by each factor (the default report uses ½, 1 and 2).
pub fn epsilon_sensitivity(field: &SpaceTimeField, opts: &FitOptions, factors: &[f64]) -> Result<Vec<FitResult>> {
    let base = opts.eps.unwrap_or_else(|| PsiEpsilon::default_eps(field.grid.mesh, opts.p));
    let bound = 0.5f64.min(field.grid.mesh / opts.p as f64);
    factors
        .iter()
        .map(|f| {
            let mut o = opts.clone();
            o.eps = Some((base * f).min(bound * 0.999));
            fit_two_step(field, &o)
        })
        .collect()
}

pub const PARAM_NAMES: [&str; 5] = ["kappa", "hurst", "tau1", "tau2", "a"];

impl FitResult {
    pub fn write_kv<W: Write>(&self, mut w: W) -> Result<()> {
        let p = self.params.as_array();
        let mut s = String::new();
        for (name, v) in PARAM_NAMES.iter().zip(p) {
            writeln!(s, "{name}={v:.17e}").unwrap();
        }
        writeln!(s, "epsilon={:.17e}", self.eps).unwrap();
        writeln!(s, "spatial_loglik={:.17e}", self.spatial_loglik).unwrap();
        writeln!(s, "spacetime_loglik={:.17e}", self.spacetime_loglik).unwrap();
        writeln!(s, "spatial_terms={}", self.spatial_terms).unwrap();
        writeln!(s, "spacetime_terms={}", self.spacetime_terms).unwrap();
        writeln!(s, "clipped={}", self.clipped).unwrap();
        writeln!(s, "spatial_evals={}", self.spatial_evals).unwrap();
        writeln!(s, "spacetime_evals={}", self.spacetime_evals).unwrap();
        writeln!(s, "boundary={}", self.boundary).unwrap();
        for (i, msg) in self.warnings.iter().enumerate() {
            writeln!(s, "warning.{i}={msg}").unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_kv(std::io::BufWriter::new(f))
    }

    /// Parse the key=value form written by [`FitResult::write_kv`]; the trace is not stored.
    pub fn read_kv<R: Read>(r: R) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let mut warnings = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))?;
            if k.starts_with("warning.") {
                warnings.push(v.to_string());
            } else {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<&String> { map.get(k).ok_or_else(|| Error::Parse(format!("missing key '{k}'"))) };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number for '{k}'")))
        };
        let count = |k: &str| -> Result<usize> { map.get(k).map_or(Ok(0), |v| v.parse().map_err(|_| Error::Parse(format!("bad count for '{k}'")))) };
        let params = ModelParams::new(num("kappa")?, num("hurst")?, [num("tau1")?, num("tau2")?], num("a")?)?;
        Ok(Self {
            params,
            eps: num("epsilon").unwrap_or(f64::NAN),
            spatial_loglik: num("spatial_loglik").unwrap_or(f64::NAN),
            spacetime_loglik: num("spacetime_loglik").unwrap_or(f64::NAN),
            spatial_terms: count("spatial_terms")?,
            spacetime_terms: count("spacetime_terms")?,
            clipped: count("clipped")?,
            spatial_evals: count("spatial_evals")?,
            spacetime_evals: count("spacetime_evals")?,
            trace: Vec::new(),
            boundary: map.get("boundary").is_some_and(|v| v == "true"),
            warnings,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_kv(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub gev: GevFitOptions,
    /// Optimizer settings for the warm-started refits.
    pub optimizer: NelderMeadOptions,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, level: f64, seed: u64) -> Self {
        Self {
            replicates,
            level,
            seed,
            gev: GevFitOptions::default(),
            optimizer: NelderMeadOptions {
                max_evals: 300,
                f_tol: 1e-9,
                x_tol: 1e-4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInterval {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub intervals: Vec<ParamInterval>,
    /// Successful replicate estimates in replicate order.
    pub estimates: Vec<[f64; 5]>,
    pub failed: usize,
    pub level: f64,
    pub replicates: usize,
}

impl BootstrapResult {
    pub fn covers(&self, truth: &ModelParams) -> [bool; 5] {
        let t = truth.as_array();
        std::array::from_fn(|i| self.intervals[i].lo <= t[i] && t[i] <= self.intervals[i].hi)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["param", "lo", "hi", "level", "B"])
            .map_err(|e| Error::Parse(e.to_string()))?;
        for iv in &self.intervals {
            wr.write_record([
                iv.name.to_string(),
                format!("{:.17e}", iv.lo),
                format!("{:.17e}", iv.hi),
                format!("{}", self.level),
                format!("{}", self.replicates),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Time-index resampling weights (multiplicities) for replicate `b`.
pub fn bootstrap_weights(t_len: usize, seed: u64, b: usize) -> Vec<f64> {
    use rand::Rng as _;
    let mut rng = substream(seed, &[2, b as u64]);
    let mut w = vec![0.0; t_len];
    for _ in 0..t_len {
        w[rng.random_range(0..t_len)] += 1.0;
    }
    w
}

/// Term bootstrap over time indices. Each replicate refits the margins on the resampled
/// times and then (κ, H); (τ, a) are refitted on the full-data Fréchet field with the
/// resampled times weighting the first index of each pair. Resampled times enter with
/// their multiplicity. Returns equal-tailed percentile intervals.
pub fn bootstrap_ci(
    raw: &SpaceTimeField,
    marginals: &MarginalModel,
    full_fit: &FitResult,
    opts: &FitOptions,
    boot: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if boot.replicates < 50 {
        return Err(Error::Invalid(format!("bootstrap needs B >= 50, got {}", boot.replicates)));
    }
    if !(boot.level > 0.0 && boot.level < 1.0) {
        return Err(Error::Invalid(format!("confidence level must lie in (0, 1), got {}", boot.level)));
    }
    let full = standardize_times(raw, marginals, None)?;
    let mut fit_opts = opts.clone();
    fit_opts.optimizer = boot.optimizer.clone();
    fit_opts.eps = Some(full_fit.eps);
    let reps = par::map_range(boot.replicates, |b| -> Option<[f64; 5]> {
        let w = bootstrap_weights(raw.t_len, boot.seed, b);
        let used: Vec<bool> = w.iter().map(|x| *x > 0.0).collect();
        let m = fit_marginals_warm(raw, Some(&w), &boot.gev, Some(marginals));
        let zb = standardize_times(raw, &m, Some(&used)).ok()?;
        fit_two_step_weighted(&zb, &full, &fit_opts, Some(&w), Some(&full_fit.params))
            .ok()
            .map(|f| f.params.as_array())
    });
    let estimates: Vec<[f64; 5]> = reps.iter().flatten().copied().collect();
    let failed = boot.replicates - estimates.len();
    if failed * 5 > boot.replicates {
        return Err(Error::BootstrapFailures {
            failed,
            total: boot.replicates,
        });
    }
    let alpha = 1.0 - boot.level;
    let intervals = (0..5)
        .map(|i| {
            let mut v: Vec<f64> = estimates.iter().map(|e| e[i]).collect();
            v.sort_by(f64::total_cmp);
            ParamInterval {
                name: PARAM_NAMES[i],
                lo: quantile_sorted(&v, alpha / 2.0),
                hi: quantile_sorted(&v, 1.0 - alpha / 2.0),
            }
        })
        .collect();
    Ok(BootstrapResult {
        intervals,
        estimates,
        failed,
        level: boot.level,
        replicates: boot.replicates,
    })
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pair_log_density, simulate_st};

    fn tiny_field(values: Vec<f64>, m1: usize, m2: usize, t_len: usize) -> SpaceTimeField {
        let g = SpatialGrid::new(1.0, m1, m2, [0.0, 0.0]).unwrap();
        SpaceTimeField::new(g, t_len, values, Scale::Frechet).unwrap()
    }

    #[test]
    fn two_sites_match_pair_density() {
        let f = tiny_field(vec![0.7, 2.2], 2, 1, 1);
        let mask = build_mask(1.0, 1.0, 1, true).unwrap();
        let pl = spatial_pl(&f, &mask, 1.5, 0.4).unwrap();
        let psi = ModelParams::new(1.5, 0.4, [0.3, 0.0], 0.5).unwrap();
        let direct = pair_log_density(StPair::new([1.0, 0.0], 0), 0.7, 2.2, &psi).unwrap();
        assert!((pl.value - direct).abs() < 1e-12);
        assert_eq!(pl.terms, 1);
    }

    #[test]
    fn single_pair_spacetime() {
        let f = tiny_field(vec![0.7, 5.0, 3.0, 1.1], 2, 1, 2);
        let mask = build_mask(1.0, 1.0, 1, false).unwrap();
        let psi = ModelParams::new(1.5, 0.4, [0.3, 0.2], 0.6).unwrap();
        let space = PsiEpsilon::new(0.05, &mask).unwrap();
        let pl = spacetime_pl(&f, &mask, &psi, &space).unwrap();
        // pairs (s,1) -> (s+h,2) for s, s+h in {0,1}
        let mut expect = 0.0;
        for s1 in 0..2 {
            for s2 in 0..2 {
                let h = [s2 as f64 - s1 as f64, 0.0];
                expect += pair_log_density(StPair::new(h, 1), f.get(s1, 0), f.get(s2, 1), &psi).unwrap();
            }
        }
        assert!((pl.value - expect).abs() < 1e-12);
        assert_eq!(pl.terms, spacetime_term_count(&f.grid, &mask, 2));
    }

    #[test]
    fn excluded_tau_is_rejected() {
        let f = tiny_field(vec![1.0; 8], 2, 2, 2);
        let mask = build_mask(1.0, 1.0, 1, false).unwrap();
        let space = PsiEpsilon::new(0.05, &mask).unwrap();
        let psi = ModelParams::new(1.5, 0.4, [1.02, 0.0], 0.6).unwrap();
        assert!(matches!(
            spacetime_pl(&f, &mask, &psi, &space),
            Err(Error::OutsideParameterSpace(_))
        ));
        let (t, depth) = space.project_tau([1.02, 0.0]);
        assert!(depth > 0.0 && space.contains_tau(t));
    }

    #[test]
    fn doubling_iid_time_doubles_value() {
        let g = SpatialGrid::new(1.0, 3, 3, [0.0, 0.0]).unwrap();
        let psi = ModelParams::new(2.0, 0.5, [0.0, 0.0], 0.5).unwrap();
        let f = simulate_st(&g, 4, &psi, 3).unwrap();
        let mut v = f.values().to_vec();
        v.extend_from_slice(f.values());
        let f2 = SpaceTimeField::new(g, 8, v, Scale::Frechet).unwrap();
        let mask = build_mask(1.0, 2.0, 1, true).unwrap();
        let a = spatial_pl(&f, &mask, 2.0, 0.5).unwrap().value;
        let b = spatial_pl(&f2, &mask, 2.0, 0.5).unwrap().value;
        assert!((b - 2.0 * a).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn weights_equal_multiplicities() {
        let g = SpatialGrid::new(1.0, 3, 2, [0.0, 0.0]).unwrap();
        let psi = ModelParams::new(2.0, 0.5, [1.0, 0.0], 0.5).unwrap();
        let f = simulate_st(&g, 3, &psi, 5).unwrap();
        let mask = build_mask(1.0, 1.5, 1, true).unwrap();
        let w = [2.0, 0.0, 1.0];
        let weighted = spatial_pl_weighted(&f, &mask, 2.0, 0.5, Some(&w)).unwrap().value;
        let s: Vec<f64> = [0usize, 0, 2].iter().flat_map(|&t| f.slice(t).to_vec()).collect();
        let rep = SpaceTimeField::new(g, 3, s, Scale::Frechet).unwrap();
        let direct = spatial_pl(&rep, &mask, 2.0, 0.5).unwrap().value;
        assert!((weighted - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn kv_round_trip() {
        let r = FitResult {
            params: ModelParams::new(2.0, 0.6, [1.0, -0.25], 0.8).unwrap(),
            eps: 0.05,
            spatial_loglik: -123.5,
            spacetime_loglik: -456.25,
            spatial_terms: 10,
            spacetime_terms: 20,
            clipped: 0,
            spatial_evals: 40,
            spacetime_evals: 90,
            trace: Vec::new(),
            boundary: false,
            warnings: vec!["note".into()],
        };
        let mut buf = Vec::new();
        r.write_kv(&mut buf).unwrap();
        assert_eq!(FitResult::read_kv(&buf[..]).unwrap(), r);
    }

    #[test]
    fn sample_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
    }
}
