//! The space-time max-autoregressive field
//! Z(s,t) = max{a Z(s−τ,t−1), (1−a) W_t(s)} with Brown-Resnick innovations.

use std::collections::HashMap;

use crate::brown_resnick::{hr_exponent, log_density_fast, BivariateV, BrSimulator, Semivariogram};
use crate::error::{Error, Result};
use crate::grid::{Scale, SpaceTimeField, SpatialGrid};
use crate::par;
use crate::quad::composite_rule;
use crate::rng::{frechet, substream, Rng};

/// ψ = (κ, H, τ, a). τ is in the same physical units as the grid coordinates, per time step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub sv: Semivariogram,
    pub tau: [f64; 2],
    pub a: f64,
}

impl ModelParams {
    pub fn new(kappa: f64, hurst: f64, tau: [f64; 2], a: f64) -> Result<Self> {
        let sv = Semivariogram::new(kappa, hurst)?;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Invalid(format!("decay a must lie in (0, 1), got {a}")));
        }
        if !(tau[0].is_finite() && tau[1].is_finite()) {
            return Err(Error::Invalid("advection must be finite".into()));
        }
        Ok(Self { sv, tau, a })
    }

    /// γ(h − uτ).
    pub fn lag_gamma(&self, pair: StPair) -> f64 {
        self.sv.gamma(pair.shifted_lag(self.tau))
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.sv.kappa, self.sv.hurst, self.tau[0], self.tau[1], self.a]
    }
}

/// Spatial lag h and temporal lag u between Z(s,t) and Z(s+h,t+u).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StPair {
    pub h: [f64; 2],
    pub u: usize,
}

impl StPair {
    pub fn new(h: [f64; 2], u: usize) -> Self {
        Self { h, u }
    }

    pub fn shifted_lag(&self, tau: [f64; 2]) -> [f64; 2] {
        let u = self.u as f64;
        [self.h[0] - u * tau[0], self.h[1] - u * tau[1]]
    }
}

/// Bivariate exponent measure of (Z(s,t), Z(s+h,t+u)) and its partials.
/// When h = uτ this is 1/min(z1, a⁻ᵘz2) + (1−aᵘ)/z2.
pub fn exponent_v_st(pair: StPair, z1: f64, z2: f64, params: &ModelParams) -> BivariateV {
    let c = params.a.powi(pair.u as i32);
    hr_exponent(z1, z2, c, params.lag_gamma(pair))
}

/// Density exp(−V)(V₁V₂ − V₁₂) of the absolutely continuous pair.
pub fn pair_density(pair: StPair, z1: f64, z2: f64, params: &ModelParams) -> Result<f64> {
    pair_log_density(pair, z1, z2, params).map(f64::exp)
}

pub fn pair_log_density(pair: StPair, z1: f64, z2: f64, params: &ModelParams) -> Result<f64> {
    let g = params.lag_gamma(pair);
    if g == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let c = params.a.powi(pair.u as i32);
    let (l1, l2) = (z1.ln(), z2.ln());
    Ok(log_density_fast(z1, z2, l1, l2, l2 - l1 - c.ln(), c, (2.0 * g).sqrt()))
}

/// q₁, q₂ and their sensitivities to γ = γ(h − uτ) and to a.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QSensitivities {
    pub q1: f64,
    pub q2: f64,
    pub dq1_dgamma: f64,
    pub dq2_dgamma: f64,
    pub dq1_da: f64,
    pub dq2_da: f64,
}

pub fn q_sensitivities(pair: StPair, z1: f64, z2: f64, params: &ModelParams) -> Result<QSensitivities> {
    let g = params.lag_gamma(pair);
    if g == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let s = (2.0 * g).sqrt();
    let u = pair.u as f64;
    let l = (z2 / z1).ln() - u * params.a.ln();
    let q1 = l / s + 0.5 * s;
    let q2 = -l / s + 0.5 * s;
    Ok(QSensitivities {
        q1,
        q2,
        dq1_dgamma: q2 / (2.0 * g),
        dq2_dgamma: q1 / (2.0 * g),
        dq1_da: -u / (params.a * s),
        dq2_da: u / (params.a * s),
    })
}

/// Law of Z(s,t+u) given Z(s−uτ,t) = z1: max(aᵘz1, (1−aᵘ)W) with W standard Fréchet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalLaw {
    pub floor: f64,
    pub scale: f64,
}

impl ConditionalLaw {
    pub fn cdf(&self, z2: f64) -> f64 {
        if z2 < self.floor {
            0.0
        } else {
            (-self.scale / z2).exp()
        }
    }

    /// P(Z = aᵘz1) = exp(−(a⁻ᵘ−1)/z1).
    pub fn atom_mass(&self) -> f64 {
        self.cdf(self.floor)
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.floor.max(self.scale * frechet(rng))
    }
}

pub fn conditional_law(u: usize, z1: f64, params: &ModelParams) -> Result<ConditionalLaw> {
    if u == 0 {
        return Err(Error::Invalid("conditional law needs a lead u >= 1".into()));
    }
    if !(z1 > 0.0 && z1.is_finite()) {
        return Err(Error::Invalid(format!("conditioning value must be positive, got {z1}")));
    }
    let c = params.a.powi(u as i32);
    Ok(ConditionalLaw {
        floor: c * z1,
        scale: 1.0 - c,
    })
}

/// Θ_Z(h,u) = V(1,1).
pub fn extremal_coeff(pair: StPair, params: &ModelParams) -> f64 {
    exponent_v_st(pair, 1.0, 1.0, params).v
}

const HOEFFDING_BOX: (f64, f64) = (-7.0, 14.0);
const HOEFFDING_TOL: f64 = 1e-4;
const GUMBEL_VAR: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

/// Corr(log Z(s,t), log Z(s+h,t+u)) by Hoeffding's covariance identity on the Gumbel scale.
pub fn theoretical_crosscorr(pair: StPair, params: &ModelParams) -> Result<f64> {
    if pair.u == 0 && pair.h == [0.0, 0.0] {
        return Ok(1.0);
    }
    let (lo, hi) = HOEFFDING_BOX;
    let integrate = |panels: usize| -> f64 {
        let (xs, ws) = composite_rule(lo, hi, panels, 8);
        let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let rows = par::map_range(xs.len(), |i| {
            let z1 = ex[i];
            let terms: Vec<f64> = (0..xs.len())
                .map(|j| {
                    let z2 = ex[j];
                    let v = exponent_v_st(pair, z1, z2, params).v;
                    ws[j] * ((-v).exp() - (-1.0 / z1 - 1.0 / z2).exp())
                })
                .collect();
            ws[i] * par::tree_sum(&terms)
        });
        par::tree_sum(&rows) / GUMBEL_VAR
    };
    let mut prev = integrate(16);
    let mut diff = f64::INFINITY;
    for panels in [32, 64, 128, 256] {
        let cur = integrate(panels);
        diff = (cur - prev).abs();
        prev = cur;
        if diff < HOEFFDING_TOL {
            return Ok(cur);
        }
    }
    Err(Error::Quadrature(diff))
}

/// ⟨h,τ⟩/‖τ‖², the temporal lag of maximal correlation for a close to 1 (an approximation).
pub fn peak_corr_lag(h: [f64; 2], params: &ModelParams) -> Result<f64> {
    let n2 = params.tau[0] * params.tau[0] + params.tau[1] * params.tau[1];
    if n2 == 0.0 {
        return Err(Error::Invalid("peak correlation lag is undefined for zero advection".into()));
    }
    Ok((h[0] * params.tau[0] + h[1] * params.tau[1]) / n2)
}

/// τ as an integer number of cells per step.
pub fn grid_step(tau: [f64; 2], mesh: f64) -> Result<(i64, i64)> {
    let mut out = [0i64; 2];
    for (k, t) in tau.iter().enumerate() {
        let r = t / mesh;
        let n = r.round();
        if (r - n).abs() > 1e-9 * n.abs().max(1.0) {
            return Err(Error::Invalid(format!(
                "advection ({}, {}) is not a multiple of the grid mesh {mesh}; simulate on a finer grid whose mesh divides it",
                tau[0], tau[1]
            )));
        }
        out[k] = n as i64;
    }
    Ok((out[0], out[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SimulateOptions {
    /// `None` simulates innovations on the full upwind buffer, which is exact.
    /// `Some(tol)` keeps only K upwind steps with aᴷ ≤ tol; at the upwind edge of
    /// that buffer the field is advanced in place, max(a Z(x,t−1), (1−a) W_t(x)).
    pub lookback_tol: Option<f64>,
}

/// Largest simulation domain accepted for exact simulation.
pub const MAX_SIMULATION_SITES: usize = 6000;

/// Exact simulation of T slices on `grid`, Fréchet scale.
pub fn simulate_st(grid: &SpatialGrid, t_len: usize, params: &ModelParams, seed: u64) -> Result<SpaceTimeField> {
    simulate_st_with(grid, t_len, params, seed, &SimulateOptions::default())
}

pub fn simulate_st_with(
    grid: &SpatialGrid,
    t_len: usize,
    params: &ModelParams,
    seed: u64,
    opts: &SimulateOptions,
) -> Result<SpaceTimeField> {
    if t_len == 0 {
        return Err(Error::Invalid("need at least one time step".into()));
    }
    let d = grid_step(params.tau, grid.mesh)?;
    let mut depth = t_len - 1;
    if let Some(tol) = opts.lookback_tol {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::Invalid(format!("lookback tolerance must lie in (0, 1), got {tol}")));
        }
        let k = (tol.ln() / params.a.ln()).ceil().max(1.0) as usize;
        depth = depth.min(k);
    }
    let domain = Domain::build(grid, d, depth);
    if domain.coords.len() > MAX_SIMULATION_SITES {
        return Err(Error::Invalid(format!(
            "simulation domain has {} sites (limit {MAX_SIMULATION_SITES}); set a lookback tolerance",
            domain.coords.len()
        )));
    }
    let positions: Vec<[f64; 2]> = domain
        .coords
        .iter()
        .map(|&(i1, i2)| {
            [
                grid.origin[0] + grid.mesh * i1 as f64,
                grid.origin[1] + grid.mesh * i2 as f64,
            ]
        })
        .collect();
    let sim = BrSimulator::new(&positions, &params.sv)?;
    let innovations = par::map_range(t_len, |t| sim.sample(&mut substream(seed, &[1, t as u64])));

    let n = grid.n_sites();
    let a = params.a;
    let b = 1.0 - a;
    let mut values = Vec::with_capacity(n * t_len);
    let mut z = innovations[0].clone();
    values.extend_from_slice(&z[..n]);
    let mut next = vec![0.0; z.len()];
    for w in &innovations[1..] {
        for (x, out) in next.iter_mut().enumerate() {
            let prev = match domain.upwind[x] {
                Some(y) => z[y],
                None => z[x],
            };
            *out = (a * prev).max(b * w[x]);
        }
        std::mem::swap(&mut z, &mut next);
        values.extend_from_slice(&z[..n]);
    }
    SpaceTimeField::new(grid.clone(), t_len, values, Scale::Frechet)
}

/// Grid plus its upwind copies G − k·d, k = 1..depth; grid sites come first in site order.
struct Domain {
    coords: Vec<(i64, i64)>,
    upwind: Vec<Option<usize>>,
}

impl Domain {
    fn build(grid: &SpatialGrid, d: (i64, i64), depth: usize) -> Self {
        let mut coords = Vec::new();
        let mut index = HashMap::new();
        let layers = if d == (0, 0) { 0 } else { depth };
        for k in 0..=layers as i64 {
            for site in 0..grid.n_sites() {
                let (i1, i2) = grid.coords(site);
                let c = (i1 as i64 - k * d.0, i2 as i64 - k * d.1);
                index.entry(c).or_insert_with(|| {
                    coords.push(c);
                    coords.len() - 1
                });
            }
        }
        let upwind = coords
            .iter()
            .map(|&(i1, i2)| index.get(&(i1 - d.0, i2 - d.1)).copied())
            .collect();
        Self { coords, upwind }
    }
}

fn repeat_mul(mut x: f64, a: f64, k: usize) -> f64 {
    for _ in 0..k {
        x *= a;
    }
    x
}

/// One step of the recursion on the grid; `None` where s − τ is off the grid.
pub fn recursion_step(grid: &SpatialGrid, prev: &[Option<f64>], innovation: &[f64], params: &ModelParams) -> Result<Vec<Option<f64>>> {
    let d = grid_step(params.tau, grid.mesh)?;
    check_slice(grid, prev.len())?;
    check_slice(grid, innovation.len())?;
    Ok((0..grid.n_sites())
        .map(|s| {
            let src = grid.offset(s, (-d.0, -d.1))?;
            let p = prev[src]?;
            Some((params.a * p).max((1.0 - params.a) * innovation[s]))
        })
        .collect())
}

/// Z(·,t) from Z(·,t−u) and the innovations W_{t−u+1}, …, W_t in one pass:
/// Z(s,t) = max{aᵘ Z(s−uτ,t−u), (1−aᵘ) W̃(s)} with
/// (1−aᵘ) W̃(s) = max_j a^{u−j}(1−a) W_{t−u+j}(s−(u−j)τ).
/// Powers of a are applied by repeated multiplication, so the result agrees
/// bit for bit with u applications of [`recursion_step`]. `None` marks sites
/// whose sources leave the grid.
pub fn lagu_closed_form(
    grid: &SpatialGrid,
    past: &[f64],
    innovations: &[&[f64]],
    params: &ModelParams,
    u: usize,
) -> Result<Vec<Option<f64>>> {
    if u == 0 || innovations.len() != u {
        return Err(Error::Invalid(format!(
            "lag-u recursion needs u >= 1 and exactly u innovation slices (u={u}, got {})",
            innovations.len()
        )));
    }
    check_slice(grid, past.len())?;
    for w in innovations {
        check_slice(grid, w.len())?;
    }
    let d = grid_step(params.tau, grid.mesh)?;
    let a = params.a;
    Ok((0..grid.n_sites())
        .map(|s| {
            let back = |k: usize| grid.offset(s, (-(k as i64) * d.0, -(k as i64) * d.1));
            let mut z = repeat_mul(past[back(u)?], a, u);
            for j in 1..=u {
                let w = innovations[j - 1][back(u - j)?];
                z = z.max(repeat_mul((1.0 - a) * w, a, u - j));
            }
            Some(z)
        })
        .collect())
}

fn check_slice(grid: &SpatialGrid, len: usize) -> Result<()> {
    if len != grid.n_sites() {
        return Err(Error::Invalid(format!(
            "slice has {len} values but the grid has {} sites",
            grid.n_sites()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brown_resnick::exponent_v_spatial;

    fn params(tau: [f64; 2], a: f64) -> ModelParams {
        ModelParams::new(2.0, 0.6, tau, a).unwrap()
    }

    #[test]
    fn no_time_lag_is_spatial() {
        let p = params([0.5, 0.0], 0.8);
        let pair = StPair::new([1.0, 0.5], 0);
        let st = exponent_v_st(pair, 0.7, 1.9, &p);
        let sp = exponent_v_spatial(0.7, 1.9, p.sv.gamma([1.0, 0.5]));
        assert_eq!(st, sp);
    }

    #[test]
    fn advected_pair_exponent() {
        let p = params([0.5, 0.0], 0.5);
        let v = exponent_v_st(StPair::new([0.5, 0.0], 1), 1.0, 1.0, &p).v;
        assert!((v - 1.5).abs() < 1e-15);
        let p = params([0.35, -0.14], 0.97);
        let th = extremal_coeff(StPair::new([0.35, -0.14], 1), &p);
        assert!((th - 1.03).abs() < 1e-12);
        assert_eq!(extremal_coeff(StPair::new([0.0, 0.0], 0), &p), 1.0);
    }

    #[test]
    fn degenerate_pair_has_no_density() {
        let p = params([0.5, 0.0], 0.5);
        assert!(matches!(
            pair_density(StPair::new([1.0, 0.0], 2), 1.0, 1.0, &p),
            Err(Error::DegeneratePair)
        ));
    }

    #[test]
    fn conditional_law_examples() {
        let p = params([0.5, 0.0], 0.5);
        let law = conditional_law(1, 2.0, &p).unwrap();
        assert_eq!(law.cdf(0.9), 0.0);
        assert!((law.cdf(2.0) - (-0.25f64).exp()).abs() < 1e-15);
        let law = conditional_law(1, 1.0, &p).unwrap();
        assert!((law.atom_mass() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn q_derivatives_match_finite_differences() {
        let p = params([0.5, 0.25], 0.8);
        let pair = StPair::new([1.5, -0.5], 2);
        let (z1, z2) = (0.8, 2.3);
        let q = q_sensitivities(pair, z1, z2, &p).unwrap();
        let e = 1e-6;
        let mut pa = p;
        pa.a += e;
        let mut pb = p;
        pb.a -= e;
        let (qa, qb) = (q_sensitivities(pair, z1, z2, &pa).unwrap(), q_sensitivities(pair, z1, z2, &pb).unwrap());
        assert!(((qa.q1 - qb.q1) / (2.0 * e) - q.dq1_da).abs() < 1e-6);
        assert!(((qa.q2 - qb.q2) / (2.0 * e) - q.dq2_da).abs() < 1e-6);
        // γ sensitivity through κ: γ = (d/κ)^{2H}
        let g = p.lag_gamma(pair);
        let mut pk = p;
        pk.sv.kappa *= 1.0 + 1e-7;
        let qk = q_sensitivities(pair, z1, z2, &pk).unwrap();
        let dg = pk.lag_gamma(pair) - g;
        assert!(((qk.q1 - q.q1) / dg - q.dq1_dgamma).abs() < 1e-4);
        assert!(((qk.q2 - q.q2) / dg - q.dq2_dgamma).abs() < 1e-4);
    }

    #[test]
    fn peak_lag_examples() {
        let p = params([0.35, -0.14], 0.97);
        assert_eq!(peak_corr_lag([0.14, 0.35], &p).unwrap(), 0.0);
        assert!((peak_corr_lag([1.05, -0.42], &p).unwrap() - 3.0).abs() < 1e-12);
        let expect = (2.0 * 0.35 + 0.75 * 0.14) / (0.35f64 * 0.35 + 0.14 * 0.14);
        assert!((peak_corr_lag([2.0, -0.75], &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn non_aligned_advection_is_rejected() {
        let g = SpatialGrid::new(0.5, 4, 4, [0.0, 0.0]).unwrap();
        let p = params([0.3, 0.0], 0.5);
        assert!(matches!(simulate_st(&g, 3, &p, 1), Err(Error::Invalid(_))));
    }

    #[test]
    fn lookback_domain_layout() {
        let g = SpatialGrid::new(1.0, 3, 2, [0.0, 0.0]).unwrap();
        let dom = Domain::build(&g, (2, 0), 2);
        assert_eq!(dom.coords.len(), 3 * 2 + 2 * 2 * 2);
        assert_eq!(&dom.coords[..6], &[(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1)]);
        assert_eq!(dom.upwind[2], Some(dom.coords.iter().position(|c| *c == (0, 0)).unwrap()));
        let edge = dom.coords.iter().position(|c| *c == (-4, 0)).unwrap();
        assert_eq!(dom.upwind[edge], None);
    }

    #[test]
    fn crosscorr_limits() {
        let p = params([0.5, 0.0], 0.3);
        let far = theoretical_crosscorr(StPair::new([40.0, 30.0], 6), &p).unwrap();
        assert!(far.abs() < 1e-3, "{far}");
        let near = theoretical_crosscorr(StPair::new([0.5, 0.0], 0), &p).unwrap();
        assert!(near > 0.2 && near < 1.0);
    }
}
