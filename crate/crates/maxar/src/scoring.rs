//! Forecast verification: CRPS, RMSE of the ensemble mean, PIT ranks and the
//! fixed-event evaluation protocol.

use std::io::Write;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::forecast::{forecast_point, ForecastRequest};
use crate::gev::{from_frechet, MarginalModel};
use crate::grid::{Scale, SpaceTimeField};
use crate::model::ModelParams;
use crate::par;
use crate::rng::{substream, Rng};

/// CRPS of an ensemble against one observation, via
/// mean|x_i − y| − ΣΣ|x_i − x_j| / (2N²). Unsorted input is sorted first.
pub fn crps(ensemble: &[f64], obs: f64) -> f64 {
    assert!(!ensemble.is_empty(), "crps needs a nonempty ensemble");
    let sorted_owned;
    let xs = if ensemble.windows(2).all(|w| w[0] <= w[1]) {
        ensemble
    } else {
        let mut v = ensemble.to_vec();
        v.sort_by(f64::total_cmp);
        sorted_owned = v;
        &sorted_owned
    };
    let n = xs.len() as f64;
    let abs_err = xs.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    // ΣΣ|x_i − x_j| = 2 Σ_i (2i − N + 1) x_i for sorted x; centred on obs
    let spread: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * (x - obs))
        .sum::<f64>()
        * 2.0;
    (abs_err - spread / (2.0 * n * n)).max(0.0)
}

/// Randomized PIT rank of `obs` within the ensemble, in (0, 1).
/// Members within 1e-9 (relative) of the observation count as ties.
pub fn pit_value(ensemble: &[f64], obs: f64, rng: &mut Rng) -> f64 {
    let tol = 1e-9 * obs.abs().max(1.0);
    let mut below = 0usize;
    let mut ties = 0usize;
    for x in ensemble {
        if (x - obs).abs() <= tol {
            ties += 1;
        } else if *x < obs {
            below += 1;
        }
    }
    let v: f64 = rng.random();
    (below as f64 + v * (ties as f64 + 1.0)) / (ensemble.len() as f64 + 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationEvent {
    pub site: usize,
    /// 0-based target time.
    pub t: usize,
    pub lead: usize,
    pub ensemble: Vec<f64>,
    pub obs: f64,
}

impl VerificationEvent {
    pub fn mean(&self) -> f64 {
        self.ensemble.iter().sum::<f64>() / self.ensemble.len() as f64
    }

    pub fn crps(&self) -> f64 {
        crps(&self.ensemble, self.obs)
    }
}

/// Root mean squared error of the ensemble means.
pub fn rmse_of_mean(events: &[VerificationEvent]) -> f64 {
    if events.is_empty() {
        return f64::NAN;
    }
    let sq: Vec<f64> = events.iter().map(|e| (e.mean() - e.obs).powi(2)).collect();
    (par::tree_sum(&sq) / events.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreScale {
    #[default]
    Gumbel,
    Raw,
}

#[derive(Clone, Debug)]
pub struct ProtocolOptions {
    pub leads: Vec<usize>,
    pub n_events: usize,
    pub members: usize,
    pub seed: u64,
    pub scale: ScoreScale,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            leads: (1..=7).collect(),
            n_events: 2000,
            members: 500,
            seed: 1,
            scale: ScoreScale::Gumbel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub lead: usize,
    pub mean_crps: f64,
    pub rmse: f64,
    pub n_events: usize,
    pub n_excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEvent {
    pub event: VerificationEvent,
    pub crps: f64,
    pub pit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolResult {
    pub rows: Vec<ScoreRow>,
    /// Scored events per lead, in the order of `rows`.
    pub events: Vec<Vec<ScoredEvent>>,
}

/// Draws `n` distinct target cells (site, t) with t ≥ `min_t`, fixed for every lead.
pub fn sample_events(field: &SpaceTimeField, n: usize, min_t: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n_sites = field.n_sites();
    let feasible = field.t_len.saturating_sub(min_t) * n_sites;
    if n > feasible || n == 0 {
        return Err(Error::InsufficientEvents { requested: n, feasible });
    }
    let mut rng = substream(seed, &[4]);
    Ok(index::sample(&mut rng, feasible, n)
        .into_iter()
        .map(|k| (k % n_sites, min_t + k / n_sites))
        .collect())
}

/// Runs the evaluation protocol on a Fréchet-scale field. The same events and
/// seed are used at every lead; events whose advected source leaves the grid
/// are excluded and counted.
pub fn evaluate_protocol(
    field: &SpaceTimeField,
    params: &ModelParams,
    marginals: Option<&MarginalModel>,
    opts: &ProtocolOptions,
) -> Result<ProtocolResult> {
    if field.scale != Scale::Frechet {
        return Err(Error::Invalid("scoring needs a Fréchet-scale field".into()));
    }
    if opts.leads.is_empty() || opts.leads.contains(&0) {
        return Err(Error::Invalid("leads must be nonempty and >= 1".into()));
    }
    if opts.members == 0 {
        return Err(Error::Invalid("ensemble size must be >= 1".into()));
    }
    if opts.scale == ScoreScale::Raw && marginals.is_none() {
        return Err(Error::Invalid("raw-scale scoring needs marginal GEV parameters".into()));
    }
    let max_lead = *opts.leads.iter().max().unwrap();
    let targets = sample_events(field, opts.n_events, max_lead, opts.seed)?;

    let to_scale = |site: usize, z: f64| -> Result<f64> {
        match opts.scale {
            ScoreScale::Gumbel => Ok(z.ln()),
            ScoreScale::Raw => {
                let g = marginals
                    .and_then(|m| m.site(site))
                    .ok_or_else(|| Error::Invalid(format!("no marginal parameters for site {site}")))?;
                Ok(from_frechet(z, g))
            }
        }
    };

    let mut rows = Vec::with_capacity(opts.leads.len());
    let mut all = Vec::with_capacity(opts.leads.len());
    for &lead in &opts.leads {
        let scored: Vec<Result<Option<ScoredEvent>>> = par::map_range(targets.len(), |k| {
            let (site, t) = targets[k];
            let req = ForecastRequest {
                site,
                t0: t - lead,
                lead,
                members: opts.members,
                seed: opts.seed,
            };
            let ens = match forecast_point(field, &req, params, None) {
                Ok(e) => e,
                Err(Error::OffDomain(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut ensemble = ens
                .frechet
                .iter()
                .map(|z| to_scale(site, *z))
                .collect::<Result<Vec<f64>>>()?;
            ensemble.sort_by(f64::total_cmp);
            let obs = to_scale(site, field.get(site, t))?;
            let mut rng = substream(opts.seed, &[5, site as u64, t as u64, lead as u64]);
            let pit = pit_value(&ensemble, obs, &mut rng);
            let event = VerificationEvent {
                site,
                t,
                lead,
                ensemble,
                obs,
            };
            Ok(Some(ScoredEvent {
                crps: event.crps(),
                pit,
                event,
            }))
        });
        let mut kept = Vec::new();
        let mut excluded = 0;
        for s in scored {
            match s? {
                Some(e) => kept.push(e),
                None => excluded += 1,
            }
        }
        if kept.is_empty() {
            return Err(Error::InsufficientEvents {
                requested: opts.n_events,
                feasible: 0,
            });
        }
        let crps_values: Vec<f64> = kept.iter().map(|e| e.crps).collect();
        let events: Vec<VerificationEvent> = kept.iter().map(|e| e.event.clone()).collect();
        rows.push(ScoreRow {
            lead,
            mean_crps: par::tree_sum(&crps_values) / kept.len() as f64,
            rmse: rmse_of_mean(&events),
            n_events: kept.len(),
            n_excluded: excluded,
        });
        all.push(kept);
    }
    Ok(ProtocolResult { rows, events: all })
}

pub fn write_scores<W: Write>(rows: &[ScoreRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lead", "mean_crps", "rmse", "n_events", "n_excluded"])
        .map_err(csv_err)?;
    for r in rows {
        wr.write_record([
            r.lead.to_string(),
            format!("{:.10e}", r.mean_crps),
            format!("{:.10e}", r.rmse),
            r.n_events.to_string(),
            r.n_excluded.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-event CSV `site,t,lead,obs,mean,crps,pit` (1-based site and time).
pub fn write_events<W: Write>(events: &[ScoredEvent], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["site", "t", "lead", "obs", "mean", "crps", "pit"])
        .map_err(csv_err)?;
    for e in events {
        wr.write_record([
            (e.event.site + 1).to_string(),
            (e.event.t + 1).to_string(),
            e.event.lead.to_string(),
            format!("{:.17e}", e.event.obs),
            format!("{:.17e}", e.event.mean()),
            format!("{:.17e}", e.crps),
            format!("{:.17e}", e.pit),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::Parse(format!("{k:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;

    #[test]
    fn crps_examples() {
        assert_eq!(crps(&[2.5], 1.0), 1.5);
        assert!((crps(&[0.0, 1.0], 0.5) - 0.25).abs() < 1e-15);
        let ens = [3.0, 4.0, 5.0];
        let far = crps(&ens, -1e6);
        assert!((far - (4.0 + 1e6)).abs() / 1e6 < 1e-6);
        assert_eq!(crps(&[2.0, 2.0, 2.0], 2.0), 0.0);
        assert_eq!(crps(&[5.0, 1.0, 3.0], 2.0), crps(&[1.0, 3.0, 5.0], 2.0));
    }

    #[test]
    fn rmse_examples() {
        let ev = |ens: Vec<f64>, obs| VerificationEvent {
            site: 0,
            t: 0,
            lead: 1,
            ensemble: ens,
            obs,
        };
        assert_eq!(rmse_of_mean(&[ev(vec![1.0], 1.0), ev(vec![3.0], 3.0)]), 0.0);
        let r = rmse_of_mean(&[ev(vec![1.5, 2.5], 1.0), ev(vec![4.0], 3.0), ev(vec![0.0], -1.0)]);
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pit_ties_are_randomized() {
        let mut rng = substream(3, &[]);
        let p = pit_value(&[1.0, 1.0, 1.0], 1.0, &mut rng);
        assert!(p > 0.0 && p < 1.0);
        let p = pit_value(&[0.0, 0.5], 1.0, &mut rng);
        assert!(p >= 2.0 / 3.0);
    }

    fn frechet_field(m: usize, t_len: usize) -> SpaceTimeField {
        let g = SpatialGrid::new(1.0, m, m, [0.0, 0.0]).unwrap();
        let n = m * m;
        let mut rng = substream(9, &[]);
        let v: Vec<f64> = (0..n * t_len).map(|_| crate::rng::frechet(&mut rng)).collect();
        SpaceTimeField::new(g, t_len, v, Scale::Frechet).unwrap()
    }

    #[test]
    fn too_many_events_errors_with_feasible_count() {
        let f = frechet_field(3, 5);
        let p = ModelParams::new(1.0, 0.5, [0.0, 0.0], 0.5).unwrap();
        let opts = ProtocolOptions {
            leads: vec![1, 2],
            n_events: 100,
            members: 10,
            seed: 1,
            scale: ScoreScale::Gumbel,
        };
        match evaluate_protocol(&f, &p, None, &opts) {
            Err(Error::InsufficientEvents { feasible, .. }) => assert_eq!(feasible, 27),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn protocol_is_deterministic_and_counts_exclusions() {
        let f = frechet_field(5, 30);
        let p = ModelParams::new(1.0, 0.5, [1.0, 0.0], 0.7).unwrap();
        let opts = ProtocolOptions {
            leads: vec![1, 2, 3],
            n_events: 60,
            members: 50,
            seed: 4,
            scale: ScoreScale::Gumbel,
        };
        let a = evaluate_protocol(&f, &p, None, &opts).unwrap();
        let b = evaluate_protocol(&f, &p, None, &opts).unwrap();
        assert_eq!(a, b);
        for (row, lead) in a.rows.iter().zip([1usize, 2, 3]) {
            assert_eq!(row.n_events + row.n_excluded, 60);
            let off = a.events[lead - 1].iter().filter(|e| f.grid.coords(e.event.site).0 < lead).count();
            assert_eq!(off, 0);
        }
        assert!(a.rows[2].n_excluded >= a.rows[0].n_excluded);
    }
}
