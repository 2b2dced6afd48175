//! Ensemble forecasts at lead u from the field at a base time:
//! Z(s,t+u) = max{aᵘ Z(s−uτ,t), (1−aᵘ) W} with W standard Fréchet.

use std::io::Write;

use crate::brown_resnick::ConditionalBr;
use crate::error::{Error, Result};
use crate::gev::{from_frechet, MarginalModel};
use crate::grid::{Scale, SpaceTimeField, SpatialGrid};
use crate::model::ModelParams;
use crate::par;
use crate::rng::{frechet, substream, Rng};

/// How the value at the advected source was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// The source is a grid site.
    Grid,
    /// The source was drawn by conditional simulation from the cell vertices.
    Simulated,
    /// The source lies outside the grid.
    Missing,
}

impl Conditioning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Conditioning::Grid => "grid",
            Conditioning::Simulated => "simulated",
            Conditioning::Missing => "missing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    pub site: usize,
    pub lead: usize,
    pub frechet: Vec<f64>,
    /// Back-transformed members; `None` when no marginal model is available for the site.
    pub raw: Option<Vec<f64>>,
    pub conditioning: Conditioning,
    /// Grid sites whose values were conditioned on.
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRequest {
    pub site: usize,
    /// 0-based base time.
    pub t0: usize,
    pub lead: usize,
    pub members: usize,
    pub seed: u64,
}

/// Where s − uτ falls relative to the grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Site(usize),
    Cell { vertices: Vec<usize>, point: [f64; 2] },
    OffDomain { point: [f64; 2] },
}

const SNAP: f64 = 1e-9;

pub fn advected_source(grid: &SpatialGrid, site: usize, lead: usize, tau: [f64; 2]) -> Source {
    let p = grid.position(site);
    let u = lead as f64;
    let point = [p[0] - u * tau[0], p[1] - u * tau[1]];
    let f = grid.fractional_index(point);
    let dims = [grid.m1, grid.m2];
    let mut axes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let r = f[k].round();
        let max = (dims[k] - 1) as f64;
        if (f[k] - r).abs() <= SNAP && r >= 0.0 && r <= max {
            axes[k].push(r as usize);
        } else if f[k] > 0.0 && f[k] < max {
            let lo = f[k].floor() as usize;
            axes[k].extend([lo, lo + 1]);
        } else {
            return Source::OffDomain { point };
        }
    }
    if axes[0].len() == 1 && axes[1].len() == 1 {
        return Source::Site(grid.index(axes[0][0], axes[1][0]));
    }
    let mut vertices = Vec::new();
    for &i2 in &axes[1] {
        for &i1 in &axes[0] {
            vertices.push(grid.index(i1, i2));
        }
    }
    Source::Cell { vertices, point }
}

/// Forecast at one site. The source value is taken from the grid when s − uτ is a
/// grid site, and otherwise drawn by conditional simulation given the vertices of
/// the cell containing it.
pub fn forecast_point(
    field: &SpaceTimeField,
    req: &ForecastRequest,
    params: &ModelParams,
    marginals: Option<&MarginalModel>,
) -> Result<ForecastEnsemble> {
    check_request(field, req)?;
    match forecast_inner(field, req, params, marginals)? {
        Some(e) => Ok(e),
        None => {
            let g = &field.grid;
            let p = g.position(req.site);
            let u = req.lead as f64;
            let need = [p[0] - u * params.tau[0], p[1] - u * params.tau[1]];
            Err(Error::OffDomain(format!(
                "source ({:.6}, {:.6}) for site {} at lead {} is outside [{}, {}] x [{}, {}]",
                need[0],
                need[1],
                req.site,
                req.lead,
                g.origin[0],
                g.origin[0] + g.mesh * (g.m1 - 1) as f64,
                g.origin[1],
                g.origin[1] + g.mesh * (g.m2 - 1) as f64
            )))
        }
    }
}

fn check_request(field: &SpaceTimeField, req: &ForecastRequest) -> Result<()> {
    if field.scale != Scale::Frechet {
        return Err(Error::Invalid("forecasting needs a Fréchet-scale field".into()));
    }
    if req.lead == 0 {
        return Err(Error::Invalid("lead time u must be >= 1".into()));
    }
    if req.members == 0 {
        return Err(Error::Invalid("ensemble size must be >= 1".into()));
    }
    if req.t0 >= field.t_len {
        return Err(Error::Invalid(format!("base time {} beyond the field (T = {})", req.t0 + 1, field.t_len)));
    }
    if req.site >= field.n_sites() {
        return Err(Error::Invalid(format!("site {} outside the grid", req.site)));
    }
    Ok(())
}

fn forecast_inner(
    field: &SpaceTimeField,
    req: &ForecastRequest,
    params: &ModelParams,
    marginals: Option<&MarginalModel>,
) -> Result<Option<ForecastEnsemble>> {
    let grid = &field.grid;
    let mut rng = substream(req.seed, &[3, req.site as u64, req.lead as u64, req.t0 as u64]);
    let c = params.a.powi(req.lead as i32);
    let (ys, conditioning, sources): (Vec<f64>, _, _) = match advected_source(grid, req.site, req.lead, params.tau) {
        Source::OffDomain { .. } => return Ok(None),
        Source::Site(s) => (vec![field.get(s, req.t0); req.members], Conditioning::Grid, vec![s]),
        Source::Cell { vertices, point } => {
            let obs: Vec<([f64; 2], f64)> = vertices
                .iter()
                .map(|&v| (grid.position(v), field.get(v, req.t0)))
                .collect();
            let sim = ConditionalBr::new(&obs, point, &params.sv)?;
            let ys = (0..req.members).map(|_| sim.sample(&mut rng)).collect();
            (ys, Conditioning::Simulated, vertices)
        }
    };
    let frechet_draws: Vec<f64> = ys.iter().map(|y| combine(c, *y, &mut rng)).collect();
    let raw = marginals
        .and_then(|m| m.site(req.site))
        .map(|g| frechet_draws.iter().map(|z| from_frechet(*z, g)).collect());
    Ok(Some(ForecastEnsemble {
        site: req.site,
        lead: req.lead,
        frechet: frechet_draws,
        raw,
        conditioning,
        sources,
    }))
}

#[inline]
fn combine(c: f64, y: f64, rng: &mut Rng) -> f64 {
    (c * y).max((1.0 - c) * frechet(rng))
}

/// Forecasts at every grid site; sites with an off-grid source come back empty
/// and marked [`Conditioning::Missing`].
pub fn forecast_grid(
    field: &SpaceTimeField,
    t0: usize,
    lead: usize,
    members: usize,
    params: &ModelParams,
    marginals: Option<&MarginalModel>,
    seed: u64,
) -> Result<Vec<ForecastEnsemble>> {
    let reqs: Vec<ForecastRequest> = (0..field.n_sites())
        .map(|site| ForecastRequest {
            site,
            t0,
            lead,
            members,
            seed,
        })
        .collect();
    if let Some(r) = reqs.first() {
        check_request(field, r)?;
    }
    par::map_slice(&reqs, |r| {
        Ok(forecast_inner(field, r, params, marginals)?.unwrap_or(ForecastEnsemble {
            site: r.site,
            lead,
            frechet: Vec::new(),
            raw: None,
            conditioning: Conditioning::Missing,
            sources: Vec::new(),
        }))
    })
    .into_iter()
    .collect()
}

/// CSV `i1,i2,t0,u,member,value_frechet,value_raw,conditioned` with 1-based indices.
/// Missing sites get one row with empty values.
pub fn write_ensembles<W: Write>(grid: &SpatialGrid, t0: usize, ensembles: &[ForecastEnsemble], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    wr.write_record(["i1", "i2", "t0", "u", "member", "value_frechet", "value_raw", "conditioned"])
        .map_err(csv_err)?;
    for e in ensembles {
        let (i1, i2) = grid.coords(e.site);
        let head = [(i1 + 1).to_string(), (i2 + 1).to_string(), (t0 + 1).to_string(), e.lead.to_string()];
        if e.frechet.is_empty() {
            let mut row = head.to_vec();
            row.extend(["".into(), "".into(), "".into(), e.conditioning.as_str().into()]);
            wr.write_record(&row).map_err(csv_err)?;
            continue;
        }
        for (m, z) in e.frechet.iter().enumerate() {
            let raw = e.raw.as_ref().map_or(String::from("nan"), |r| format!("{:.16e}", r[m]));
            let mut row = head.to_vec();
            row.extend([(m + 1).to_string(), format!("{z:.16e}"), raw, e.conditioning.as_str().into()]);
            wr.write_record(&row).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}
