//! Model checks: ratio field, F-madogram extremal coefficients and empirical
//! cross-correlations of log Z.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{Scale, SpaceTimeField};
use crate::inference::quantile_sorted;
use crate::par;

fn require_frechet(field: &SpaceTimeField) -> Result<()> {
    if field.scale != Scale::Frechet {
        return Err(Error::Invalid("diagnostics need a Fréchet-scale field".into()));
    }
    Ok(())
}

/// Empirical law of χ(s,t) = (Z(s+h,t+u)/Z(s,t))^{1/u}.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioFieldCdf {
    /// Lag in grid cells.
    pub offset: (i64, i64),
    pub u: usize,
    /// Sorted sample.
    pub values: Vec<f64>,
}

impl RatioFieldCdf {
    /// Fraction of the sample ≤ z.
    pub fn cdf(&self, z: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.partition_point(|v| *v <= z) as f64 / self.values.len() as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn ratio_field_cdf(field: &SpaceTimeField, offset: (i64, i64), u: usize) -> Result<RatioFieldCdf> {
    require_frechet(field)?;
    if u == 0 {
        return Err(Error::Invalid("ratio field needs u >= 1".into()));
    }
    let g = &field.grid;
    let pairs: Vec<(usize, usize)> = (0..g.n_sites())
        .filter_map(|s| g.offset(s, offset).map(|s2| (s, s2)))
        .collect();
    if pairs.is_empty() || u >= field.t_len {
        return Err(Error::Invalid(format!(
            "no admissible pairs for lag ({}, {}) and u = {u}",
            offset.0, offset.1
        )));
    }
    let inv_u = 1.0 / u as f64;
    let mut values = Vec::with_capacity(pairs.len() * (field.t_len - u));
    for t in 0..field.t_len - u {
        for &(s1, s2) in &pairs {
            let r = field.get(s2, t + u) / field.get(s1, t);
            values.push(if u == 1 { r } else { r.powf(inv_u) });
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(RatioFieldCdf { offset, u, values })
}

pub const DEFAULT_ATOM_THRESHOLD: f64 = 0.05;
const ATOM_REL_TOL: f64 = 1e-9;

/// Largest point mass (values equal within 1e-9 relative) if it exceeds `threshold`.
/// Returns (location, mass).
pub fn detect_atom(cdf: &RatioFieldCdf, threshold: f64) -> Option<(f64, f64)> {
    let v = &cdf.values;
    let n = v.len();
    let mut best: Option<(f64, usize)> = None;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && (v[j] - v[i]).abs() <= ATOM_REL_TOL * v[i].abs() {
            j += 1;
        }
        if j - i > 1 && best.is_none_or(|b| j - i > b.1) {
            best = Some((v[i], j - i));
        }
        i = j;
    }
    best.map(|(loc, k)| (loc, k as f64 / n as f64))
        .filter(|(_, mass)| *mass > threshold)
}

/// F-madogram estimate for one pair of sites.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaEstimate {
    pub s1: usize,
    pub s2: usize,
    pub distance: f64,
    pub nu: f64,
    pub theta: f64,
    /// Θ̂ fell outside [1, 2] and was clipped.
    pub clipped: bool,
}

/// ν̂ = mean|F(Z₁) − F(Z₂)|/2 with F the standard Fréchet CDF, Θ̂ = (1+2ν̂)/(1−2ν̂) clipped to [1, 2].
pub fn fmadogram_theta(field: &SpaceTimeField, pairs: &[(usize, usize)]) -> Result<Vec<ThetaEstimate>> {
    require_frechet(field)?;
    let n = field.n_sites();
    if let Some(p) = pairs.iter().find(|p| p.0 >= n || p.1 >= n) {
        return Err(Error::Invalid(format!("site pair {p:?} outside the grid")));
    }
    let f: Vec<f64> = field.values().iter().map(|z| (-1.0 / z).exp()).collect();
    let t_len = field.t_len;
    Ok(par::map_slice(pairs, |&(s1, s2)| {
        let terms: Vec<f64> = (0..t_len).map(|t| (f[t * n + s1] - f[t * n + s2]).abs()).collect();
        let nu = 0.5 * par::tree_sum(&terms) / t_len as f64;
        let raw = if nu >= 0.5 { f64::INFINITY } else { (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu) };
        let theta = raw.clamp(1.0, 2.0);
        let (p1, p2) = (field.grid.position(s1), field.grid.position(s2));
        ThetaEstimate {
            s1,
            s2,
            distance: (p1[0] - p2[0]).hypot(p1[1] - p2[1]),
            nu,
            theta,
            clipped: theta != raw,
        }
    }))
}

/// Averaged Θ̂ per distinct distance: (distance, mean Θ̂, number of pairs).
pub fn fmadogram_curve(estimates: &[ThetaEstimate]) -> Vec<(f64, f64, usize)> {
    let mut sorted: Vec<&ThetaEstimate> = estimates.iter().collect();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for e in sorted {
        match out.last_mut() {
            Some(last) if (e.distance - last.0).abs() <= 1e-9 * last.0.max(1.0) => {
                last.1 += e.theta;
                last.2 += 1;
            }
            _ => out.push((e.distance, e.theta, 1)),
        }
    }
    for b in out.iter_mut() {
        b.1 /= b.2 as f64;
    }
    out
}

/// All site pairs of the grid, each once.
pub fn all_pairs(n_sites: usize) -> Vec<(usize, usize)> {
    (0..n_sites)
        .flat_map(|i| (i + 1..n_sites).map(move |j| (i, j)))
        .collect()
}

/// Mean of the per-site estimates ρ̂ with their 2.5% and 97.5% quantiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossCorr {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_sites: usize,
}

/// ρ̂_{s,h,u} = 6/((n−u)π²) Σ_{t ≤ n−u} (log Z(s,t) − μ̂_s)(log Z(s+h,t+u) − μ̂_{s+h}),
/// with μ̂ the full-series means. Not clipped to [−1, 1].
pub fn empirical_crosscorr(field: &SpaceTimeField, offset: (i64, i64), u: usize) -> Result<CrossCorr> {
    require_frechet(field)?;
    let g = &field.grid;
    let n = field.t_len;
    if u >= n {
        return Err(Error::Invalid(format!("time lag {u} leaves no overlap (T = {n})")));
    }
    let pairs: Vec<(usize, usize)> = (0..g.n_sites())
        .filter_map(|s| g.offset(s, offset).map(|s2| (s, s2)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::Invalid(format!(
            "only {} admissible sites for lag ({}, {}); need at least 3",
            pairs.len(),
            offset.0,
            offset.1
        )));
    }
    let logs: Vec<f64> = field.values().iter().map(|z| z.ln()).collect();
    let ns = g.n_sites();
    let means: Vec<f64> = (0..ns)
        .map(|s| {
            let v: Vec<f64> = (0..n).map(|t| logs[t * ns + s]).collect();
            par::tree_sum(&v) / n as f64
        })
        .collect();
    let scale = 6.0 / ((n - u) as f64 * std::f64::consts::PI * std::f64::consts::PI);
    let mut rhos = par::map_slice(&pairs, |&(s1, s2)| {
        let terms: Vec<f64> = (0..n - u)
            .map(|t| (logs[t * ns + s1] - means[s1]) * (logs[(t + u) * ns + s2] - means[s2]))
            .collect();
        scale * par::tree_sum(&terms)
    });
    let mean = par::tree_sum(&rhos) / rhos.len() as f64;
    rhos.sort_by(f64::total_cmp);
    Ok(CrossCorr {
        mean,
        lo: quantile_sorted(&rhos, 0.025),
        hi: quantile_sorted(&rhos, 0.975),
        n_sites: rhos.len(),
    })
}

/// Ratio-field CDF evaluated on a grid of z values, as CSV `h1,h2,u,z,cdf`.
pub fn write_ratio_cdf<W: Write>(cdf: &RatioFieldCdf, zs: &[f64], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Parse(e.to_string());
    wr.write_record(["h1", "h2", "u", "z", "cdf"]).map_err(e)?;
    for z in zs {
        wr.write_record([
            cdf.offset.0.to_string(),
            cdf.offset.1.to_string(),
            cdf.u.to_string(),
            format!("{z}"),
            format!("{:.10}", cdf.cdf(*z)),
        ])
        .map_err(e)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;
    use crate::rng::{frechet, substream};

    fn iid_field(m1: usize, m2: usize, t_len: usize, seed: u64) -> SpaceTimeField {
        let g = SpatialGrid::new(1.0, m1, m2, [0.0, 0.0]).unwrap();
        let mut rng = substream(seed, &[]);
        let v = (0..m1 * m2 * t_len).map(|_| frechet(&mut rng)).collect();
        SpaceTimeField::new(g, t_len, v, Scale::Frechet).unwrap()
    }

    #[test]
    fn atom_detection() {
        let mut values = vec![0.5; 50];
        values.extend((0..50).map(|i| 0.6 + i as f64 * 0.01));
        let cdf = RatioFieldCdf {
            offset: (1, 0),
            u: 1,
            values,
        };
        let (loc, mass) = detect_atom(&cdf, DEFAULT_ATOM_THRESHOLD).unwrap();
        assert_eq!((loc, mass), (0.5, 0.5));
        let smooth = RatioFieldCdf {
            offset: (1, 0),
            u: 1,
            values: (0..100).map(|i| 0.1 + i as f64 * 0.01).collect(),
        };
        assert!(detect_atom(&smooth, DEFAULT_ATOM_THRESHOLD).is_none());
    }

    #[test]
    fn iid_ratio_is_symmetric() {
        let f = iid_field(6, 6, 400, 2);
        let cdf = ratio_field_cdf(&f, (0, 0), 1).unwrap();
        let n = cdf.len() as f64;
        assert!((cdf.cdf(1.0) - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
    }

    #[test]
    fn madogram_limits() {
        let g = SpatialGrid::new(1.0, 2, 1, [0.0, 0.0]).unwrap();
        let v: Vec<f64> = (0..200).flat_map(|t| [1.0 + t as f64, 1.0 + t as f64]).collect();
        let f = SpaceTimeField::new(g, 200, v, Scale::Frechet).unwrap();
        let e = fmadogram_theta(&f, &[(0, 1)]).unwrap();
        assert_eq!(e[0].theta, 1.0);
        let f = iid_field(2, 1, 100_000, 4);
        let e = fmadogram_theta(&f, &[(0, 1)]).unwrap();
        assert!((e[0].theta - 2.0).abs() < 0.03, "{}", e[0].theta);
    }

    #[test]
    fn crosscorr_of_noise_and_location_shift() {
        let f = iid_field(5, 5, 2000, 8);
        let c = empirical_crosscorr(&f, (1, 0), 1).unwrap();
        assert!(c.mean.abs() < 3.0 / (2000f64).sqrt());
        // scaling Z by a constant shifts log Z
        let g = f.map(Scale::Frechet, |z| 3.0 * z).unwrap();
        let d = empirical_crosscorr(&g, (1, 0), 1).unwrap();
        assert!((c.mean - d.mean).abs() < 1e-9);
        let same = empirical_crosscorr(&f, (0, 0), 0).unwrap();
        assert!((same.mean - 1.0).abs() < 0.1);
    }
}
