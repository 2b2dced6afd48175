//! Regular spatial grids, space-time fields, CSV I/O and design masks.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Regular square-mesh grid. Sites are `origin + mesh * (i1, i2)` with
/// 0-based `i1 < m1`, `i2 < m2`; site index is `i2 * m1 + i1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    pub mesh: f64,
    pub m1: usize,
    pub m2: usize,
    pub origin: [f64; 2],
}

impl SpatialGrid {
    pub fn new(mesh: f64, m1: usize, m2: usize, origin: [f64; 2]) -> Result<Self> {
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(Error::Invalid(format!("mesh must be positive, got {mesh}")));
        }
        if m1 == 0 || m2 == 0 {
            return Err(Error::Invalid("grid needs at least one site per axis".into()));
        }
        Ok(Self { mesh, m1, m2, origin })
    }

    pub fn n_sites(&self) -> usize {
        self.m1 * self.m2
    }

    #[inline]
    pub fn index(&self, i1: usize, i2: usize) -> usize {
        i2 * self.m1 + i1
    }

    #[inline]
    pub fn coords(&self, site: usize) -> (usize, usize) {
        (site % self.m1, site / self.m1)
    }

    /// Physical location of a site.
    pub fn position(&self, site: usize) -> [f64; 2] {
        let (i1, i2) = self.coords(site);
        [
            self.origin[0] + self.mesh * i1 as f64,
            self.origin[1] + self.mesh * i2 as f64,
        ]
    }

    /// Site at integer offset `dz` from `site`, if inside the grid.
    #[inline]
    pub fn offset(&self, site: usize, dz: (i64, i64)) -> Option<usize> {
        let (i1, i2) = self.coords(site);
        let j1 = i1 as i64 + dz.0;
        let j2 = i2 as i64 + dz.1;
        if j1 < 0 || j2 < 0 || j1 >= self.m1 as i64 || j2 >= self.m2 as i64 {
            None
        } else {
            Some(self.index(j1 as usize, j2 as usize))
        }
    }

    /// Fractional grid coordinates of a physical point.
    pub fn fractional_index(&self, x: [f64; 2]) -> [f64; 2] {
        [
            (x[0] - self.origin[0]) / self.mesh,
            (x[1] - self.origin[1]) / self.mesh,
        ]
    }

    /// Number of sites with `site + dz` inside the grid.
    pub fn overlap_count(&self, dz: (i64, i64)) -> usize {
        let a = self.m1 as i64 - dz.0.abs();
        let b = self.m2 as i64 - dz.1.abs();
        if a <= 0 || b <= 0 {
            0
        } else {
            (a * b) as usize
        }
    }
}

/// Marginal scale of a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Raw,
    Frechet,
    Gumbel,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Scale::Raw),
            "frechet" | "fréchet" => Ok(Scale::Frechet),
            "gumbel" => Ok(Scale::Gumbel),
            other => Err(Error::Invalid(format!("unknown scale '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Raw => "raw",
            Scale::Frechet => "frechet",
            Scale::Gumbel => "gumbel",
        }
    }
}

/// Values on a grid at times `0..t_len` (written as 1..=T in files).
/// Storage is slice-major: `values[t * n_sites + site]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    pub grid: SpatialGrid,
    pub t_len: usize,
    values: Vec<f64>,
    pub scale: Scale,
}

impl SpaceTimeField {
    pub fn new(grid: SpatialGrid, t_len: usize, values: Vec<f64>, scale: Scale) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::Invalid("field needs at least one time step".into()));
        }
        if values.len() != grid.n_sites() * t_len {
            return Err(Error::Invalid(format!(
                "expected {} values, got {}",
                grid.n_sites() * t_len,
                values.len()
            )));
        }
        if scale == Scale::Frechet {
            if let Some(i) = values.iter().position(|v| !(*v > 0.0)) {
                let n = grid.n_sites();
                return Err(Error::OutOfSupport(vec![(i % n, i / n + 1)]));
            }
        }
        Ok(Self {
            grid,
            t_len,
            values,
            scale,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.grid.n_sites()
    }

    #[inline]
    pub fn get(&self, site: usize, t: usize) -> f64 {
        self.values[t * self.grid.n_sites() + site]
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.grid.n_sites();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Time series at one site.
    pub fn series(&self, site: usize) -> Vec<f64> {
        (0..self.t_len).map(|t| self.get(site, t)).collect()
    }

    /// Cell-wise map into a new field with the given scale.
    pub fn map(&self, scale: Scale, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.t_len,
            self.values.iter().map(|v| f(*v)).collect(),
            scale,
        )
    }

    /// Sub-field over the time window `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t_len {
            return Err(Error::Invalid(format!("bad time window {start}..{end}")));
        }
        let n = self.n_sites();
        Self::new(
            self.grid.clone(),
            end - start,
            self.values[start * n..end * n].to_vec(),
            self.scale,
        )
    }
}

const GRID_TOL: f64 = 1e-9;

fn axis_from_values(mut v: Vec<f64>, name: &str) -> Result<(Vec<f64>, Option<f64>)> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    if v.len() < 2 {
        return Ok((v, None));
    }
    let step = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
    for w in v.windows(2) {
        if ((w[1] - w[0]) - step).abs() > GRID_TOL * step {
            return Err(Error::IrregularGrid(format!(
                "{name} spacing {} differs from mean spacing {step}",
                w[1] - w[0]
            )));
        }
    }
    Ok((v, Some(step)))
}

/// Read a field from CSV with header `lon,lat,t,value` (t starts at 1).
pub fn read_field<R: Read>(reader: R, scale: Scale) -> Result<SpaceTimeField> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let want = ["lon", "lat", "t", "value"];
    let cols: Vec<usize> = want
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(w))
                .ok_or_else(|| Error::Parse(format!("missing column '{w}'")))
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<(f64, f64, usize, f64)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |k: usize| -> Result<&str> {
            rec.get(cols[k])
                .ok_or_else(|| Error::Parse(format!("row {}: missing field", line + 2)))
        };
        let num = |k: usize| -> Result<f64> {
            let s = field(k)?;
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: cannot parse '{s}'", line + 2)))
        };
        let t_str = field(2)?;
        let t: usize = t_str
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad time index '{t_str}'", line + 2)))?;
        if t == 0 {
            return Err(Error::Parse(format!("row {}: time index starts at 1", line + 2)));
        }
        let (lon, lat, value) = (num(0)?, num(1)?, num(3)?);
        if !lon.is_finite() || !lat.is_finite() || !value.is_finite() {
            return Err(Error::Parse(format!("row {}: non-finite entry", line + 2)));
        }
        rows.push((lon, lat, t, value));
    }
    if rows.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let (lons, s1) = axis_from_values(rows.iter().map(|r| r.0).collect(), "lon")?;
    let (lats, s2) = axis_from_values(rows.iter().map(|r| r.1).collect(), "lat")?;
    let mesh = match (s1, s2) {
        (Some(a), Some(b)) => {
            if (a - b).abs() > GRID_TOL * a.max(b) {
                return Err(Error::IrregularGrid(format!(
                    "lon spacing {a} and lat spacing {b} differ"
                )));
            }
            a
        }
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => {
            return Err(Error::IrregularGrid(
                "a single site does not determine the mesh".into(),
            ))
        }
    };
    let grid = SpatialGrid::new(mesh, lons.len(), lats.len(), [lons[0], lats[0]])?;
    let t_len = rows.iter().map(|r| r.2).max().unwrap();
    let n = grid.n_sites();
    let mut values = vec![f64::NAN; n * t_len];
    let mut seen = vec![false; n * t_len];
    for (lon, lat, t, v) in rows {
        let i1 = lons.binary_search_by(|x| x.partial_cmp(&lon).unwrap()).unwrap();
        let i2 = lats.binary_search_by(|x| x.partial_cmp(&lat).unwrap()).unwrap();
        let k = (t - 1) * n + grid.index(i1, i2);
        if seen[k] {
            return Err(Error::Parse(format!(
                "duplicate cell at site ({}, {}), t={t}",
                i1 + 1,
                i2 + 1
            )));
        }
        seen[k] = true;
        values[k] = v;
    }
    for site in 0..n {
        for t in 0..t_len {
            if !seen[t * n + site] {
                let (i1, i2) = grid.coords(site);
                return Err(Error::IncompleteGrid {
                    i1: i1 + 1,
                    i2: i2 + 1,
                    t: t + 1,
                });
            }
        }
    }
    SpaceTimeField::new(grid, t_len, values, scale)
}

pub fn load_field(path: impl AsRef<Path>, scale: Scale) -> Result<SpaceTimeField> {
    let f = std::fs::File::open(path)?;
    read_field(std::io::BufReader::new(f), scale)
}

/// Write a field as CSV, 17 significant digits, site-major then time.
pub fn write_field<W: Write>(field: &SpaceTimeField, mut w: W) -> Result<()> {
    writeln!(w, "lon,lat,t,value")?;
    for site in 0..field.n_sites() {
        let [x, y] = field.grid.position(site);
        for t in 0..field.t_len {
            writeln!(w, "{:.16e},{:.16e},{},{:.16e}", x, y, t + 1, field.get(site, t))?;
        }
    }
    Ok(())
}

pub fn save_field(field: &SpaceTimeField, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_field(field, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Lags `mesh * z`, `z ∈ ℤ²`, `‖z‖ ≤ r`, with the maximal temporal lag `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMask {
    pub mesh: f64,
    pub r: f64,
    pub p: usize,
    pub spatial_only: bool,
    /// Integer lags in grid cells, sorted lexicographically.
    pub offsets: Vec<(i64, i64)>,
}

impl DesignMask {
    /// Physical lag vectors.
    pub fn lags(&self) -> Vec<[f64; 2]> {
        self.offsets
            .iter()
            .map(|&(a, b)| [self.mesh * a as f64, self.mesh * b as f64])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Full disk of lags (with 0 and both signs), or the half-plane set
/// `z1 > 0 or (z1 = 0, z2 > 0)` when `spatial_only`.
pub fn build_mask(mesh: f64, r: f64, p: usize, spatial_only: bool) -> Result<DesignMask> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::Invalid(format!("mask radius must be >= 1, got {r}")));
    }
    if p == 0 {
        return Err(Error::Invalid("max temporal lag p must be >= 1".into()));
    }
    if !(mesh > 0.0) {
        return Err(Error::Invalid(format!("mesh must be positive, got {mesh}")));
    }
    let rr = r.floor() as i64;
    let r2 = r * r * (1.0 + 1e-12);
    let mut offsets = Vec::new();
    for a in -rr..=rr {
        for b in -rr..=rr {
            if ((a * a + b * b) as f64) > r2 {
                continue;
            }
            if spatial_only && !(a > 0 || (a == 0 && b > 0)) {
                continue;
            }
            offsets.push((a, b));
        }
    }
    Ok(DesignMask {
        mesh,
        r,
        p,
        spatial_only,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csv(skip: Option<usize>) -> String {
        let mut s = String::from("lon,lat,t,value\n");
        let mut k = 0;
        for t in 1..=2 {
            for lat in [10.0, 10.5] {
                for lon in [-3.0, -2.5] {
                    if Some(k) != skip {
                        s.push_str(&format!("{lon},{lat},{t},{}\n", k as f64 + 0.5));
                    }
                    k += 1;
                }
            }
        }
        s
    }

    #[test]
    fn loads_two_by_two() {
        let f = read_field(small_csv(None).as_bytes(), Scale::Raw).unwrap();
        assert_eq!((f.grid.m1, f.grid.m2, f.t_len), (2, 2, 2));
        assert_eq!(f.grid.mesh, 0.5);
        assert_eq!(f.get(f.grid.index(1, 1), 1), 7.5);
    }

    #[test]
    fn deleted_cell_is_reported() {
        let err = read_field(small_csv(Some(5)).as_bytes(), Scale::Raw).unwrap_err();
        match err {
            Error::IncompleteGrid { i1, i2, t } => assert_eq!((i1, i2, t), (2, 1, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn irregular_spacing_is_rejected() {
        let s = "lon,lat,t,value\n0,0,1,1\n1,0,1,1\n2.5,0,1,1\n";
        assert!(matches!(
            read_field(s.as_bytes(), Scale::Raw),
            Err(Error::IrregularGrid(_))
        ));
    }

    #[test]
    fn quarter_degree_grid_of_216_sites() {
        // 18 x 12 sites at 0.25 degree spacing, rows shuffled
        let mut rows = Vec::new();
        for i in 0..18 {
            for j in 0..12 {
                rows.push(format!("{},{},1,{}\n", -4.5 + 0.25 * i as f64, 46.0 + 0.25 * j as f64, i * j));
            }
        }
        rows.reverse();
        let s = format!("lon,lat,t,value\n{}", rows.concat());
        let f = read_field(s.as_bytes(), Scale::Raw).unwrap();
        assert_eq!((f.grid.m1, f.grid.m2), (18, 12));
        assert!((f.grid.mesh - 0.25).abs() < 1e-12);
        assert_eq!(f.get(f.grid.index(17, 11), 0), (17 * 11) as f64);
    }

    #[test]
    fn mask_examples() {
        let full = build_mask(1.0, 1.0, 1, false).unwrap();
        assert_eq!(full.offsets, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
        let half = build_mask(1.0, 1.0, 1, true).unwrap();
        assert_eq!(half.offsets, vec![(0, 1), (1, 0)]);
        let big = build_mask(1.0, 21.0, 1, false).unwrap();
        let brute = (-21i64..=21)
            .flat_map(|a| (-21i64..=21).map(move |b| (a, b)))
            .filter(|(a, b)| a * a + b * b <= 441)
            .count();
        assert_eq!(big.len(), brute);
        assert_eq!(brute, 1373);
        assert!(build_mask(1.0, 0.5, 1, false).is_err());
        assert!(build_mask(1.0, 1.0, 0, false).is_err());
    }
}
