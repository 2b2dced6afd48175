//! Exact simulation of Brown-Resnick vectors by extremal functions.

use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};

use super::Semivariogram;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

const ROW_BLOCK: usize = 128;

/// Prefactored sampler for a fixed site set.
///
/// The Gaussian increments are pinned at the first site: ε(s₀) = 0 and
/// Cov(ε(sᵢ), ε(sⱼ)) = γ(sᵢ−s₀) + γ(sⱼ−s₀) − γ(sᵢ−sⱼ).
#[derive(Clone, Debug)]
pub struct BrSimulator {
    n: usize,
    gamma: Vec<f64>,
    chol: Vec<f64>,
    batch: usize,
}

impl BrSimulator {
    pub fn new(sites: &[[f64; 2]], sv: &Semivariogram) -> Result<Self> {
        let n = sites.len();
        if n == 0 {
            return Err(Error::Invalid("simulation needs at least one site".into()));
        }
        let mut gamma = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = (sites[i][0] - sites[j][0]).hypot(sites[i][1] - sites[j][1]);
                if d == 0.0 {
                    return Err(Error::Invalid(format!("sites {j} and {i} coincide")));
                }
                let g = sv.at_distance(d);
                gamma[i * n + j] = g;
                gamma[j * n + i] = g;
            }
        }
        let m = n - 1;
        let mut chol = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let cov = gamma[(i + 1) * n] + gamma[(j + 1) * n] - gamma[(i + 1) * n + j + 1];
                let dot: f64 = chol[i * m..i * m + j]
                    .iter()
                    .zip(&chol[j * m..j * m + j])
                    .map(|(a, b)| a * b)
                    .sum();
                let s = cov - dot;
                if i == j {
                    if !(s > 0.0) {
                        let near = (0..=i)
                            .min_by(|&a, &b| gamma[(i + 1) * n + a].partial_cmp(&gamma[(i + 1) * n + b]).unwrap())
                            .unwrap_or(0);
                        return Err(Error::Cholesky(near, i + 1));
                    }
                    chol[i * m + i] = s.sqrt();
                } else {
                    chol[i * m + j] = s / chol[j * m + j];
                }
            }
        }
        let batch = (n / 8).clamp(1, 64);
        Ok(Self {
            n,
            gamma,
            chol,
            batch,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    /// One exact draw on the site set, standard Fréchet margins.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.n;
        let mut z = vec![0.0; n];
        let mut gen = IncrementBatches::new(self);
        let mut y = vec![0.0; n];
        for j in 0..n {
            let mut e: f64 = rng.sample(Exp1);
            let mut zeta = 1.0 / e;
            while zeta > z[j] {
                let eps = gen.next(rng);
                let ej = if j == 0 { 0.0 } else { eps[j - 1] };
                let grow = &self.gamma[j * n..(j + 1) * n];
                let eps_at = |i: usize| if i == 0 { 0.0 } else { eps[i - 1] };
                // functions that exceed an earlier site were already accounted for there
                let valid = (0..j).all(|i| zeta * (eps_at(i) - ej - grow[i]).exp() < z[i]);
                if valid {
                    for i in 0..n {
                        y[i] = zeta * (eps_at(i) - ej - grow[i]).exp();
                    }
                    y[j] = zeta;
                    for (zi, yi) in z.iter_mut().zip(&y) {
                        if *yi > *zi {
                            *zi = *yi;
                        }
                    }
                }
                e += rng.sample::<f64, _>(Exp1);
                zeta = 1.0 / e;
            }
        }
        z
    }
}

/// Columns of L·N generated a batch at a time with a blocked triangular product.
struct IncrementBatches<'a> {
    sim: &'a BrSimulator,
    normals: Vec<f64>,
    eps: Vec<f64>,
    next_col: usize,
}

impl<'a> IncrementBatches<'a> {
    fn new(sim: &'a BrSimulator) -> Self {
        let m = sim.n - 1;
        Self {
            sim,
            normals: vec![0.0; m * sim.batch],
            eps: vec![0.0; m * sim.batch],
            next_col: sim.batch,
        }
    }

    fn refill(&mut self, rng: &mut Rng) {
        let m = self.sim.n - 1;
        let b = self.sim.batch;
        for v in self.normals.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if m == 0 {
            return;
        }
        // column-major N and C: element (i, col) at col * m + i
        let mut r0 = 0;
        while r0 < m {
            let r1 = (r0 + ROW_BLOCK).min(m);
            unsafe {
                matrixmultiply::dgemm(
                    r1 - r0,
                    r1,
                    b,
                    1.0,
                    self.sim.chol.as_ptr().add(r0 * m),
                    m as isize,
                    1,
                    self.normals.as_ptr(),
                    1,
                    m as isize,
                    0.0,
                    self.eps.as_mut_ptr().add(r0),
                    1,
                    m as isize,
                );
            }
            r0 = r1;
        }
        self.next_col = 0;
    }

    fn next(&mut self, rng: &mut Rng) -> &[f64] {
        if self.next_col == self.sim.batch {
            self.refill(rng);
        }
        let m = self.sim.n - 1;
        let c = self.next_col;
        self.next_col += 1;
        &self.eps[c * m..(c + 1) * m]
    }
}

/// Exact Brown-Resnick draw on `sites` from the stream `(seed, 0)`.
pub fn simulate_br(sites: &[[f64; 2]], sv: &Semivariogram, seed: u64) -> Result<Vec<f64>> {
    let sim = BrSimulator::new(sites, sv)?;
    let mut rng = substream(seed, &[0]);
    Ok(sim.sample(&mut rng))
}
