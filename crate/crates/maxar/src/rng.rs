//! Counter-based random substreams.
//!
//! Every parallel work item draws from its own ChaCha stream keyed by the run
//! seed and a tuple of indices, so results never depend on scheduling.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, keys...)`.
pub fn substream(seed: u64, keys: &[u64]) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = 0x2545_F491_4F6C_DD1D_u64;
    for &k in keys {
        id = splitmix(id ^ splitmix(k));
    }
    rng.set_stream(id);
    rng
}

/// Standard Fréchet draw, CDF exp(-1/z).
#[inline]
pub fn frechet(rng: &mut Rng) -> f64 {
    let e: f64 = rng.sample(Exp1);
    1.0 / e
}
