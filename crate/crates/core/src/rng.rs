//! Counter-keyed random streams.
//!
//! A stream is selected by `(seed, domain, index)`. Two different indices never
//! share state, so work items can be generated in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains; keeps unrelated consumers of one seed apart.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    Render = 1,
    Taxonomy = 2,
    Init = 3,
    Shuffle = 4,
    Negatives = 5,
    KMeans = 6,
    RepBank = 7,
    Estimate = 8,
    Split = 9,
    Augment = 10,
}

pub fn keyed(seed: u64, domain: Domain, index: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
