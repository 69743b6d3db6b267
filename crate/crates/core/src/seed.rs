//! Seed derivation.
//!
//! Every stochastic component owns its own generator. Generators are seeded
//! from the run seed plus a list of labels (utterance id, epoch, step, ...)
//! hashed with SHA-256, so results do not depend on thread scheduling or on
//! the order in which work items are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Something that can be folded into a derived seed.
pub trait SeedPart {
    fn feed(&self, hasher: &mut Sha256);
}

impl SeedPart for str {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update(self.as_bytes());
    }
}

impl SeedPart for &str {
    fn feed(&self, hasher: &mut Sha256) {
        (**self).feed(hasher)
    }
}

impl SeedPart for String {
    fn feed(&self, hasher: &mut Sha256) {
        self.as_str().feed(hasher)
    }
}

macro_rules! int_part {
    ($($t:ty),*) => {$(
        impl SeedPart for $t {
            fn feed(&self, hasher: &mut Sha256) {
                hasher.update((*self as u64).to_le_bytes());
            }
        }
    )*};
}
int_part!(u64, usize, u32);

/// `seed_i = H(seed, parts...)`, truncated to 64 bits.
pub fn derive_seed(seed: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"sslforge");
    hasher.update(seed.to_le_bytes());
    for part in parts {
        part.feed(&mut hasher);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, parts: &[&dyn SeedPart]) -> Rng {
    rng_from(derive_seed(seed, parts))
}
