//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, path)`. Substreams derive their key by hashing the
//! parent key with the child name, so adding a new consumer never shifts the values drawn
//! by an existing one.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"twostage/rng/root");
        h.update(seed.to_le_bytes());
        Self::from_key(seed, h.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream named `name` under this one. `"init/layer0/Wg"` is the same as
    /// `.substream("init").substream("layer0").substream("Wg")`.
    pub fn substream(&self, name: &str) -> Rng {
        name.split('/')
            .filter(|p| !p.is_empty())
            .fold(self.clone(), |rng, part| rng.child(part))
    }

    fn child(&self, part: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
        Self::from_key(self.seed, h.finalize().into())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite std")
            .sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.inner)).collect()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        // Fisher-Yates, spelled out so the permutation does not depend on rand internals.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, X>(&mut self, items: &'a [X]) -> &'a X {
        &items[self.below(items.len())]
    }
}
