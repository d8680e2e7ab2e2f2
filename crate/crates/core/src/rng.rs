//! Seeded, platform-independent random stream.
//!
//! Backed by ChaCha8 in counter mode: the 64-bit seed is expanded to a 256-bit
//! key with `SeedableRng::seed_from_u64`, and the stream position is a 128-bit
//! word counter. Saving `(seed, word_pos)` is enough to resume the stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Restore a stream saved with [`Rng::state`].
    pub fn from_state(seed: u64, word_pos: u128) -> Self {
        let mut r = Self::new(seed);
        r.inner.set_word_pos(word_pos);
        r
    }

    pub fn state(&self) -> (u64, u128) {
        (self.seed, self.inner.get_word_pos())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, derived deterministically from this one.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from the first run of this generator; any change to the stream
    // (crate upgrade, seeding change) must show up here.
    const GOLDEN_SEED_42: [u64; 16] = [
        0xae90bfb5395d5ba1,
        0xf3453fc625799188,
        0x6d71b708c5b6538c,
        0xa09ab2f958166752,
        0x49e149d8bcb642b0,
        0x2663b45ba45d829e,
        0x4edbbf0150871314,
        0xcdca9b0d2a122884,
        0xc5708f62a0ce0c00,
        0x3d13ec83d34b3198,
        0x81c206f789560628,
        0xe6dc929b60e85ba3,
        0xf4fd507395c7402d,
        0x97cd718ec598034d,
        0xba9289a0e52717aa,
        0x2ddbe23b4ee7b7a4,
    ];

    #[test]
    fn golden_stream() {
        let mut r = Rng::new(42);
        let got: Vec<u64> = (0..16).map(|_| r.next_u64()).collect();
        assert_eq!(got, GOLDEN_SEED_42, "got {got:#018x?}");
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(7).next_u64(), Rng::new(8).next_u64());
    }

    #[test]
    fn state_round_trip() {
        let mut a = Rng::new(99);
        for _ in 0..37 {
            a.normal();
        }
        let (seed, pos) = a.state();
        let mut b = Rng::from_state(seed, pos);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
