//! Addressable random streams.
//!
//! A stream is identified by `(seed, stream_id)` and backed by ChaCha8, whose keystream is a pure
//! function of key, stream number and block counter. Sub-streams are derived by hashing a tag into
//! the stream id, so the values a component sees never depend on how much another component
//! consumed or on thread scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a, used to turn sub-stream names into tags.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Derives an independent stream from this stream's address and `tag`.
    ///
    /// The result depends only on `(seed, stream_id, tag)`, not on how many values were drawn.
    pub fn substream(&self, tag: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream::new(self.seed, id)
    }

    pub fn named(&self, name: &str) -> RngStream {
        self.substream(fnv1a(name))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_sequence() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let xa: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 8);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_ignores_consumption() {
        let a = RngStream::new(1, 2);
        let mut b = RngStream::new(1, 2);
        for _ in 0..37 {
            b.uniform();
        }
        let mut sa = a.substream(9);
        let mut sb = b.substream(9);
        assert_eq!(sa.next_u64(), sb.next_u64());
        assert_ne!(a.substream(9).stream_id(), a.substream(10).stream_id());
        assert_ne!(a.named("init").stream_id(), a.named("shuffle").stream_id());
    }

    #[test]
    fn shuffle_singleton() {
        let mut s = RngStream::new(3, 0);
        let mut v = vec![0usize];
        s.shuffle(&mut v);
        assert_eq!(v, vec![0]);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut s = RngStream::new(3, 0);
        let mut p = s.permutation(500);
        p.sort_unstable();
        assert_eq!(p, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        let mut s = RngStream::new(2024, 1);
        let n = 100_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut s = RngStream::new(5, 5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }
}
