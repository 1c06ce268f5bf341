//! Counter-based random number streams.
//!
//! A [`RngStream`] is a 64-bit key. Substreams and per-sample generators are
//! derived by mixing tags and sample indices into the key, so the generator
//! for sample `i` depends only on `(master seed, tags..., i)` and never on
//! scheduling. Bulk generation uses xoshiro256++ seeded through SplitMix64.

use crate::math;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Avalanche-mix a tag into a key. Used for both substream derivation and
/// per-sample generator seeding.
#[inline]
fn mix(key: u64, tag: u64) -> u64 {
    let mut state = key ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93);
    let a = splitmix64(&mut state);
    let b = splitmix64(&mut state);
    a ^ b.rotate_left(32)
}

/// Hierarchical stream of random generators addressed by sample index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { key: mix(seed, 0) }
    }

    /// Key identifying this stream (recorded in estimates for reproducibility).
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Derive an independent child stream.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            key: mix(self.key, tag ^ 0xa076_1d64_78bd_642f),
        }
    }

    /// Generator for sample `index` of this stream.
    pub fn sample_rng(&self, index: u64) -> Prng {
        Prng::from_key(mix(self.key, index))
    }
}

/// xoshiro256++ generator with a cached spare normal deviate.
#[derive(Clone, Debug)]
pub struct Prng {
    s: [u64; 4],
    spare: Option<f64>,
}

impl Prng {
    pub fn from_key(key: u64) -> Self {
        let mut state = key;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut state);
        }
        if s == [0u64; 4] {
            s[0] = 0x9e37_79b9_7f4a_7c15;
        }
        Prng { s, spare: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform deviate in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate (Marsaglia polar method).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = math::sqrt(-2.0 * math::ln(s) / s);
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_index_addressed() {
        let s = RngStream::new(7);
        let mut a = s.sample_rng(3);
        let mut b = s.sample_rng(3);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = s.sample_rng(4);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn substreams_do_not_collide_with_parent() {
        let s = RngStream::new(42);
        let t = s.substream(1);
        assert_ne!(s.key(), t.key());
        assert_ne!(
            s.sample_rng(0).next_u64(),
            t.sample_rng(0).next_u64()
        );
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngStream::new(99).sample_rng(0);
        let n = 200_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            m1 += z;
            m2 += z * z;
            m4 += z * z * z * z;
        }
        let n = n as f64;
        assert!((m1 / n).abs() < 0.01);
        assert!((m2 / n - 1.0).abs() < 0.02);
        assert!((m4 / n - 3.0).abs() < 0.1);
    }

    #[test]
    fn uniform_range() {
        let mut rng = RngStream::new(5).sample_rng(11);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
