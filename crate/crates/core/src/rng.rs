//! Counter-based 64-bit random streams.
//!
//! Every random draw in the crate comes from a [`Stream`] keyed by a run seed
//! and a stream id. Output `i` of a stream is a pure function of
//! `(key, i)`:
//!
//! ```text
//! key      = mix64(seed * GOLDEN ^ mix64(stream_id))
//! output_i = mix64(key + (i + 1) * GOLDEN)        (wrapping arithmetic)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer and `GOLDEN = 0x9E3779B97F4A7C15`.
//! Stream ids are built with [`stream_id`]: FNV-1a over a UTF-8 tag, then each
//! numeric component folded in as `id = mix64(id ^ part)`.
//!
//! Two streams with different ids never share state, so parallel trials and
//! per-batch augmentation streams stay independent and reproducible.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream id from a tag and numeric components.
pub fn stream_id(tag: &str, parts: &[u64]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    for p in parts {
        h = mix64(h ^ p);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Stream {
            key: mix64(seed.wrapping_mul(GOLDEN) ^ mix64(stream)),
            counter: 0,
        }
    }

    /// Shorthand for `Stream::new(seed, stream_id(tag, parts))`.
    pub fn tagged(seed: u64, tag: &str, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(tag, parts))
    }

    /// Output at an arbitrary counter position, without advancing.
    pub fn at(&self, counter: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform_f32()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// First `n` entries of a partial Fisher-Yates shuffle of `0..total`.
    pub fn sample_indices(&mut self, total: usize, n: usize) -> Vec<usize> {
        assert!(n <= total);
        let mut idx: Vec<usize> = (0..total).collect();
        for i in 0..n {
            let j = i + self.below((total - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_indices(n, n)
    }

    /// Uniformly random cyclic permutation (Sattolo). For `n >= 2` no element maps to itself.
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64) as usize;
            p.swap(i, j);
        }
        p
    }
}
