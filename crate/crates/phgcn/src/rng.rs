//! Deterministic pseudo-random number generation.
//!
//! Every random draw in the library flows through two fixed, publicly
//! documented generators so that datasets, parameter initialization, and
//! training shuffles can be reproduced bit-for-bit by an independent
//! implementation:
//!
//! * [`SplitMix64`] (Steele, Lea, Flood 2014) expands seeds and derives
//!   per-subsystem seed streams.
//! * [`Xoshiro256StarStar`] (Blackman, Vigna 2018) produces the actual
//!   variates. Its four state words are the first four SplitMix64 outputs
//!   for the seed.
//!
//! Uniform doubles take the high 53 bits of a 64-bit word. Standard normals
//! use the Marsaglia polar method (rejection on the unit disc, then
//! `sqrt(-2 ln s / s)` scaling), which produces variates in pairs; the
//! second of each pair is cached and returned by the next call. Bounded
//! integers use the multiply-high reduction `(x * n) >> 64`.

/// SplitMix64 sequence generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Seed-splitting rule: stream `k` of a root seed is the `(k+1)`-th
/// SplitMix64 output for that seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut sm = SplitMix64::new(root);
    let mut out = 0;
    for _ in 0..=stream {
        out = sm.next_u64();
    }
    out
}

/// xoshiro256** generator with a cached normal variate.
#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Xoshiro256StarStar {
    /// Seed the four state words from SplitMix64, per the reference
    /// recommendation. The all-zero state (unreachable in practice) is
    /// patched to a nonzero constant.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let mut s = [0u64; 4];
        for word in &mut s {
            *word = sm.next_u64();
        }
        if s == [0; 4] {
            s[0] = 0x9E37_79B9_7F4A_7C15;
        }
        Xoshiro256StarStar {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`: the high 53 bits scaled by 2⁻⁵³.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe as a logarithm argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate via the Marsaglia polar method.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let v1 = 2.0 * self.next_f64_open() - 1.0;
            let v2 = 2.0 * self.next_f64_open() - 1.0;
            let s = v1 * v1 + v2 * v2;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v2 * factor);
                return v1 * factor;
            }
        }
    }

    /// Uniform integer in `[0, n)` via multiply-high reduction.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle, descending index order.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
