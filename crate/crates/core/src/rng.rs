//! Counter-based random streams.
//!
//! Every draw is `philox4x32_10(key = seed, counter = [n_lo, n_hi, stream_lo,
//! stream_hi])`, so a stream is a pure function of `(seed, stream-id)` and
//! two streams with different ids walk disjoint regions of the counter
//! space. Work that may run in any order (MC samples, per-step dropout,
//! per-epoch shuffles, patch draws) derives its own stream with
//! [`RngStream::derive`] instead of sharing a sequential generator.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Purpose tags occupying the top byte of derived stream ids.
pub mod tags {
    pub const INIT: u8 = 1;
    pub const TRAIN_DROPOUT: u8 = 2;
    pub const SHUFFLE: u8 = 3;
    pub const MC_SAMPLE: u8 = 4;
    pub const PATCH: u8 = 5;
    pub const SYNTH: u8 = 6;
    pub const SWEEP: u8 = 7;
}

/// Philox4x32 with ten rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut key = key;
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// SplitMix64 finaliser, used to turn `(seed, tag, index)` into child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fresh 64-bit seed for a sub-experiment (e.g. one sweep repetition).
pub fn derive_seed(seed: u64, tag: u8, index: u64) -> u64 {
    mix64(seed ^ mix64((u64::from(tag) << 56) ^ index))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    buf: [u32; 4],
    used: usize,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream, counter: 0, buf: [0; 4], used: 4 }
    }

    /// Stream `tag << 56 | index`. Distinct `(tag, index)` pairs never share
    /// an id as long as `index < 2^56`.
    pub fn derive(seed: u64, tag: u8, index: u64) -> Self {
        assert!(index < (1 << 56), "stream index {index} exceeds 2^56");
        Self::new(seed, (u64::from(tag) << 56) | (index & ((1 << 56) - 1)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    fn refill(&mut self) {
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        let ctr = [self.counter as u32, (self.counter >> 32) as u32, self.stream as u32, (self.stream >> 32) as u32];
        self.buf = philox4x32_10(ctr, key);
        self.counter = self.counter.wrapping_add(1);
        self.used = 0;
    }

    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.refill();
        }
        let v = self.buf[self.used];
        self.used += 1;
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box-Muller (one value per call, the sine branch
    /// is discarded so the stream position stays simple to reason about).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn philox_known_answers() {
        // Random123 reference vectors.
        assert_eq!(philox4x32_10([0; 4], [0; 2]), [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]);
        assert_eq!(philox4x32_10([u32::MAX; 4], [u32::MAX; 2]), [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]);
        assert_eq!(
            philox4x32_10([0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344], [0xa4093822, 0x299f31d0]),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn same_seed_and_stream_repeat() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..1000).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..1000).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut c = RngStream::new(42, 8);
        assert_ne!(a[0], c.next_u64());
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let mut r = RngStream::new(1, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        let sigma = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(3, 1);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(9, 9);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            let v = r.below(7) as usize;
            seen[v] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }

    #[test]
    fn derived_streams_are_distinct() {
        let a = RngStream::derive(5, tags::MC_SAMPLE, 3);
        let b = RngStream::derive(5, tags::MC_SAMPLE, 4);
        let c = RngStream::derive(5, tags::SHUFFLE, 3);
        assert_ne!(a.stream_id(), b.stream_id());
        assert_ne!(a.stream_id(), c.stream_id());
        assert_ne!(derive_seed(5, tags::SWEEP, 0), derive_seed(5, tags::SWEEP, 1));
    }
}
