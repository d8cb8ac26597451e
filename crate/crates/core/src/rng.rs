//! Counter-based pseudo-random generator.
//!
//! Output `i` of a stream with key `k` is `splitmix64(k + (i + 1) * GAMMA)`,
//! where `splitmix64` is the SplitMix64 finalizer and `GAMMA` is the 64-bit
//! golden-ratio increment `0x9E37_79B9_7F4A_7C15`. A stream is fully
//! determined by `(key, counter)`, so it is identical on every platform.
//!
//! Sub-streams are derived by name (FNV-1a hash of the name mixed into the
//! key) or by integer index; all randomness in the crate flows from one
//! master seed through such derivations.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            key: splitmix64(seed),
            counter: 0,
        }
    }

    /// The master seed this stream descends from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream keyed by `name`. Does not advance `self`.
    pub fn derive(&self, name: &str) -> Rng {
        Rng {
            seed: self.seed,
            key: splitmix64(self.key ^ fnv1a(name)),
            counter: 0,
        }
    }

    /// Independent sub-stream keyed by an integer (sample index, epoch, ...).
    pub fn derive_index(&self, index: u64) -> Rng {
        Rng {
            seed: self.seed,
            key: splitmix64(self.key.wrapping_add(splitmix64(index ^ GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (n > 0), by rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller (one draw per pair, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to two standard deviations by resampling.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
