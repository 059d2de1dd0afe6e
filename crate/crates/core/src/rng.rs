//! Deterministic, splittable, counter-based random numbers.
//!
//! Every draw is a pure hash of `(master_seed, stream_id, counter)`, so
//! streams can be split for parallel work without coordination and any
//! run replays bit-identically from its seed. Normal variates use the
//! Box-Muller transform: a fixed two-uniforms-per-pair consumption with
//! no rejection loop, so the counter advance per draw is data-independent.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xA076_1D64_78BD_642F;

/// SplitMix64 finalizer; bijective on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream. Copyable value type; advancing the
/// counter is the only mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream { master_seed, stream_id, counter: 0 }
    }

    /// Child stream whose id is a collision-resistant mix of the parent
    /// stream id and `task_id`. The parent is left untouched.
    pub fn split(&self, task_id: u64) -> RngStream {
        let sid = mix64(
            self.stream_id
                ^ GOLDEN.wrapping_mul(task_id).wrapping_add(STREAM_SALT),
        );
        RngStream { master_seed: self.master_seed, stream_id: sid, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = c.wrapping_add(1);
        let key = mix64(
            self.master_seed ^ mix64(self.stream_id.wrapping_mul(GOLDEN).wrapping_add(STREAM_SALT)),
        );
        mix64(key.wrapping_add(GOLDEN.wrapping_mul(c)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) + 1) as f64 * SCALE
    }

    /// One standard-normal pair (Box-Muller).
    #[inline]
    pub fn gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `d` i.i.d. standard-normal draws.
    pub fn gaussian_vec(&mut self, d: usize) -> Vec<f64> {
        assert!(d >= 1, "gaussian sample dimension must be >= 1");
        let mut out = Vec::with_capacity(d + 1);
        while out.len() < d {
            let (a, b) = self.gaussian_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(d);
        out
    }

    /// Fills `buf` with standard-normal draws.
    pub fn fill_gaussian(&mut self, buf: &mut [f64]) {
        let mut i = 0;
        while i + 1 < buf.len() {
            let (a, b) = self.gaussian_pair();
            buf[i] = a;
            buf[i + 1] = b;
            i += 2;
        }
        if i < buf.len() {
            buf[i] = self.gaussian_pair().0;
        }
    }

    /// Uniform index in [0, n).
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Standalone form of [`RngStream::gaussian_vec`].
pub fn gaussian_sample(rng: &mut RngStream, d: usize) -> Vec<f64> {
    rng.gaussian_vec(d)
}
