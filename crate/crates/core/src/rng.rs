//! Seeded pseudo-random number generation.
//!
//! Every stochastic choice in the crate flows through a [`SplitMix64`]
//! handle passed in by the caller; there is no global generator. The
//! splitmix64 recurrence (Sebastiano Vigna) has published test vectors and
//! is trivially reproducible in any language, which is what makes whole
//! runs replayable bit-for-bit from a single seed.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E3779B97F4A7C15;

/// Source of raw 64-bit random words plus derived draws.
///
/// Implemented by [`SplitMix64`] for real runs and by scripted test doubles
/// for unit tests that need exact control over the drawn values.
pub trait RandomSource {
    fn next_u64(&mut self) -> u64;

    /// Uniform draw in `[lo, hi)` using the top 53 bits of one word:
    /// `lo + (next_u64 >> 11) * 2^-53 * (hi - lo)`.
    fn uniform_f64(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::precondition(format!(
                "uniform_f64: bounds must be finite, got [{lo}, {hi})"
            )));
        }
        if lo >= hi {
            return Err(Error::precondition(format!(
                "uniform_f64: requires lo < hi, got [{lo}, {hi})"
            )));
        }
        let frac = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        Ok(lo + frac * (hi - lo))
    }

    /// Unbiased integer in `[lo, hi]` inclusive via rejection sampling.
    /// A degenerate range (`lo == hi`) consumes no draw.
    fn uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64> {
        if lo > hi {
            return Err(Error::precondition(format!(
                "uniform_int: requires lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if lo == hi {
            return Ok(lo);
        }
        let range = (hi as i128 - lo as i128 + 1) as u64;
        loop {
            let bits = self.next_u64();
            let val = bits % range;
            // Accept only draws from complete blocks of `range` values.
            if bits - val <= u64::MAX - (range - 1) {
                return Ok(lo + val as i64);
            }
        }
    }

    /// True with probability `p`.
    fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::precondition(format!(
                "bernoulli: p must be in [0, 1], got {p}"
            )));
        }
        Ok(self.uniform_f64(0.0, 1.0)? < p)
    }
}

/// splitmix64 generator state. The output sequence is a pure function of
/// the seed.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent child stream: one parent step, then an
    /// additive constant. The parent continues from the advanced state, so
    /// the fork costs exactly one parent draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64().wrapping_add(GOLDEN_GAMMA))
    }
}

impl RandomSource for SplitMix64 {
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
}

/// Parses a seed given as decimal or 0x-prefixed hexadecimal.
pub fn parse_seed(text: &str) -> Result<u64> {
    let t = text.trim();
    let parsed = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        t.parse::<u64>()
    };
    parsed.map_err(|_| Error::config(format!("seed: expected decimal or 0x hex u64, got `{text}`")))
}

/// Test double yielding a fixed sequence of words.
#[cfg(test)]
pub struct ScriptedRng {
    vals: Vec<u64>,
    next: usize,
}

#[cfg(test)]
impl ScriptedRng {
    pub fn new(vals: Vec<u64>) -> Self {
        Self { vals, next: 0 }
    }

    /// Word that makes `uniform_f64(lo, hi)` return (approximately) `want`.
    /// The upper endpoint clamps to the largest reachable draw.
    pub fn word_for_uniform(want: f64, lo: f64, hi: f64) -> u64 {
        let frac = (want - lo) / (hi - lo);
        let k = ((frac * (1u64 << 53) as f64).round() as u64).min((1u64 << 53) - 1);
        k << 11
    }
}

#[cfg(test)]
impl RandomSource for ScriptedRng {
    fn next_u64(&mut self) -> u64 {
        let v = self.vals[self.next];
        self.next += 1;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_published_vectors() {
        // First outputs of the reference algorithm for seed 0.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220A8397B1DCDAF);
        assert_eq!(r.next_u64(), 0x6E789E6AA1B965F4);
        assert_eq!(r.next_u64(), 0x06C45D188009454F);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SplitMix64::new(0xDEADBEEF);
        let mut b = SplitMix64::new(0xDEADBEEF);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn fork_advances_parent_by_one_step() {
        let mut forked = SplitMix64::new(7);
        let mut plain = SplitMix64::new(7);
        let _ = plain.next_u64();
        let child = forked.fork();
        let mut child2 = child.clone();
        // Parent continues exactly where a single draw would have left it.
        for _ in 0..100 {
            assert_eq!(forked.next_u64(), plain.next_u64());
        }
        // Child streams are reproducible.
        let mut child = child;
        for _ in 0..100 {
            assert_eq!(child.next_u64(), child2.next_u64());
        }
    }

    #[test]
    fn uniform_f64_zero_word_maps_to_lo() {
        let mut r = ScriptedRng::new(vec![0]);
        assert_eq!(r.uniform_f64(0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_f64_first_draw_seed_zero() {
        // (0xE220A8397B1DCDAF >> 11) * 2^-53, from the seed-0 golden output.
        let expect = (0xE220A8397B1DCDAFu64 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let mut r = SplitMix64::new(0);
        assert_eq!(r.uniform_f64(0.0, 1.0).unwrap(), expect);
    }

    #[test]
    fn uniform_f64_range_containment() {
        let mut r = SplitMix64::new(11);
        for _ in 0..5000 {
            let v = r.uniform_f64(2.0, 2.0001).unwrap();
            assert!((2.0..2.0001).contains(&v), "{v} out of range");
        }
    }

    #[test]
    fn uniform_f64_rejects_bad_bounds() {
        let mut r = SplitMix64::new(0);
        assert!(r.uniform_f64(1.0, 1.0).is_err());
        assert!(r.uniform_f64(2.0, 1.0).is_err());
        assert!(r.uniform_f64(0.0, f64::INFINITY).is_err());
        assert!(r.uniform_f64(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn uniform_int_degenerate_range_consumes_nothing() {
        let mut r = ScriptedRng::new(vec![]);
        assert_eq!(r.uniform_int(6, 6).unwrap(), 6);
        assert_eq!(r.uniform_int(0, 0).unwrap(), 0);
    }

    #[test]
    fn uniform_int_rejects_inverted_range() {
        let mut r = SplitMix64::new(0);
        assert!(r.uniform_int(8, 6).is_err());
    }

    #[test]
    fn uniform_int_frequencies_within_3_sigma() {
        let mut r = SplitMix64::new(42);
        let n = 30_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[(r.uniform_int(6, 8).unwrap() - 6) as usize] += 1;
        }
        // Binomial(n, 1/3): sigma = sqrt(n * p * (1-p)).
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn uniform_int_exactly_unbiased_on_synthetic_range() {
        // For range 3, 2^64 - 1 is a multiple of 3, so the single word
        // u64::MAX must be rejected and every residue class accepted
        // equally often over any aligned block of words.
        let mut counts = [0usize; 3];
        for w in 0..300u64 {
            let mut r = ScriptedRng::new(vec![w]);
            counts[r.uniform_int(0, 2).unwrap() as usize] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
        let mut r = ScriptedRng::new(vec![u64::MAX, 5]);
        assert_eq!(r.uniform_int(0, 2).unwrap(), 2); // MAX rejected, 5 % 3 = 2
    }

    #[test]
    fn uniform_int_negative_bounds() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let v = r.uniform_int(-2, 2).unwrap();
            assert!((-2..=2).contains(&v));
        }
    }

    #[test]
    fn bernoulli_endpoints_and_rate() {
        let mut r = SplitMix64::new(9);
        for _ in 0..100 {
            assert!(!r.bernoulli(0.0).unwrap());
            assert!(r.bernoulli(1.0).unwrap());
        }
        let n = 30_000usize;
        let hits = (0..n).filter(|_| r.bernoulli(0.5).unwrap()).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 * 0.5).abs() < 3.0 * sigma);
        assert!(r.bernoulli(1.5).is_err());
        assert!(r.bernoulli(-0.1).is_err());
    }

    #[test]
    fn parse_seed_accepts_decimal_and_hex() {
        assert_eq!(parse_seed("42").unwrap(), 42);
        assert_eq!(parse_seed("0xFF").unwrap(), 255);
        assert_eq!(parse_seed("0Xff").unwrap(), 255);
        assert!(parse_seed("nope").is_err());
    }
}
