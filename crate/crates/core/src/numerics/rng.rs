//! Deterministic random number generation: splitmix64 for uniforms,
//! Box-Muller for Gaussians. Same seed, same stream, every run.

/// Splitmix64 generator with named sub-streams.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_gauss: Option<f64>,
}

/// Splitmix64 finalizer, used both as the output function and to scramble
/// seeds. Every splitmix stream is a shift of one global orbit, so seeds must
/// land at avalanche-distance offsets or nearby seeds would yield shifted
/// copies of the same draw sequence.
fn scramble(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: scramble(seed),
            cached_gauss: None,
        }
    }

    /// Derives an independent child stream from a label, so that e.g. data
    /// generation and noise draws never share a sequence.
    pub fn stream(&self, label: &str) -> Rng {
        // FNV-1a over the label, folded into the parent state.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        Rng::new(self.state ^ h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 high bits give a full-precision f64 mantissa.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller; pairs are cached.
    pub fn gauss(&mut self) -> f64 {
        if let Some(z) = self.cached_gauss.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_gauss(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.gauss();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_diverge_by_label() {
        let root = Rng::new(7);
        let mut data = root.stream("data");
        let mut noise = root.stream("noise");
        let d: Vec<u64> = (0..8).map(|_| data.next_u64()).collect();
        let n: Vec<u64> = (0..8).map(|_| noise.next_u64()).collect();
        assert_ne!(d, n);
        // Re-derived stream replays identically.
        let mut again = root.stream("data");
        let d2: Vec<u64> = (0..8).map(|_| again.next_u64()).collect();
        assert_eq!(d, d2);
    }

    #[test]
    fn gauss_moments_are_sane() {
        let mut rng = Rng::new(123);
        let n = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.gauss();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
