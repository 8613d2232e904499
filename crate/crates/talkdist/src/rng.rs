//! Seeded pseudo-random numbers with a bit-stable stream.
//!
//! Everything stochastic in a run (init, batch sampling, dropout masks,
//! communication noise) draws from `Rng` streams derived from the run seed,
//! so a fixed seed reproduces a run bit-for-bit. The generator is
//! splitmix64; gaussians come from Box-Muller with a cached spare.

/// Deterministic splitmix64 generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f32>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes, used to fan one seed out into
/// independent named streams.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // Scramble once so that small seeds don't start in a low-entropy state.
        let mut s = seed;
        let scrambled = splitmix64(&mut s);
        Rng { state: scrambled, spare_normal: None }
    }

    /// Independent stream for `tag`, derived from `seed`. Streams with
    /// different tags never overlap in practice.
    pub fn derive(seed: u64, tag: &str) -> Self {
        Rng::new(seed ^ tag_hash(tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        // 24 explicit mantissa bits keep the value exactly representable.
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Standard normal via Box-Muller; the second sample of each pair is
    /// cached so draws come in a fixed order.
    pub fn normal(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Reject u1 == 0 to keep ln finite.
        let mut u1 = self.next_f32();
        while u1 <= f32::EPSILON {
            u1 = self.next_f32();
        }
        let u2 = self.next_f32();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f32::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Sample from a categorical distribution given non-negative weights.
    pub fn categorical(&mut self, weights: &[f32]) -> usize {
        let total: f32 = weights.iter().sum();
        let mut u = self.next_f32() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}
