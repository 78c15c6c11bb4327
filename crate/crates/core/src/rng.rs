//! Counter-based splittable random streams.
//!
//! Every random quantity in the crate is drawn from a [`StreamRng`] keyed by
//! a root seed plus a list of stream labels (path id, replicate id, noise
//! domain, ...). Streams with different keys are statistically independent,
//! so paths can run on any number of worker threads and still reproduce
//! bit-identically.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A splittable counter-based generator: output n is a pure function of
/// (key, n), so streams can be forked and replayed without shared state.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::from_parts(seed, &[stream])
    }

    /// Keyed by the seed and an arbitrary label path, e.g.
    /// `(seed, [DOMAIN_PATHS, path_id])`.
    pub fn from_parts(seed: u64, parts: &[u64]) -> Self {
        let mut key = splitmix64(seed ^ GOLDEN);
        for &p in parts {
            key = splitmix64(key.wrapping_add(GOLDEN).wrapping_add(splitmix64(p)));
        }
        StreamRng { key, counter: 0, spare_normal: None }
    }

    /// Fork an independent child stream; the parent is not advanced.
    pub fn substream(&self, label: u64) -> StreamRng {
        StreamRng {
            key: splitmix64(self.key.wrapping_add(GOLDEN).wrapping_add(splitmix64(label))),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let n = self.counter;
        self.counter += 1;
        splitmix64(self.key.wrapping_add(n.wrapping_mul(GOLDEN)))
    }

    /// Uniform in (0, 1), never exactly 0 or 1.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller; pairs are cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Bernoulli(p).
    #[inline]
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_uniform() < p
    }
}

/// Domain labels that keep unrelated stream families apart.
pub mod domain {
    pub const SDE_PATH: u64 = 1;
    pub const PARTICLE_IDIOSYNCRATIC: u64 = 2;
    pub const PARTICLE_COMMON: u64 = 3;
    pub const COUPLING_PATH: u64 = 4;
    pub const SWEEP: u64 = 5;
}
