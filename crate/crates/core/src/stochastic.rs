//! Seeded sampling: the additive-Gaussian source model and the Gumbel-softmax relaxation.
//!
//! Generator: ChaCha12 (`rand_chacha`), whose output stream is specified and identical
//! across platforms. Uniforms take the top 53 bits of a `u64`, clamped to
//! `[2^-53, 1 - 2^-53]`. Gaussians use the Marsaglia polar method with the `libm`
//! logarithm, pairing draws (the second of each pair is held for the next call).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{softmax_rows, Matrix};
use crate::error::{Error, Result};
use crate::math;

const U_MIN: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53
const U_MAX: f64 = 1.0 - U_MIN;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for `(seed, epoch, shard)`.
pub fn derive_seed(seed: u64, epoch: u64, shard: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ shard)
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream for one epoch/shard of a run seeded with `seed`.
    pub fn derived(seed: u64, epoch: u64, shard: u64) -> Self {
        Self::new(derive_seed(seed, epoch, shard))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1), clamped to `[2^-53, 1 - 2^-53]`.
    pub fn uniform(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * U_MIN;
        u.clamp(U_MIN, U_MAX)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * math::ln(s) / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }
}

/// Paired realizations of the source `x` and decoder side information `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub noise_variance: f64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SampleBatch {
        SampleBatch {
            x: self.x[range.clone()].to_vec(),
            y: self.y[range].to_vec(),
            noise_variance: self.noise_variance,
        }
    }
}

/// Draws `n` pairs with `y ~ N(0, 1)` and `x = y + n`, `n ~ N(0, noise_variance)`.
/// Per pair, `y` is drawn before the noise.
pub fn sample_pair_batch(n: usize, noise_variance: f64, rng: &mut RngState) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::contract(
            "sample batch must contain at least one pair",
        ));
    }
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::domain(format!(
            "noise variance must be finite and non-negative, got {noise_variance}"
        )));
    }
    let std = noise_variance.sqrt();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let yi = rng.standard_normal();
        let ni = std * rng.standard_normal();
        y.push(yi);
        x.push(yi + ni);
    }
    Ok(SampleBatch {
        x,
        y,
        noise_variance,
    })
}

/// `-ln(-ln u)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -math::ln(-math::ln(u))
}

/// A `rows x cols` matrix of independent standard Gumbel draws.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| gumbel_from_uniform(rng.uniform()))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Row-wise `softmax((logits + g) / tau)` with fresh Gumbel noise `g`.
pub fn gumbel_softmax(logits: &Matrix, tau: f64, rng: &mut RngState) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let g = sample_gumbel(logits.rows(), logits.cols(), rng);
    let perturbed: Vec<f64> = logits
        .data()
        .iter()
        .zip(g.data())
        .map(|(l, g)| (l + g) / tau)
        .collect();
    softmax_rows(&Matrix::from_vec(logits.rows(), logits.cols(), perturbed)?)
}

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn hard_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
