//! Dense tensor value type, parameter initialization, and the recorded-graph
//! autodiff engine built on top of it.
//!
//! Layout is channel-major row-major: a rank-3 tensor is `C x H x W`, rank-4
//! is `N x C x H x W`, flat index `((n*C + c)*H + y)*W + x`. All storage is
//! `f32`; reduction accumulators for means, variances and losses run in `f64`.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense N-dimensional array of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a value list.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Interpret as image dims `(C, H, W)`; rank must be 3.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "as_chw",
                format!("expected rank-3 C x H x W, got {:?}", self.shape),
            )),
        }
    }

    /// Interpret as batched image dims `(N, C, H, W)`; rank 3 is batch 1.
    pub fn as_nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "as_nchw",
                format!("expected rank-3 or rank-4 tensor, got {:?}", self.shape),
            )),
        }
    }

    /// Error if any value is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                context: context.to_string(),
                index,
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamp every value into `[0, 1]`, returning how many were out of range.
    pub fn clamp01_counting(&mut self) -> usize {
        let mut clamped = 0usize;
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            } else if *v > 1.0 {
                *v = 1.0;
                clamped += 1;
            }
        }
        clamped
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform in `(-sqrt(1/fan_in), +sqrt(1/fan_in))`.
    FanInUniform { fan_in: usize },
    /// Identity-preserving seed for a rank-2 conv weight (entry 1 at column
    /// `row % cols`) plus fan-in uniform noise scaled by `noise`. Keeps a
    /// stack of 1x1 convs near the identity map at initialization.
    IdentityConv { fan_in: usize, noise: f32 },
    Zeros,
    Ones,
}

/// Deterministic initializer: identical `(scheme, seed, shape)` always
/// produces bit-identical values.
#[derive(Debug, Clone, Copy)]
pub struct ParamInit {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl ParamInit {
    pub fn materialize(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = match self.scheme {
            InitScheme::Zeros => vec![0.0; numel],
            InitScheme::Ones => vec![1.0; numel],
            InitScheme::FanInUniform { fan_in } => {
                uniform_values(self.seed, numel, (1.0 / fan_in as f32).sqrt())
            }
            InitScheme::IdentityConv { fan_in, noise } => {
                let bound = (1.0 / fan_in as f32).sqrt() * noise;
                let mut data = uniform_values(self.seed, numel, bound);
                let (rows, cols) = match shape {
                    [r, c] => (*r, *c),
                    _ => (0, 1),
                };
                for r in 0..rows {
                    data[r * cols + r % cols] += 1.0;
                }
                data
            }
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

fn uniform_values(seed: u64, numel: usize, bound: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel)
        .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound)
        .collect()
}

/// Stable per-tensor seed derived from a master seed and the tensor name.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 round to spread bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let init = ParamInit {
            scheme: InitScheme::FanInUniform { fan_in: 9 },
            seed: 42,
        };
        let a = init.materialize(&[4, 3, 3]);
        let b = init.materialize(&[4, 3, 3]);
        assert_eq!(a.data(), b.data());
        let c = ParamInit {
            scheme: InitScheme::FanInUniform { fan_in: 9 },
            seed: 43,
        }
        .materialize(&[4, 3, 3]);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn fan_in_bound_holds() {
        let init = ParamInit {
            scheme: InitScheme::FanInUniform { fan_in: 16 },
            seed: 7,
        };
        let t = init.materialize(&[128]);
        let bound = 0.25f32;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_conv_composes_to_identity_without_noise() {
        // 128x3 -> 128x128 -> 3x128 with zero noise maps x to x for x >= 0.
        let w0 = ParamInit {
            scheme: InitScheme::IdentityConv { fan_in: 3, noise: 0.0 },
            seed: 1,
        }
        .materialize(&[8, 3]);
        let w1 = ParamInit {
            scheme: InitScheme::IdentityConv { fan_in: 8, noise: 0.0 },
            seed: 2,
        }
        .materialize(&[8, 8]);
        let w2 = ParamInit {
            scheme: InitScheme::IdentityConv { fan_in: 8, noise: 0.0 },
            seed: 3,
        }
        .materialize(&[3, 8]);
        let x = [0.3f32, 0.5, 0.9];
        let mut y0 = [0.0f32; 8];
        for o in 0..8 {
            y0[o] = (0..3).map(|i| w0.data()[o * 3 + i] * x[i]).sum();
        }
        let mut y1 = [0.0f32; 8];
        for o in 0..8 {
            y1[o] = (0..8).map(|i| w1.data()[o * 8 + i] * y0[i].max(0.0)).sum();
        }
        let mut y2 = [0.0f32; 3];
        for o in 0..3 {
            y2[o] = (0..8).map(|i| w2.data()[o * 8 + i] * y1[i].max(0.0)).sum();
        }
        assert_eq!(y2, x);
    }

    #[test]
    fn derive_seed_is_stable_and_name_sensitive() {
        assert_eq!(derive_seed(1, "a.w"), derive_seed(1, "a.w"));
        assert_ne!(derive_seed(1, "a.w"), derive_seed(1, "a.b"));
        assert_ne!(derive_seed(1, "a.w"), derive_seed(2, "a.w"));
    }
}
