//! Low-rank adapters: `y = W x + (alpha / r) * B (A x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, in_dim: usize, out_dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= in_dim.min(out_dim) {
            return Err(NnError::RankTooLarge {
                rank: self.rank,
                in_dim,
                out_dim,
            });
        }
        if !(self.alpha > 0.0) {
            return Err(NnError::Invalid(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Adapter matrices `a: r x in` and `b: out x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`: the adapted layer starts out equal to the base layer.
    pub fn init<R: Rng + ?Sized>(config: LoraConfig, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate(in_dim, out_dim)?;
        Ok(Self {
            config,
            a: Tensor::randn(&[config.rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            b: Tensor::zeros(&[out_dim, config.rank]),
        })
    }

    pub fn from_parts(config: LoraConfig, a: Tensor, b: Tensor) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return shape_err("LoraAdapter", "A and B must be matrices");
        }
        if a.rows() != config.rank || b.cols() != config.rank {
            return shape_err(
                "LoraAdapter",
                format!("rank {} with A {:?}, B {:?}", config.rank, a.shape(), b.shape()),
            );
        }
        config.validate(a.cols(), b.rows())?;
        Ok(Self { config, a, b })
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// `(alpha / r) * B A`, shaped like the base weight.
    pub fn delta(&self) -> Result<Tensor> {
        let s = self.config.scale();
        Ok(self.b.matmul(&self.a)?.map(|v| v * s))
    }

    /// `W + (alpha / r) * B A`.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        let d = self.delta()?;
        w.zip_map(&d, |a, b| a + b)
    }
}

/// Applies an adapted weight to row vectors `x: n x in`, giving `n x out`.
pub fn lora_forward(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w.rows() != adapter.out_dim() || w.cols() != adapter.in_dim() || x.cols() != w.cols() {
        return shape_err(
            "lora_forward",
            format!("x {:?}, W {:?}, A {:?}, B {:?}", x.shape(), w.shape(), adapter.a.shape(), adapter.b.shape()),
        );
    }
    adapter.config.validate(w.cols(), w.rows())?;
    let base = x.matmul_t(w, false, true)?;
    let low = x.matmul_t(&adapter.a, false, true)?.matmul_t(&adapter.b, false, true)?;
    let s = adapter.config.scale();
    base.zip_map(&low, |b, l| b + s * l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let ad = LoraAdapter::init(LoraConfig { rank: 2, alpha: 4.0 }, 5, 6, &mut rng).unwrap();
        let out = lora_forward(&x, &w, &ad).unwrap();
        assert_eq!(out, x.matmul_t(&w, false, true).unwrap());
    }

    #[test]
    fn rank_one_unit_vectors_add_outer_product() {
        // A = e_1^T, B = e_2 => delta has a single 1 at (2, 1).
        let a = Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![0.0, 0.0, 1.0]).unwrap();
        let ad = LoraAdapter::from_parts(LoraConfig { rank: 1, alpha: 1.0 }, a, b).unwrap();
        let w = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut dense = w.clone();
        dense.data_mut()[2 * 4 + 1] += 1.0;
        let expect = x.matmul_t(&dense, false, true).unwrap();
        let out = lora_forward(&x, &w, &ad).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
        assert!((out.get2(0, 2) - x.matmul_t(&w, false, true).unwrap().get2(0, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = LoraAdapter::init(LoraConfig { rank: 4, alpha: 8.0 }, 4, 16, &mut rng).unwrap_err();
        assert!(matches!(err, NnError::RankTooLarge { .. }));
    }
}
