use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LoraParams {
    pub a: ParamId,
    pub b: ParamId,
    pub config: LoraConfig,
}

/// Affine map on row vectors, `y = x W^T + b`, with an optional low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraParams>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            lora: None,
            in_dim,
            out_dim,
        })
    }

    /// Registers `<name>.lora_a` / `<name>.lora_b` (B zero-initialized).
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, config: LoraConfig, rng: &mut R) -> Result<()> {
        let ad = LoraAdapter::init(config, self.in_dim, self.out_dim, rng)?;
        let a = store.add(format!("{}.lora_a", self.name), ad.a)?;
        let b = store.add(format!("{}.lora_b", self.name), ad.b)?;
        self.lora = Some(LoraParams { a, b, config });
        Ok(())
    }

    /// Rebinds an adapter that already exists in the store (after loading a checkpoint).
    pub fn bind_lora(&mut self, store: &ParamStore, config: LoraConfig) -> Result<()> {
        let a = store.id(&format!("{}.lora_a", self.name))?;
        let b = store.id(&format!("{}.lora_b", self.name))?;
        self.lora = Some(LoraParams { a, b, config });
        Ok(())
    }

    pub fn adapter(&self, store: &ParamStore) -> Result<Option<LoraAdapter>> {
        match self.lora {
            None => Ok(None),
            Some(l) => Ok(Some(LoraAdapter::from_parts(
                l.config,
                store.value(l.a).clone(),
                store.value(l.b).clone(),
            )?)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul_t(x, w, false, true)?;
        if let Some(l) = self.lora {
            let a = g.param(l.a);
            let b = g.param(l.b);
            let h = g.matmul_t(x, a, false, true)?;
            let h = g.matmul_t(h, b, false, true)?;
            let h = g.scale(h, l.config.scale());
            y = g.add(y, h)?;
        }
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}
