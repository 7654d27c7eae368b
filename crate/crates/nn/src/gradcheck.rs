//! Central finite-difference gradient checks.
//!
//! Numeric derivatives use Ridders' extrapolation: central differences at a
//! shrinking sequence of steps starting from `FD_STEP`, combined in a
//! Richardson tableau that also tracks its own error estimate. The result
//! is accurate far beyond a single fixed-step difference, both where the
//! loss is strongly curved (layer norm on rows with little spread) and where
//! rounding in a wide summed loss would swamp small components.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`;
//! components smaller than the floor are therefore held to an absolute bound
//! of `REL_FLOOR * tolerance`.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionMask;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::lora::LoraConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Initial (largest) step of the extrapolation.
pub const FD_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.checked += other.checked;
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_rel = self.max_rel.max(rel);
        self.max_abs = self.max_abs.max(abs);
        self.checked += 1;
    }

    pub fn passes(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

/// Ridders' derivative of `f` at `x`, where `f(dx)` evaluates at `x + dx`.
fn stencil(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const TABLE: usize = 10;
    const SAFE: f64 = 2.0;
    let mut h = FD_STEP;
    let mut a = [[0.0f64; TABLE]; TABLE];
    a[0][0] = (f(h)? - f(-h)?) / (2.0 * h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..TABLE {
        h /= SHRINK;
        a[0][i] = (f(h)? - f(-h)?) / (2.0 * h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}

/// Checks gradients with respect to the given input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    let grads = g.backward(l)?;

    let mut report = GradCheck::default();
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zero).clone();
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            let numeric = stencil(|dx| {
                xs[k].data_mut()[i] = orig + dx;
                eval(&xs)
            })?;
            xs[k].data_mut()[i] = orig;
            report.record(analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every trainable parameter in `store`.
pub fn check_params<F>(store: &mut ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<(crate::params::ParamId, Tensor)> = {
        let mut g = Graph::with_store(store);
        let l = f(&mut g)?;
        let grads = g.backward(l)?;
        store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(id, p)| {
                let t = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (id, t)
            })
            .collect()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_store(s);
        let l = f(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheck::default();
    for (id, ga) in analytic {
        for i in 0..ga.numel() {
            let orig = store.value(id).data()[i];
            let numeric = stencil(|dx| {
                store.get_mut(id).value.data_mut()[i] = orig + dx;
                eval(store)
            })?;
            store.get_mut(id).value.data_mut()[i] = orig;
            report.record(ga.data()[i], numeric);
        }
    }
    Ok(report)
}

/// `sum(y * w)` for a fixed random weighting `w`, so every output entry
/// receives a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.input(w.clone().reshape(g.value(y).shape())?);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn random_mask<R: Rng>(n: usize, m: usize, rng: &mut R) -> AttentionMask {
    let mut allow: Vec<bool> = (0..n * m).map(|_| rng.random_bool(0.6)).collect();
    for i in 0..n {
        if !allow[i * m..(i + 1) * m].iter().any(|&a| a) {
            let j = rng.random_range(0..m);
            allow[i * m + j] = true;
        }
    }
    AttentionMask::new(n, m, allow).expect("every row has a key")
}

pub fn check_linear_case(seed: u64) -> Result<GradCheck> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(2..7), rng.random_range(2..7));
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", i, o, true, &mut rng)?;
    let b = store.id("lin.b")?;
    store.get_mut(b).value = randn(&[o], &mut rng);
    let x = randn(&[n, i], &mut rng);
    let w = randn(&[n, o], &mut rng);
    let mut r = check_params(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = lin.forward(g, xv)?;
        weighted_sum(g, y, &w)
    })?;
    let store = store;
    r.merge(check_inputs(std::slice::from_ref(&x), |g, v| {
        let wt = g.input(store.value(lin.w).clone());
        let y = g.matmul_t(v[0], wt, false, true)?;
        weighted_sum(g, y, &w)
    })?);
    Ok(r)
}

pub fn check_layer_norm_case(seed: u64) -> Result<GradCheck> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..5), rng.random_range(2..9));
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", c)?;
    store.get_mut(ln.gamma).value = randn(&[c], &mut rng);
    store.get_mut(ln.beta).value = randn(&[c], &mut rng);
    let x = randn(&[n, c], &mut rng);
    let w = randn(&[n, c], &mut rng);
    let mut r = check_params(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = ln.forward(g, xv)?;
        weighted_sum(g, y, &w)
    })?;
    let gamma = store.value(ln.gamma).clone();
    let beta = store.value(ln.beta).clone();
    r.merge(check_inputs(std::slice::from_ref(&x), |g, v| {
        let gv = g.input(gamma.clone());
        let bv = g.input(beta.clone());
        let y = g.layer_norm(v[0], gv, bv, 1e-5)?;
        weighted_sum(g, y, &w)
    })?);
    Ok(r)
}

pub fn check_attention_case(seed: u64) -> Result<GradCheck> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let blocks = rng.random_range(1..3);
    let masks: Vec<AttentionMask> = (0..blocks)
        .map(|_| {
            let n = rng.random_range(1..5);
            let m = rng.random_range(2..6);
            random_mask(n, m, &mut rng)
        })
        .collect();
    let nq: usize = masks.iter().map(|m| m.query_len()).sum();
    let nk: usize = masks.iter().map(|m| m.key_len()).sum();
    let q = randn(&[nq, d], &mut rng);
    let k = randn(&[nk, d], &mut rng);
    let v = randn(&[nk, d], &mut rng);
    let w = randn(&[nq, d], &mut rng);
    check_inputs(&[q, k, v], |g, vs| {
        let y = g.attention(vs[0], vs[1], vs[2], heads, &masks)?;
        weighted_sum(g, y, &w)
    })
}

pub fn check_mlp_case(seed: u64) -> Result<GradCheck> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (n, i, h, o) = (
        rng.random_range(1..4),
        rng.random_range(2..6),
        rng.random_range(2..8),
        rng.random_range(1..5),
    );
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", i, h, o, &mut rng)?;
    let ln = LayerNorm::new(&mut store, "ln", h)?;
    let x = randn(&[n, i], &mut rng);
    let w = randn(&[n, o], &mut rng);
    check_params(&mut store, |g| {
        let xv = g.input(x.clone());
        let hdn = mlp.fc1.forward(g, xv)?;
        let hdn = ln.forward(g, hdn)?;
        let hdn = g.gelu(hdn);
        let y = mlp.fc2.forward(g, hdn)?;
        weighted_sum(g, y, &w)
    })
}

pub fn check_lora_case(seed: u64) -> Result<GradCheck> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (n, i, o) = (rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7));
    let rank = rng.random_range(1..i.min(o));
    let mut store = ParamStore::new();
    let mut lin = Linear::new(&mut store, "lin", i, o, true, &mut rng)?;
    lin.attach_lora(&mut store, LoraConfig { rank, alpha: 2.0 * rank as f64 }, &mut rng)?;
    let lb = lin.lora.expect("attached").b;
    let z: Vec<f64> = (0..o * rank).map(|_| StandardNormal.sample(&mut rng)).collect();
    store.get_mut(lb).value = Tensor::new(vec![o, rank], z)?;
    store.get_mut(lin.w).requires_grad = false;
    let x = randn(&[n, i], &mut rng);
    let w = randn(&[n, o], &mut rng);
    check_params(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = lin.forward(g, xv)?;
        weighted_sum(g, y, &w)
    })
}

/// Runs `cases` random instances of every kernel-level layer check.
pub fn layer_suite(cases: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    type Case = fn(u64) -> Result<GradCheck>;
    let checks: [(&'static str, Case); 5] = [
        ("linear", check_linear_case),
        ("layer_norm", check_layer_norm_case),
        ("masked_attention", check_attention_case),
        ("mlp_layer_norm", check_mlp_case),
        ("lora", check_lora_case),
    ];
    let mut out = Vec::new();
    for (name, f) in checks {
        let mut agg = GradCheck::default();
        for c in 0..cases {
            agg.merge(f(seed.wrapping_mul(1_000_003).wrapping_add(c as u64))?);
        }
        out.push((name, agg));
    }
    Ok(out)
}
