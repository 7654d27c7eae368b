//! Finite-difference checks for the model-level layers, complementing the
//! kernel suite in `tacvla_nn::gradcheck`.
//!
//! Inputs whose gradients matter are registered as parameters so a single
//! `check_params` pass covers weights and inputs together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacvla_nn::gradcheck::{check_params, layer_suite, weighted_sum, GradCheck};
use tacvla_nn::{NnError, ParamStore, Tensor};

use crate::error::{CoreError, Result};
use crate::policy::VelocityHead;
use crate::tactile::{TactileEncoder, TAXELS, TOKENS};

fn to_nn(e: CoreError) -> NnError {
    match e {
        CoreError::Nn(n) => n,
        other => NnError::Invalid(other.to_string()),
    }
}

fn jitter_biases<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".b")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.5, rng);
    }
}

pub fn check_tactile_encoder_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 36 tokens per frame already make a wide output; one frame at the
    // smallest width keeps the summed loss small enough that central
    // differences are not dominated by rounding.
    let b = 1;
    let dim = 4;
    let hidden = rng.random_range(2..5);
    let mut store = ParamStore::new();
    let enc = TactileEncoder::new(&mut store, dim, hidden, &mut rng)?;
    jitter_biases(&mut store, &mut rng);
    let maps: Vec<f64> = (0..b * TAXELS).map(|_| rng.random()).collect();
    let maps = store.add("input.maps", Tensor::new(vec![b, TAXELS], maps)?)?;
    let w = Tensor::randn(&[b * TOKENS, dim], 1.0, &mut rng);
    // The positional table is a constant offset; removing it leaves the
    // gradient unchanged and keeps it out of the rounding budget.
    let neg_pe = enc.pe.map(|v| -v);
    Ok(check_params(&mut store, |g| {
        let m = g.param(maps);
        let y = enc.forward(g, m).map_err(to_nn)?;
        let pe = g.input(neg_pe.clone());
        let y = g.add(y, pe)?;
        weighted_sum(g, y, &w)
    })?)
}

pub fn check_velocity_head_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..4);
    let cond_dim = rng.random_range(2..7);
    let action_len = 4 * rng.random_range(1..3);
    let hidden = rng.random_range(2..7);
    let tau_dim = 2 * rng.random_range(1..4);
    let mut store = ParamStore::new();
    let head = VelocityHead::new(&mut store, cond_dim, action_len, hidden, tau_dim, &mut rng)?;
    jitter_biases(&mut store, &mut rng);
    let cond = store.add("input.cond", Tensor::randn(&[b, cond_dim], 1.0, &mut rng))?;
    let x = store.add("input.x", Tensor::randn(&[b, action_len], 1.0, &mut rng))?;
    let taus: Vec<f64> = (0..b).map(|_| rng.random()).collect();
    let w = Tensor::randn(&[b, action_len], 1.0, &mut rng);
    Ok(check_params(&mut store, |g| {
        let c = g.param(cond);
        let xv = g.param(x);
        let y = head.forward(g, c, xv, &taus).map_err(to_nn)?;
        weighted_sum(g, y, &w)
    })?)
}

/// Kernel-level layers plus the tactile encoder and velocity head, `cases`
/// random instances each.
pub fn full_suite(cases: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut out = layer_suite(cases, seed)?;
    type Case = fn(u64) -> Result<GradCheck>;
    let model: [(&'static str, Case); 2] = [
        ("tactile_encoder", check_tactile_encoder_case),
        ("velocity_head", check_velocity_head_case),
    ];
    for (name, f) in model {
        let mut agg = GradCheck::default();
        for c in 0..cases {
            agg.merge(f(seed.wrapping_mul(1_000_003).wrapping_add(c as u64))?);
        }
        out.push((name, agg));
    }
    Ok(out)
}
