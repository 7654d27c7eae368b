//! Prefix transformer over the gated token sequence and the flow-matching
//! action expert.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tacvla_nn::checkpoint::{self, Checkpoint};
use tacvla_nn::{Adam, AttentionMask, Graph, LayerNorm, Linear, LoraConfig, Mlp, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::modality::{
    self, assemble_prefix, image_patches, lang_participation, GatedTokenSequence, ImageObs, Instruction,
    LangProprioEncoder, Proprio, VisualEncoder, LANG_TOKENS, PROPRIO_DIM, SEQ_LEN, VIS_TOKENS, WORD_SLOTS,
};
use crate::tactile::{self, detect_contact, gate_tactile, ContactState, TactileEncoder, TactileMap, TAXELS};

pub const ACTION_DIM: usize = 4;
pub const ACTION_LOW: [f64; ACTION_DIM] = [-0.05, -0.05, -0.3, 0.0];
pub const ACTION_HIGH: [f64; ACTION_DIM] = [0.05, 0.05, 0.3, 1.0];

pub const TACTILE_GROUP: &str = "tactile.";
pub const VISION_GROUP: &str = "vision.";
pub const LANG_GROUP: &str = "lang.";
pub const PREFIX_GROUP: &str = "prefix.";
pub const EXPERT_GROUP: &str = "expert.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub tactile_hidden: usize,
    pub expert_hidden: usize,
    pub horizon: usize,
    pub tau_dim: usize,
    pub sample_steps: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub p_th: f64,
    pub k_th: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            mlp_hidden: 256,
            tactile_hidden: 128,
            expert_hidden: 256,
            horizon: 8,
            tau_dim: 16,
            sample_steps: 10,
            lora_rank: 4,
            lora_alpha: 8.0,
            p_th: 0.1,
            k_th: 3,
        }
    }
}

impl ModelConfig {
    /// Smaller preset used by the single-machine benchmark pipeline.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            layers: 2,
            mlp_hidden: 128,
            ..Self::default()
        }
    }

    pub fn action_len(&self) -> usize {
        self.horizon * ACTION_DIM
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim {} must be a positive multiple of 4", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.horizon == 0 || self.sample_steps == 0 {
            return bad("horizon and sample_steps must be positive".into());
        }
        if self.tau_dim == 0 || self.tau_dim % 2 != 0 {
            return bad(format!("tau_dim {} must be positive and even", self.tau_dim));
        }
        crate::tactile::ContactThresholds {
            p_th: self.p_th,
            k_th: self.k_th,
        }
        .validate()
    }
}

/// How the tactile segment enters the prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Contact-gated: embeddings and attention participation follow `c_t`.
    Gated,
    /// Tactile tokens always participate, whatever `c_t` says.
    NoGating,
    /// Tactile tokens never participate (gate forced to zero).
    NoTactile,
}

impl GatingMode {
    pub const ALL: [GatingMode; 3] = [GatingMode::Gated, GatingMode::NoGating, GatingMode::NoTactile];

    pub fn name(self) -> &'static str {
        match self {
            GatingMode::Gated => "gated",
            GatingMode::NoGating => "no_gating",
            GatingMode::NoTactile => "no_tactile",
        }
    }

    /// The effective gate for a detected contact state.
    pub fn gate(self, contact: ContactState) -> ContactState {
        match self {
            GatingMode::Gated => contact,
            GatingMode::NoGating => ContactState {
                flag: true,
                ..contact
            },
            GatingMode::NoTactile => ContactState {
                flag: false,
                ..contact
            },
        }
    }
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatingMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        GatingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown gating mode `{s}`")))
    }
}

/// One synchronized observation bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub images: ImageObs,
    pub instruction: Instruction,
    pub proprio: Proprio,
    pub tactile: TactileMap,
}

/// Per-dimension action standardization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub mean: [f64; ACTION_DIM],
    pub std: [f64; ACTION_DIM],
}

impl Default for ActionStats {
    fn default() -> Self {
        Self {
            mean: [0.0; ACTION_DIM],
            std: [1.0; ACTION_DIM],
        }
    }
}

impl ActionStats {
    /// Floors each std at 5% of the action range so near-constant dimensions
    /// do not blow up.
    pub fn fit(actions: &[[f64; ACTION_DIM]]) -> Self {
        let n = actions.len().max(1) as f64;
        let mut mean = [0.0; ACTION_DIM];
        let mut std = [0.0; ACTION_DIM];
        for a in actions {
            for j in 0..ACTION_DIM {
                mean[j] += a[j] / n;
            }
        }
        for a in actions {
            for j in 0..ACTION_DIM {
                std[j] += (a[j] - mean[j]).powi(2) / n;
            }
        }
        for j in 0..ACTION_DIM {
            std[j] = std[j].sqrt().max(0.05 * (ACTION_HIGH[j] - ACTION_LOW[j]));
        }
        Self { mean, std }
    }

    pub fn standardize(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| (a[j] - self.mean[j]) / self.std[j])
    }

    pub fn destandardize(&self, z: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j])
    }
}

pub fn clamp_action(a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    std::array::from_fn(|j| a[j].clamp(ACTION_LOW[j], ACTION_HIGH[j]))
}

/// `H` consecutive actions `(dx, dy, dtheta, gripper)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl ActionChunk {
    pub fn within_bounds(&self) -> bool {
        self.actions
            .iter()
            .all(|a| (0..ACTION_DIM).all(|j| a[j] >= ACTION_LOW[j] && a[j] <= ACTION_HIGH[j]))
    }
}

/// Linear-path flow sample: `x_tau = tau a + (1 - tau) eps`, target `u = a - eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub tau: f64,
    pub noise: Tensor,
    pub x_tau: Tensor,
    pub target: Tensor,
}

impl FlowSample {
    pub fn new(a: &Tensor, noise: Tensor, tau: f64) -> Result<Self> {
        let x_tau = a.zip_map(&noise, |a, e| tau * a + (1.0 - tau) * e)?;
        let target = a.zip_map(&noise, |a, e| a - e)?;
        Ok(Self {
            tau,
            noise,
            x_tau,
            target,
        })
    }

    pub fn draw<R: Rng + ?Sized>(a: &Tensor, rng: &mut R) -> Result<Self> {
        let tau: f64 = rng.random();
        let noise = Tensor::randn(a.shape(), 1.0, rng);
        Self::new(a, noise, tau)
    }
}

/// Mean squared error between a predicted velocity and the flow target.
pub fn flow_matching_loss(v_pred: &Tensor, sample: &FlowSample) -> Result<f64> {
    let d = v_pred.zip_map(&sample.target, |v, u| (v - u) * (v - u))?;
    Ok(d.sum() / d.numel() as f64)
}

/// Explicit Euler from `tau = 0` to `tau = 1` in `steps` equal increments.
pub fn euler_integrate<F>(x0: &Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(CoreError::Config("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let v = velocity(&x, k as f64 * dt)?;
        x = x.zip_map(&v, |x, v| x + dt * v)?;
    }
    Ok(x)
}

pub fn tau_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = 100f64.powf(i as f64 / (half.max(2) - 1) as f64);
        out.push((tau * w).sin());
        out.push((tau * w).cos());
    }
    out
}

#[derive(Clone, Debug)]
struct PrefixBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl PrefixBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, l: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let p = format!("{PREFIX_GROUP}{l}");
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
            q: Linear::new(store, &format!("{p}.attn.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{p}.attn.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{p}.attn.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{p}.attn.o"), d, d, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
            mlp: Mlp::new(store, &format!("{p}.mlp"), d, cfg.mlp_hidden, d, rng)?,
        })
    }

    fn adapted_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.mlp.fc1,
            &mut self.mlp.fc2,
        ]
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, heads: usize, masks: &[AttentionMask]) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.attention(q, k, v, heads, masks)?;
        let a = self.o.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        Ok(g.add(x, m)?)
    }
}

/// Velocity network `v(cond, x_tau, tau)`.
#[derive(Clone, Debug)]
pub struct VelocityHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub tau_dim: usize,
}

impl VelocityHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cond_dim: usize,
        action_len: usize,
        hidden: usize,
        tau_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, "expert.fc1", cond_dim + action_len + tau_dim, hidden, true, rng)?,
            fc2: Linear::new(store, "expert.fc2", hidden, hidden, true, rng)?,
            fc3: Linear::new(store, "expert.fc3", hidden, action_len, true, rng)?,
            tau_dim,
        })
    }

    /// `cond` is `(B, c)`, `x` is `(B, H*4)`, one flow time per row.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, x: Var, taus: &[f64]) -> Result<Var> {
        let emb: Vec<f64> = taus.iter().flat_map(|&t| tau_embedding(t, self.tau_dim)).collect();
        let t = g.input(Tensor::new(vec![taus.len(), self.tau_dim], emb)?);
        let h = g.concat_cols(vec![cond, x, t])?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.gelu(h);
        Ok(self.fc3.forward(g, h)?)
    }
}

/// Participation layout of one sequence inside a batched prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub participation: Vec<bool>,
    pub proprio_row: usize,
}

/// Batched prefix tokens `(sum of lengths, d)` on a graph.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub tokens: Var,
    pub layouts: Vec<SeqLayout>,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub gating: GatingMode,
    pub stats: ActionStats,
    pub store: ParamStore,
    pub tactile: TactileEncoder,
    pub visual: VisualEncoder,
    pub lang: LangProprioEncoder,
    blocks: Vec<PrefixBlock>,
    pub expert: VelocityHead,
    lora_attached: bool,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, gating: GatingMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.dim;
        let tactile = TactileEncoder::new(&mut store, d, config.tactile_hidden, rng)?;
        let visual = VisualEncoder::new(&mut store, d, rng)?;
        let lang = LangProprioEncoder::new(&mut store, d, rng)?;
        let blocks = (0..config.layers)
            .map(|l| PrefixBlock::new(&mut store, l, &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let expert = VelocityHead::new(&mut store, 2 * d, config.action_len(), config.expert_hidden, config.tau_dim, rng)?;
        Ok(Self {
            config,
            gating,
            stats: ActionStats::default(),
            store,
            tactile,
            visual,
            lang,
            blocks,
            expert,
            lora_attached: false,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.lora_attached
    }

    /// Adds zero-initialized adapters to every attention and MLP matrix of
    /// the prefix transformer.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.lora_attached {
            return Err(CoreError::Config("LoRA already attached".into()));
        }
        let cfg = self.config.lora();
        for b in &mut self.blocks {
            for lin in b.adapted_mut() {
                lin.attach_lora(&mut self.store, cfg, rng)?;
            }
        }
        self.lora_attached = true;
        Ok(())
    }

    /// Fine-tuning trainable set: LoRA matrices, vision and language/proprio
    /// projections, and the action expert. The tactile encoder and the base
    /// prefix weights are frozen.
    pub fn freeze_for_finetune(&mut self) -> Result<()> {
        if !self.lora_attached {
            return Err(CoreError::Config("fine-tuning requires LoRA adapters".into()));
        }
        for (_, p) in self.store.iter_mut() {
            p.requires_grad = p.name.starts_with(VISION_GROUP)
                || p.name.starts_with(LANG_GROUP)
                || p.name.starts_with(EXPERT_GROUP)
                || p.name.contains(".lora_");
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_all_requires_grad(true);
    }

    /// Checksum over the groups that fine-tuning must leave untouched.
    pub fn frozen_checksum(&self) -> String {
        let mut s = ParamStore::new();
        for (_, p) in self.store.iter() {
            if p.name.starts_with(TACTILE_GROUP) || (p.name.starts_with(PREFIX_GROUP) && !p.name.contains(".lora_")) {
                s.add(p.name.clone(), p.value.clone()).expect("unique names");
            }
        }
        s.checksum("")
    }

    pub fn contact(&self, map: &TactileMap) -> Result<ContactState> {
        detect_contact(map, self.config.p_th, self.config.k_th)
    }

    /// Value-level tokenization, gating and assembly for one observation.
    pub fn sequence(&self, obs: &Observation) -> Result<GatedTokenSequence> {
        let vis = self.visual.encode(&self.store, &obs.images)?;
        let lp = self.lang.encode(&self.store, &obs.instruction, &obs.proprio)?;
        let tac = self.tactile.encode(&self.store, &obs.tactile)?;
        let gated = gate_tactile(&tac, self.gating.gate(self.contact(&obs.tactile)?));
        assemble_prefix(&vis, &lp, &gated)
    }

    /// Graph-level tokenization of a batch, keeping encoder gradients.
    pub fn embed_batch(&self, g: &mut Graph<'_>, obs: &[&Observation]) -> Result<Prefix> {
        let b = obs.len();
        let d = self.config.dim;
        let imgs: Vec<&ImageObs> = obs.iter().map(|o| &o.images).collect();
        let p = g.input(image_patches(&imgs)?);
        let vis = self.visual.forward(g, p)?;

        let ids: Vec<[usize; WORD_SLOTS]> = obs.iter().map(|o| o.instruction.slot_ids()).collect();
        let prop: Vec<f64> = obs.iter().flat_map(|o| o.proprio.features()).collect();
        let prop = g.input(Tensor::new(vec![b, PROPRIO_DIM], prop)?);
        let (words, prop) = self.lang.forward(g, &ids, prop)?;

        let maps: Vec<f64> = obs.iter().flat_map(|o| o.tactile.values().iter().copied()).collect();
        let maps = g.input(Tensor::new(vec![b, TAXELS], maps)?);
        let tac = self.tactile.forward(g, maps)?;
        let mut keep = Vec::with_capacity(b * tactile::TOKENS);
        let mut layouts = Vec::with_capacity(b);
        for o in obs {
            let gate = self.gating.gate(self.contact(&o.tactile)?);
            keep.extend(std::iter::repeat_n(gate.flag, tactile::TOKENS));
            let mut part = vec![true; VIS_TOKENS];
            part.extend(lang_participation(&o.instruction));
            part.extend(std::iter::repeat_n(gate.flag, tactile::TOKENS));
            layouts.push(SeqLayout {
                participation: part,
                proprio_row: modality::OFFSETS[2] - 1,
            });
        }
        let tac = g.mask_rows(tac, keep)?;

        let mut parts = Vec::with_capacity(4 * b);
        for i in 0..b {
            parts.push((vis, i * VIS_TOKENS, VIS_TOKENS));
            parts.push((words, i * WORD_SLOTS, WORD_SLOTS));
            parts.push((prop, i, 1));
            parts.push((tac, i * tactile::TOKENS, tactile::TOKENS));
        }
        let tokens = g.stack_rows(parts)?;
        debug_assert_eq!(g.value(tokens).shape(), &[b * SEQ_LEN, d]);
        debug_assert_eq!(LANG_TOKENS, WORD_SLOTS + 1);
        Ok(Prefix { tokens, layouts })
    }

    /// Places already-assembled sequences (any lengths) on a graph as inputs.
    pub fn prefix_from_sequences(&self, g: &mut Graph<'_>, seqs: &[&GatedTokenSequence]) -> Result<Prefix> {
        let d = self.config.dim;
        let mut data = Vec::new();
        let mut layouts = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.tokens.cols() != d || s.tokens.rows() != s.len() {
                return Err(CoreError::Mismatch(format!("sequence tokens {:?} for dim {d}", s.tokens.shape())));
            }
            data.extend_from_slice(s.tokens.data());
            layouts.push(SeqLayout {
                participation: s.participation.clone(),
                proprio_row: s.proprio_row(),
            });
        }
        let rows = data.len() / d;
        let tokens = g.input(Tensor::new(vec![rows, d], data)?);
        Ok(Prefix { tokens, layouts })
    }

    /// Runs the L prefix blocks; non-participating tokens are never keys.
    pub fn forward_prefix(&self, g: &mut Graph<'_>, prefix: &Prefix) -> Result<Var> {
        let masks = prefix
            .layouts
            .iter()
            .map(|l| {
                let n = l.participation.len();
                Ok(AttentionMask::from_key_participation(n, &l.participation)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = prefix.tokens;
        for b in &self.blocks {
            x = b.forward(g, x, self.config.heads, &masks)?;
        }
        Ok(x)
    }

    /// `[mean over participating rows | proprio row]`, shape `(B, 2d)`.
    pub fn pool(&self, g: &mut Graph<'_>, ctx: Var, layouts: &[SeqLayout]) -> Result<Var> {
        let mut mean_rows = Vec::with_capacity(layouts.len());
        let mut prop_rows = Vec::with_capacity(layouts.len());
        let mut off = 0;
        for l in layouts {
            let idx: Vec<usize> = (0..l.participation.len()).filter(|&i| l.participation[i]).collect();
            if idx.is_empty() {
                return Err(CoreError::Config("sequence has no participating tokens".into()));
            }
            let w = 1.0 / idx.len() as f64;
            mean_rows.push(idx.iter().map(|&i| (off + i, w)).collect());
            prop_rows.push(vec![(off + l.proprio_row, 1.0)]);
            off += l.participation.len();
        }
        let m = g.row_combine(ctx, mean_rows)?;
        let p = g.row_combine(ctx, prop_rows)?;
        Ok(g.concat_cols(vec![m, p])?)
    }

    /// Pooled condition for a batch of observations.
    pub fn condition(&self, g: &mut Graph<'_>, obs: &[&Observation]) -> Result<Var> {
        let prefix = self.embed_batch(g, obs)?;
        let ctx = self.forward_prefix(g, &prefix)?;
        self.pool(g, ctx, &prefix.layouts)
    }

    /// Flow-matching loss on a graph; `samples[i]` holds standardized actions
    /// of row `i` flattened to `H*4`.
    pub fn fm_loss(&self, g: &mut Graph<'_>, cond: Var, samples: &[FlowSample]) -> Result<Var> {
        let a = self.config.action_len();
        let b = samples.len();
        let mut xs = Vec::with_capacity(b * a);
        let mut us = Vec::with_capacity(b * a);
        for s in samples {
            if s.x_tau.numel() != a {
                return Err(CoreError::Mismatch(format!("flow sample of {} values, model expects {a}", s.x_tau.numel())));
            }
            xs.extend_from_slice(s.x_tau.data());
            us.extend_from_slice(s.target.data());
        }
        let x = g.input(Tensor::new(vec![b, a], xs)?);
        let u = g.input(Tensor::new(vec![b, a], us)?);
        let taus: Vec<f64> = samples.iter().map(|s| s.tau).collect();
        let v = self.expert.forward(g, cond, x, &taus)?;
        Ok(g.mse(v, u)?)
    }

    fn cond_values_from_prefix(&self, build: impl FnOnce(&mut Graph<'_>) -> Result<Prefix>) -> Result<Tensor> {
        let mut g = Graph::with_store(&self.store);
        let prefix = build(&mut g)?;
        let ctx = self.forward_prefix(&mut g, &prefix)?;
        let c = self.pool(&mut g, ctx, &prefix.layouts)?;
        Ok(g.value(c).clone())
    }

    /// Integrates the learned field from `x0` (one row per condition row) and
    /// returns standardized actions.
    pub fn integrate(&self, cond: &Tensor, x0: &Tensor, steps: usize) -> Result<Tensor> {
        euler_integrate(x0, steps, |x, tau| {
            let mut g = Graph::with_store(&self.store);
            let c = g.input(cond.clone());
            let xv = g.input(x.clone());
            let v = self.expert.forward(&mut g, c, xv, &vec![tau; x.rows()])?;
            Ok(g.value(v).clone())
        })
    }

    fn chunks_from(&self, z: &Tensor) -> Vec<ActionChunk> {
        (0..z.rows())
            .map(|r| ActionChunk {
                actions: z
                    .row(r)
                    .chunks_exact(ACTION_DIM)
                    .map(|c| clamp_action(self.stats.destandardize(&[c[0], c[1], c[2], c[3]])))
                    .collect(),
            })
            .collect()
    }

    fn draw_x0<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        let a = self.config.action_len();
        Tensor::from_fn(&[rows, a], |_| rng.sample(StandardNormal))
    }

    /// Samples one chunk per sequence; noise is drawn row by row from `rng`.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        seqs: &[&GatedTokenSequence],
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<ActionChunk>> {
        let cond = self.cond_values_from_prefix(|g| self.prefix_from_sequences(g, seqs))?;
        let x0 = self.draw_x0(seqs.len(), rng);
        Ok(self.chunks_from(&self.integrate(&cond, &x0, steps)?))
    }

    /// Observe, tokenize, gate and sample for a batch of observations.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[&Observation], rng: &mut R) -> Result<Vec<ActionChunk>> {
        let cond = self.cond_values_from_prefix(|g| self.embed_batch(g, obs))?;
        let x0 = self.draw_x0(obs.len(), rng);
        Ok(self.chunks_from(&self.integrate(&cond, &x0, self.config.sample_steps)?))
    }

    /// Like [`PolicyModel::act`] but row `i` draws its initial noise from
    /// `rngs[i]`, so a trial's samples do not depend on its batch neighbours.
    pub fn act_rows<R: Rng>(&self, obs: &[&Observation], rngs: &mut [R]) -> Result<Vec<ActionChunk>> {
        if rngs.len() != obs.len() {
            return Err(CoreError::Mismatch(format!("{} observations, {} noise streams", obs.len(), rngs.len())));
        }
        let cond = self.cond_values_from_prefix(|g| self.embed_batch(g, obs))?;
        let a = self.config.action_len();
        let mut x0 = Vec::with_capacity(obs.len() * a);
        for r in rngs.iter_mut() {
            x0.extend((0..a).map(|_| r.sample::<f64, _>(StandardNormal)));
        }
        let x0 = Tensor::new(vec![obs.len(), a], x0)?;
        Ok(self.chunks_from(&self.integrate(&cond, &x0, self.config.sample_steps)?))
    }

    pub fn metadata(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "gating": self.gating,
            "action_stats": self.stats,
            "lora": self.lora_attached,
            "extra": extra,
        })
    }

    pub fn save(&self, path: &Path, optimizer: Option<&Adam>, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.store, optimizer, &self.metadata(extra))?;
        Ok(())
    }

    /// Rebuilds the architecture described by a checkpoint and loads its values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let gating: GatingMode = serde_json::from_value(meta["gating"].clone())?;
        let stats: ActionStats = serde_json::from_value(meta["action_stats"].clone())?;
        let lora = meta["lora"].as_bool().unwrap_or(false);
        let mut rng = crate::rng::stream(0, "scaffold");
        let mut model = Self::new(config, gating, &mut rng)?;
        if lora {
            model.attach_lora(&mut rng)?;
        }
        if model.store.len() != ck.store.len() {
            return Err(CoreError::Mismatch(format!(
                "checkpoint has {} tensors, architecture has {}",
                ck.store.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&ck.store)?;
        for (_, p) in model.store.iter_mut() {
            let src = ck.store.get(ck.store.id(&p.name)?);
            p.requires_grad = src.requires_grad;
        }
        model.stats = stats;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}
