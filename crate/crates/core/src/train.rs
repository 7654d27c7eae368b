//! Batching, the pretraining and LoRA fine-tuning loops, loss logs and
//! exactly resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tacvla_nn::{Adam, AdamConfig, Graph, Tensor};

use crate::error::{CoreError, Result};
use crate::policy::{ActionStats, FlowSample, GatingMode, ModelConfig, Observation, PolicyModel, ACTION_DIM};
use crate::rng;
use crate::sim::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Desk,
    Default,
}

impl FromStr for ModelPreset {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "default" => Ok(Self::Default),
            other => Err(CoreError::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Default => "default",
        }
    }

    pub fn config(self) -> ModelConfig {
        match self {
            Self::Desk => ModelConfig::desk(),
            Self::Default => ModelConfig::default(),
        }
    }
}

/// Every tunable of a training run. Parsed from `key = value` lines; see
/// [`TrainConfig::KEYS`] for the accepted keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelPreset,
    pub gating: GatingMode,
    pub steps: usize,
    pub batch_size: usize,
    /// Flow (noise, time) draws per observation; the prefix is encoded once
    /// and shared by all of them.
    pub flow_samples: usize,
    pub lr: f64,
    /// Cosine floor as a fraction of the peak rate.
    pub lr_floor: f64,
    pub warmup: usize,
    pub lora: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Must stay on: the tactile encoder is never updated while fine-tuning.
    pub freeze_tactile: bool,
    /// Probability of blanking the front camera in a training sample.
    pub front_dropout: f64,
    pub log_every: usize,
    pub datasets: Vec<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelPreset::Desk,
            gating: GatingMode::Gated,
            steps: 5000,
            batch_size: 32,
            flow_samples: 4,
            lr: 1e-3,
            lr_floor: 0.1,
            warmup: 100,
            lora: true,
            lora_rank: 4,
            lora_alpha: 8.0,
            finetune_steps: 2000,
            finetune_lr: 5e-4,
            freeze_tactile: true,
            front_dropout: 0.25,
            log_every: 1,
            datasets: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 18] = [
        "seed",
        "model",
        "gating",
        "steps",
        "batch_size",
        "flow_samples",
        "lr",
        "lr_floor",
        "warmup",
        "lora",
        "lora_rank",
        "lora_alpha",
        "finetune_steps",
        "finetune_lr",
        "freeze_tactile",
        "front_dropout",
        "log_every",
        "datasets",
    ];

    fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| CoreError::Config(format!("bad value `{v}` for `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = Self::parse_value(key, v)?,
            "model" => self.model = v.parse()?,
            "gating" => self.gating = v.parse()?,
            "steps" => self.steps = Self::parse_value(key, v)?,
            "batch_size" => self.batch_size = Self::parse_value(key, v)?,
            "flow_samples" => self.flow_samples = Self::parse_value(key, v)?,
            "lr" => self.lr = Self::parse_value(key, v)?,
            "lr_floor" => self.lr_floor = Self::parse_value(key, v)?,
            "warmup" => self.warmup = Self::parse_value(key, v)?,
            "lora" => self.lora = Self::parse_value(key, v)?,
            "lora_rank" => self.lora_rank = Self::parse_value(key, v)?,
            "lora_alpha" => self.lora_alpha = Self::parse_value(key, v)?,
            "finetune_steps" => self.finetune_steps = Self::parse_value(key, v)?,
            "finetune_lr" => self.finetune_lr = Self::parse_value(key, v)?,
            "freeze_tactile" => self.freeze_tactile = Self::parse_value(key, v)?,
            "front_dropout" => self.front_dropout = Self::parse_value(key, v)?,
            "log_every" => self.log_every = Self::parse_value(key, v)?,
            "datasets" => {
                self.datasets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            other => return Err(CoreError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let paths: Vec<String> = self.datasets.iter().map(|p| p.display().to_string()).collect();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "model = {}", self.model.name());
        let _ = writeln!(s, "gating = {}", self.gating);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "flow_samples = {}", self.flow_samples);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_floor = {}", self.lr_floor);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "lora = {}", self.lora);
        let _ = writeln!(s, "lora_rank = {}", self.lora_rank);
        let _ = writeln!(s, "lora_alpha = {}", self.lora_alpha);
        let _ = writeln!(s, "finetune_steps = {}", self.finetune_steps);
        let _ = writeln!(s, "finetune_lr = {}", self.finetune_lr);
        let _ = writeln!(s, "freeze_tactile = {}", self.freeze_tactile);
        let _ = writeln!(s, "front_dropout = {}", self.front_dropout);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "datasets = {}", paths.join(","));
        s
    }

    /// Hex sha256 of the canonical `key = value` rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.batch_size == 0 || self.flow_samples == 0 {
            return bad("batch_size and flow_samples must be positive");
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) || !(0.0..=1.0).contains(&self.front_dropout) {
            return bad("lr_floor and front_dropout must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if !self.freeze_tactile {
            return bad("freeze_tactile = false is not allowed: the tactile encoder stays frozen while fine-tuning");
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            ..self.model.config()
        }
    }
}

/// Linear warmup then cosine decay to `floor * peak`.
pub fn learning_rate(step: usize, total: usize, peak: f64, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_ms: u64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,lr,wall_time_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.10e},{:.6e},{}", r.step, r.loss, r.lr, r.wall_time_ms);
    }
    s
}

/// Uniform (episode, step) sampler over one or more datasets.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    sets: Vec<&'a Dataset>,
    index: Vec<(u32, u32, u32)>,
    pub rng: ChaCha8Rng,
    pub front_dropout: f64,
    pub horizon: usize,
}

pub struct Batch {
    pub observations: Vec<Observation>,
    /// Raw (unstandardized) action windows.
    pub windows: Vec<Vec<[f64; ACTION_DIM]>>,
}

impl<'a> Batcher<'a> {
    pub fn new(sets: &[&'a Dataset], rng: ChaCha8Rng, front_dropout: f64, horizon: usize) -> Result<Self> {
        let mut index = Vec::new();
        for (s, d) in sets.iter().enumerate() {
            for (e, ep) in d.episodes.iter().enumerate() {
                for t in 0..ep.len() {
                    index.push((s as u32, e as u32, t as u32));
                }
            }
        }
        if index.is_empty() {
            return Err(CoreError::Dataset("no training frames".into()));
        }
        Ok(Self {
            sets: sets.to_vec(),
            index,
            rng,
            front_dropout,
            horizon,
        })
    }

    pub fn frames(&self) -> usize {
        self.index.len()
    }

    pub fn next(&mut self, b: usize) -> Result<Batch> {
        let mut observations = Vec::with_capacity(b);
        let mut windows = Vec::with_capacity(b);
        for _ in 0..b {
            let (s, e, t) = self.index[self.rng.random_range(0..self.index.len())];
            let ep = &self.sets[s as usize].episodes[e as usize];
            let mut obs = ep.observation(t as usize)?;
            if self.rng.random::<f64>() < self.front_dropout {
                obs.images.block_front();
            }
            observations.push(obs);
            windows.push(ep.window(t as usize, self.horizon));
        }
        Ok(Batch { observations, windows })
    }
}

/// All per-step actions, for fitting standardization statistics.
pub fn dataset_actions(sets: &[&Dataset]) -> Vec<[f64; ACTION_DIM]> {
    sets.iter()
        .flat_map(|d| d.episodes.iter())
        .flat_map(|ep| (0..ep.len()).map(move |t| ep.action(t)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn stream(self, name: &str) -> String {
        match self {
            Stage::Pretrain => name.to_string(),
            Stage::Finetune => format!("finetune/{name}"),
        }
    }
}

/// Everything besides parameters and optimizer moments needed to continue a
/// run bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub total: usize,
    /// ChaCha word positions, as decimal strings (u128 does not fit JSON numbers).
    pub data_pos: u128,
    pub flow_pos: u128,
}

mod u128_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainStateJson {
    stage: Stage,
    step: usize,
    total: usize,
    #[serde(with = "u128_str")]
    data_pos: u128,
    #[serde(with = "u128_str")]
    flow_pos: u128,
}

impl TrainState {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TrainStateJson {
            stage: self.stage,
            step: self.step,
            total: self.total,
            data_pos: self.data_pos,
            flow_pos: self.flow_pos,
        })
        .expect("plain struct serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: TrainStateJson = serde_json::from_value(v.clone())?;
        Ok(Self {
            stage: j.stage,
            step: j.step,
            total: j.total,
            data_pos: j.data_pos,
            flow_pos: j.flow_pos,
        })
    }
}

/// One optimization stage over a fixed model.
pub struct Trainer<'a> {
    pub model: PolicyModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub stage: Stage,
    pub batcher: Batcher<'a>,
    pub flow: ChaCha8Rng,
    pub step: usize,
    pub total: usize,
    pub log: Vec<LossRow>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(model: PolicyModel, config: &TrainConfig, stage: Stage, sets: &[&'a Dataset]) -> Result<Self> {
        config.validate()?;
        let (total, lr) = match stage {
            Stage::Pretrain => (config.steps, config.lr),
            Stage::Finetune => (config.finetune_steps, config.finetune_lr),
        };
        let batcher = Batcher::new(
            sets,
            rng::stream(config.seed, &stage.stream(rng::DATA)),
            config.front_dropout,
            model.config.horizon,
        )?;
        Ok(Self {
            model,
            adam: Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            }),
            config: config.clone(),
            stage,
            batcher,
            flow: rng::stream(config.seed, &stage.stream(rng::FLOW_NOISE)),
            step: 0,
            total,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(
            self.step,
            self.total,
            self.adam.config.lr,
            self.config.warmup.min(self.total / 10),
            self.config.lr_floor,
        )
    }

    /// One optimizer step on a fresh batch; returns the batch loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let batch = self.batcher.next(self.config.batch_size)?;
        let a = self.model.config.action_len();
        let k = self.config.flow_samples;
        let mut samples = Vec::with_capacity(batch.windows.len() * k);
        for w in &batch.windows {
            let z: Vec<f64> = w.iter().flat_map(|x| self.model.stats.standardize(x)).collect();
            let z = Tensor::new(vec![a], z)?;
            for _ in 0..k {
                samples.push(FlowSample::draw(&z, &mut self.flow)?);
            }
        }
        let lr = self.current_lr();
        let (loss, grads) = {
            let obs: Vec<&Observation> = batch.observations.iter().collect();
            let mut g = Graph::with_store(&self.model.store);
            let mut cond = self.model.condition(&mut g, &obs)?;
            if k > 1 {
                let rows = (0..obs.len()).flat_map(|i| std::iter::repeat_n(vec![(i, 1.0)], k)).collect();
                cond = g.row_combine(cond, rows)?;
            }
            let l = self.model.fm_loss(&mut g, cond, &samples)?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    step: self.step,
                    detail: format!("loss is {loss}"),
                });
            }
            (loss, g.backward(l)?)
        };
        self.model.store.zero_grad();
        grads.accumulate_into(&mut self.model.store)?;
        self.adam.step_with_lr(&mut self.model.store, lr).map_err(|e| CoreError::Diverged {
            step: self.step,
            detail: e.to_string(),
        })?;
        if self.step % self.config.log_every == 0 || self.step + 1 == self.total {
            self.log.push(LossRow {
                step: self.step,
                loss,
                lr,
                wall_time_ms: self.started.elapsed().as_millis() as u64,
            });
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `until` (capped at the stage total).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.step < until.min(self.total) {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            stage: self.stage,
            step: self.step,
            total: self.total,
            data_pos: self.batcher.rng.get_word_pos(),
            flow_pos: self.flow.get_word_pos(),
        }
    }

    /// Checkpoint with parameters, Adam moments and sampler positions.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "train_state": self.state().to_json(),
            "train_config": self.config,
            "run": extra,
        });
        self.model.save(path, Some(&self.adam), meta)
    }

    /// Continues a run saved by [`Trainer::save`] on the same datasets.
    pub fn resume(path: &Path, sets: &[&'a Dataset]) -> Result<Self> {
        let (model, ck) = PolicyModel::load(path)?;
        let extra = &ck.metadata["extra"];
        let state = TrainState::from_json(&extra["train_state"])?;
        let config: TrainConfig = serde_json::from_value(extra["train_config"].clone())?;
        let mut t = Trainer::new(model, &config, state.stage, sets)?;
        if let Some(m) = ck.optimizer {
            t.adam.import(&t.model.store, m)?;
        }
        t.step = state.step;
        t.total = state.total;
        t.batcher.rng.set_word_pos(state.data_pos);
        t.flow.set_word_pos(state.flow_pos);
        Ok(t)
    }
}

/// Trains every parameter from scratch on the union of the datasets.
pub fn pretrain(config: &TrainConfig, sets: &[&Dataset]) -> Result<(PolicyModel, Vec<LossRow>)> {
    config.validate()?;
    let mut init = rng::stream(config.seed, rng::INIT);
    let mut model = PolicyModel::new(config.model_config(), config.gating, &mut init)?;
    model.stats = ActionStats::fit(&dataset_actions(sets));
    let mut t = Trainer::new(model, config, Stage::Pretrain, sets)?;
    t.run()?;
    Ok((t.model, t.log))
}

/// Prepares a base model for fine-tuning: checks it against the config,
/// attaches zero-initialized adapters and freezes the protected groups.
pub fn prepare_finetune(config: &TrainConfig, mut base: PolicyModel) -> Result<PolicyModel> {
    config.validate()?;
    let want = config.model_config();
    if base.config != want {
        return Err(CoreError::Mismatch(format!(
            "base checkpoint has {:?}, config asks for {:?}",
            base.config, want
        )));
    }
    if base.gating != config.gating {
        return Err(CoreError::Mismatch(format!(
            "base checkpoint gating {} differs from config gating {}",
            base.gating, config.gating
        )));
    }
    if !config.lora {
        return Err(CoreError::Config("fine-tuning requires lora = true".into()));
    }
    if !base.has_lora() {
        base.attach_lora(&mut rng::stream(config.seed, "lora"))?;
    }
    base.freeze_for_finetune()?;
    Ok(base)
}

/// LoRA fine-tuning; the frozen groups are verified bit-unchanged afterwards.
pub fn finetune_lora(config: &TrainConfig, base: PolicyModel, sets: &[&Dataset]) -> Result<(PolicyModel, Vec<LossRow>)> {
    let model = prepare_finetune(config, base)?;
    let before = model.frozen_checksum();
    let mut t = Trainer::new(model, config, Stage::Finetune, sets)?;
    t.run()?;
    let after = t.model.frozen_checksum();
    if before != after {
        return Err(CoreError::Mismatch(format!(
            "frozen parameters changed during fine-tuning ({before} -> {after})"
        )));
    }
    Ok((t.model, t.log))
}

/// Pretraining followed by LoRA fine-tuning when `finetune_steps > 0`; the
/// returned log concatenates both stages.
pub fn train_arm(config: &TrainConfig, sets: &[&Dataset]) -> Result<(PolicyModel, Vec<LossRow>)> {
    let (model, mut log) = pretrain(config, sets)?;
    if config.finetune_steps == 0 {
        return Ok((model, log));
    }
    let (model, ft) = finetune_lora(config, model, sets)?;
    log.extend(ft);
    Ok((model, log))
}
