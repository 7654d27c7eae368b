//! Demonstration episodes and the dataset container.
//!
//! Layout (integers little-endian):
//!
//! | offset | size | content                                         |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `TVLAEPIS`                                |
//! | 8      | 4    | `u32` format version (currently 1)              |
//! | 12     | 8    | `u64` header length `n`                         |
//! | 20     | n    | UTF-8 JSON [`DatasetHeader`]                    |
//! | 20 + n | ...  | per episode, in header order, the streams below |
//!
//! Each episode of `T` steps stores, back to back: `front` `f32[T*3072]`,
//! `wrist` `f32[T*3072]` (32x32x3 height-width-channel), `proprio` `f32[T*8]`,
//! `tactile` `f32[T*120]`, `actions` `f32[T*4]` and `contact` `u8[T]`.
//! Step `t` is stamped `t * 100` ms. Action-chunk targets are the sliding
//! windows `actions[t..t+H]`, padded at the end by repeating the last action.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expert::Expert;
use super::world::{Disturbance, Event, SimConfig, World};
use crate::error::{CoreError, Result};
use crate::modality::{ImageObs, Instruction, Proprio, TaskId, IMG_LEN, PROPRIO_DIM};
use crate::policy::{clamp_action, Observation, ACTION_DIM};
use crate::tactile::{TactileMap, TAXELS};

pub const DATASET_MAGIC: &[u8; 8] = b"TVLAEPIS";
pub const DATASET_VERSION: u32 = 1;
/// Expert attempts per episode slot before generation gives up.
pub const MAX_ATTEMPTS: usize = 8;

pub const STREAMS: [&str; 6] = ["front", "wrist", "proprio", "tactile", "actions", "contact"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub index: usize,
    /// World seed of the successful attempt.
    pub seed: u64,
    /// Seeds of attempts the expert failed on, in order.
    pub failed_seeds: Vec<u64>,
    pub steps: usize,
    pub events: Vec<Event>,
    pub disturbed: bool,
    pub success: bool,
    pub instruction: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub meta: EpisodeMeta,
    pub front: Vec<f32>,
    pub wrist: Vec<f32>,
    pub proprio: Vec<f32>,
    pub tactile: Vec<f32>,
    pub actions: Vec<f32>,
    pub contact: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.contact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contact.is_empty()
    }

    /// Every stream has exactly `len()` steps.
    pub fn aligned(&self) -> bool {
        let t = self.len();
        t == self.meta.steps
            && self.front.len() == t * IMG_LEN
            && self.wrist.len() == t * IMG_LEN
            && self.proprio.len() == t * PROPRIO_DIM
            && self.tactile.len() == t * TAXELS
            && self.actions.len() == t * ACTION_DIM
    }

    pub fn timestamp_ms(&self, t: usize) -> u64 {
        t as u64 * super::STEP_MS
    }

    fn widen(s: &[f32]) -> Vec<f64> {
        s.iter().map(|&v| v as f64).collect()
    }

    pub fn observation(&self, t: usize) -> Result<Observation> {
        let img = t * IMG_LEN..(t + 1) * IMG_LEN;
        let images = ImageObs::new(Self::widen(&self.front[img.clone()]), Self::widen(&self.wrist[img]))?;
        let p = &self.proprio[t * PROPRIO_DIM..(t + 1) * PROPRIO_DIM];
        let proprio = Proprio::new(std::array::from_fn(|i| p[i] as f64))?;
        let tactile = TactileMap::new(Self::widen(&self.tactile[t * TAXELS..(t + 1) * TAXELS]))?;
        Ok(Observation {
            images,
            instruction: Instruction::for_task(self.task),
            proprio,
            tactile,
        })
    }

    pub fn action(&self, t: usize) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| self.actions[t * ACTION_DIM + j] as f64)
    }

    /// `H` actions from step `t`, repeating the final action past the end.
    pub fn window(&self, t: usize, h: usize) -> Vec<[f64; ACTION_DIM]> {
        let last = self.len() - 1;
        (0..h).map(|k| self.action((t + k).min(last))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task: TaskId,
    pub seed: u64,
    pub n_episodes: usize,
    pub sim: SimConfig,
    pub streams: Vec<String>,
    pub episodes: Vec<EpisodeMeta>,
    /// Run manifest of the producing command; null when generated in-process.
    pub manifest: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

fn attempt_seed(seed: u64, task: TaskId, index: usize, attempt: usize) -> u64 {
    crate::rng::substream(seed, &format!("{}-episode-{index}", task.name()), attempt as u64).random()
}

/// Runs the expert from a fresh world until success. In-box episodes are
/// disturbed once with probability `disturb_prob`; executed actions carry
/// small position noise while the recorded labels stay clean.
pub fn run_expert_episode(task: TaskId, config: SimConfig, world_seed: u64) -> Result<Episode> {
    let mut w = World::new(task, config, world_seed)?;
    let mut expert = Expert::new(task)?;
    let mut plan = crate::rng::stream(world_seed, "demo-plan");
    let disturb = task == TaskId::InBox && plan.random::<f64>() < config.disturb_prob;
    let mut injected = false;
    let mut ep = Episode {
        task,
        meta: EpisodeMeta {
            index: 0,
            seed: world_seed,
            failed_seeds: Vec::new(),
            steps: 0,
            events: Vec::new(),
            disturbed: false,
            success: false,
            instruction: Instruction::for_task(task).token_ids,
        },
        front: Vec::new(),
        wrist: Vec::new(),
        proprio: Vec::new(),
        tactile: Vec::new(),
        actions: Vec::new(),
        contact: Vec::new(),
    };
    while !w.success {
        if w.t >= config.max_steps {
            return Err(CoreError::ExpertFailure(format!("no success within {} steps", config.max_steps)));
        }
        if disturb && !injected && w.in_transit() {
            w.inject_disturbance(Disturbance::ReturnToBox)?;
            injected = true;
        }
        let obs = w.observe(false);
        let a = expert.act(&w)?;
        ep.front.extend(obs.images.front.iter().map(|&v| v as f32));
        ep.wrist.extend(obs.images.wrist.iter().map(|&v| v as f32));
        ep.proprio.extend(obs.proprio.state.iter().map(|&v| v as f32));
        ep.tactile.extend(obs.tactile.values().iter().map(|&v| v as f32));
        ep.actions.extend(a.iter().map(|&v| v as f32));
        ep.contact.push(w.contact_state().flag as u8);
        let mut exec = a;
        for v in exec.iter_mut().take(2) {
            *v += config.dart_sigma * plan.sample::<f64, _>(rand_distr::StandardNormal);
        }
        w.advance(clamp_action(exec))?;
    }
    ep.meta.steps = ep.len();
    ep.meta.events = w.events.clone();
    ep.meta.disturbed = injected;
    ep.meta.success = w.success && w.in_goal();
    Ok(ep)
}

/// `n` successful expert episodes. Failed attempts are retried with a fresh
/// logged seed, at most [`MAX_ATTEMPTS`] times per slot.
pub fn gen_dataset(task: TaskId, n: usize, seed: u64, config: SimConfig) -> Result<Dataset> {
    config.validate()?;
    Expert::new(task)?;
    let episodes = (0..n)
        .into_par_iter()
        .map(|index| {
            let mut failed = Vec::new();
            for attempt in 0..MAX_ATTEMPTS {
                let s = attempt_seed(seed, task, index, attempt);
                match run_expert_episode(task, config, s) {
                    Ok(mut ep) => {
                        ep.meta.index = index;
                        ep.meta.failed_seeds = failed;
                        return Ok(ep);
                    }
                    Err(CoreError::ExpertFailure(_)) => failed.push(s),
                    Err(e) => return Err(e),
                }
            }
            Err(CoreError::ExpertFailure(format!(
                "episode {index}: {MAX_ATTEMPTS} attempts failed (seeds {failed:?})"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            task,
            seed,
            n_episodes: n,
            sim: config,
            streams: STREAMS.iter().map(|s| s.to_string()).collect(),
            episodes: episodes.iter().map(|e| e.meta.clone()).collect(),
            manifest: serde_json::Value::Null,
        },
        episodes,
    })
}

fn put_f32<W: Write>(w: &mut W, xs: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get_f32<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_dataset_to<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let header = serde_json::to_vec(&ds.header)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for ep in &ds.episodes {
        if !ep.aligned() {
            return Err(CoreError::Dataset(format!("episode {} streams are misaligned", ep.meta.index)));
        }
        put_f32(&mut w, &ep.front)?;
        put_f32(&mut w, &ep.wrist)?;
        put_f32(&mut w, &ep.proprio)?;
        put_f32(&mut w, &ep.tactile)?;
        put_f32(&mut w, &ep.actions)?;
        w.write_all(&ep.contact)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_from<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(CoreError::Dataset("not a dataset file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DATASET_VERSION {
        return Err(CoreError::Dataset(format!("unsupported dataset version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let mut hbuf = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut hbuf)?;
    let header: DatasetHeader = serde_json::from_slice(&hbuf)?;
    if header.episodes.len() != header.n_episodes {
        return Err(CoreError::Dataset("episode count disagrees with header".into()));
    }
    let mut episodes = Vec::with_capacity(header.n_episodes);
    for meta in &header.episodes {
        let t = meta.steps;
        let front = get_f32(&mut r, t * IMG_LEN)?;
        let wrist = get_f32(&mut r, t * IMG_LEN)?;
        let proprio = get_f32(&mut r, t * PROPRIO_DIM)?;
        let tactile = get_f32(&mut r, t * TAXELS)?;
        let actions = get_f32(&mut r, t * ACTION_DIM)?;
        let mut contact = vec![0u8; t];
        r.read_exact(&mut contact)?;
        episodes.push(Episode {
            task: header.task,
            meta: meta.clone(),
            front,
            wrist,
            proprio,
            tactile,
            actions,
            contact,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CoreError::Dataset("trailing bytes after the last episode".into()));
    }
    Ok(Dataset { header, episodes })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
