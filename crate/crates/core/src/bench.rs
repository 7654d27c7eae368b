//! Closed-loop evaluation: receding-horizon rollouts, per-seed success
//! reports, the three-arm comparison and its CSV and table renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::modality::TaskId;
use crate::policy::{GatingMode, Observation, PolicyModel, ACTION_DIM};
use crate::rng;
use crate::sim::{Condition, Disturbance, Event, EventKind, Expert, SimConfig, World};

pub const DEFAULT_TRIALS: usize = 20;

/// What drives the gripper during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    Model(&'a PolicyModel),
    /// The privileged scripted demonstrator, as a sanity oracle.
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub action: [f64; ACTION_DIM],
    pub contact: bool,
    pub grasped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub world_seed: u64,
    pub success: bool,
    /// Steps taken: the success step, or the budget.
    pub steps: usize,
    pub events: Vec<Event>,
    pub trace: Vec<TraceStep>,
    pub injected_at: Option<usize>,
    /// A grasp happened before the disturbance was injected.
    pub grasped_before_injection: bool,
    /// A grasp event follows the injection event.
    pub recovered: bool,
}

/// Seed of the world for trial `k` of evaluation seed `seed`.
pub fn trial_world_seed(seed: u64, k: usize) -> u64 {
    rng::substream(seed, "eval-world", k as u64).random()
}

fn trial_noise(seed: u64, k: usize) -> ChaCha8Rng {
    rng::substream(seed, rng::EVAL, k as u64)
}

pub fn condition_supported(task: TaskId, condition: Condition) -> bool {
    condition != Condition::Disturb || task == TaskId::InBox
}

struct Live {
    world: World,
    expert: Option<Expert>,
    noise: ChaCha8Rng,
    trace: Vec<TraceStep>,
    injected_at: Option<usize>,
    grasped_before: bool,
    done: bool,
}

/// Runs trials `0..trials` of one evaluation seed in lockstep. Each trial
/// owns its world and noise streams, so its trace does not depend on which
/// other trials share the batch.
pub fn rollout_batch(
    actor: Actor<'_>,
    task: TaskId,
    condition: Condition,
    seed: u64,
    trials: std::ops::Range<usize>,
    max_steps: usize,
    sim: SimConfig,
) -> Result<Vec<Rollout>> {
    if !condition_supported(task, condition) {
        return Err(CoreError::InvalidDisturbance(format!("return_to_box has no meaning for task {task}")));
    }
    let occluded = condition == Condition::BlockFront;
    let mut live = trials
        .clone()
        .map(|k| {
            Ok(Live {
                world: World::new(task, sim, trial_world_seed(seed, k))?,
                expert: matches!(actor, Actor::Expert).then(|| Expert::new(task)).transpose()?,
                noise: trial_noise(seed, k),
                trace: Vec::new(),
                injected_at: None,
                grasped_before: false,
                done: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        if active.is_empty() {
            break;
        }
        for &i in &active {
            let l = &mut live[i];
            if condition == Condition::Disturb && l.injected_at.is_none() && l.world.in_transit() {
                l.grasped_before = l.world.has_event(EventKind::Grasp);
                l.world.inject_disturbance(Disturbance::ReturnToBox)?;
                l.injected_at = Some(l.world.t);
            }
        }
        let actions: Vec<[f64; ACTION_DIM]> = match actor {
            Actor::Model(m) => {
                let obs: Vec<Observation> = active.iter().map(|&i| live[i].world.observe(occluded)).collect();
                let refs: Vec<&Observation> = obs.iter().collect();
                let mut rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| live[i].noise.clone()).collect();
                let chunks = m.act_rows(&refs, &mut rngs)?;
                for (&i, r) in active.iter().zip(rngs) {
                    live[i].noise = r;
                }
                chunks.into_iter().map(|c| c.actions[0]).collect()
            }
            Actor::Expert => active
                .iter()
                .map(|&i| {
                    let l = &mut live[i];
                    l.expert.as_mut().expect("expert actor has an expert").act(&l.world)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        for (&i, a) in active.iter().zip(actions) {
            let l = &mut live[i];
            l.trace.push(TraceStep {
                t: l.world.t,
                action: a,
                contact: l.world.contact_state().flag,
                grasped: l.world.grasped,
            });
            l.world.advance(a)?;
            if l.world.success {
                l.done = true;
            }
        }
    }
    Ok(trials
        .zip(live)
        .map(|(k, l)| {
            let events = l.world.events.clone();
            let recovered = match events.iter().position(|e| e.kind == EventKind::Disturbance) {
                Some(p) => events[p + 1..].iter().any(|e| e.kind == EventKind::Grasp),
                None => false,
            };
            Rollout {
                world_seed: trial_world_seed(seed, k),
                success: l.world.success,
                steps: l.world.t,
                events,
                trace: l.trace,
                injected_at: l.injected_at,
                grasped_before_injection: l.grasped_before,
                recovered,
            }
        })
        .collect())
}

/// A single trial.
pub fn rollout(
    actor: Actor<'_>,
    task: TaskId,
    condition: Condition,
    seed: u64,
    trial: usize,
    max_steps: usize,
    sim: SimConfig,
) -> Result<Rollout> {
    Ok(rollout_batch(actor, task, condition, seed, trial..trial + 1, max_steps, sim)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub mean_steps: Option<f64>,
    /// Disturbed trials that had grasped before the injection.
    pub disturbed_after_grasp: usize,
    /// Of those, trials that grasped again afterwards.
    pub recovered: usize,
}

impl SeedResult {
    pub fn from_rollouts(seed: u64, rs: &[Rollout]) -> Self {
        let successes = rs.iter().filter(|r| r.success).count();
        let steps: Vec<f64> = rs.iter().filter(|r| r.success).map(|r| r.steps as f64).collect();
        let eligible: Vec<&Rollout> = rs.iter().filter(|r| r.injected_at.is_some() && r.grasped_before_injection).collect();
        Self {
            seed,
            trials: rs.len(),
            successes,
            rate: ratio(successes, rs.len()),
            mean_steps: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
            disturbed_after_grasp: eligible.len(),
            recovered: eligible.iter().filter(|r| r.recovered).count(),
        }
    }
}

pub fn ratio(successes: usize, trials: usize) -> f64 {
    if trials == 0 {
        0.0
    } else {
        successes as f64 / trials as f64
    }
}

/// One (method, task, condition) cell with its per-seed breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub task: TaskId,
    pub condition: Condition,
    pub seeds: Vec<SeedResult>,
}

impl EvalReport {
    pub fn trials(&self) -> usize {
        self.seeds.iter().map(|s| s.trials).sum()
    }

    pub fn successes(&self) -> usize {
        self.seeds.iter().map(|s| s.successes).sum()
    }

    pub fn rate(&self) -> f64 {
        ratio(self.successes(), self.trials())
    }

    /// Mean of the per-seed success rates.
    pub fn mean_seed_rate(&self) -> f64 {
        if self.seeds.is_empty() {
            return 0.0;
        }
        self.seeds.iter().map(|s| s.rate).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn recovery(&self) -> (usize, usize) {
        (
            self.seeds.iter().map(|s| s.recovered).sum(),
            self.seeds.iter().map(|s| s.disturbed_after_grasp).sum(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub trials: usize,
    pub max_steps: usize,
    pub sim: SimConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            max_steps: crate::sim::DEFAULT_MAX_STEPS,
            sim: SimConfig::default(),
        }
    }
}

pub fn evaluate(
    method: &str,
    actor: Actor<'_>,
    task: TaskId,
    condition: Condition,
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let rs = rollout_batch(actor, task, condition, s, 0..settings.trials, settings.max_steps, settings.sim)?;
        out.push(SeedResult::from_rollouts(s, &rs));
    }
    Ok(EvalReport {
        method: method.to_string(),
        task,
        condition,
        seeds: out,
    })
}

/// Full factorial evaluation of the three arms. Cells whose condition does
/// not apply to a task (disturbance on slide) are skipped.
pub fn compare_arms(
    arms: &BTreeMap<GatingMode, PolicyModel>,
    tasks: &[TaskId],
    conditions: &[Condition],
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    for arm in GatingMode::ALL {
        if !arms.contains_key(&arm) {
            return Err(CoreError::MissingArm(arm.name().to_string()));
        }
    }
    let mut reports = Vec::new();
    for (arm, model) in arms {
        if model.gating != *arm {
            return Err(CoreError::Mismatch(format!("arm {arm} holds a {} model", model.gating)));
        }
        for &task in tasks {
            for &c in conditions {
                if condition_supported(task, c) {
                    reports.push(evaluate(arm.name(), Actor::Model(model), task, c, seeds, settings)?);
                }
            }
        }
    }
    Ok(reports)
}

pub const CSV_HEADER: &str = "method,task,condition,seed,trials,successes,rate,mean_steps";

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        for sr in &r.seeds {
            let steps = sr.mean_steps.map(|m| format!("{m:.2}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{}",
                r.method, r.task, r.condition, sr.seed, sr.trials, sr.successes, sr.rate, steps
            );
        }
    }
    s
}

/// Lines starting with `#` (the embedded run manifest) are skipped.
pub fn parse_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(CoreError::Dataset("report CSV header mismatch".into()));
    }
    let bad = |l: &str| CoreError::Dataset(format!("malformed report row `{l}`"));
    let mut reports: Vec<EvalReport> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(line));
        }
        let task: TaskId = f[1].parse()?;
        let condition: Condition = f[2].parse()?;
        let seed: u64 = f[3].parse().map_err(|_| bad(line))?;
        let trials: usize = f[4].parse().map_err(|_| bad(line))?;
        let successes: usize = f[5].parse().map_err(|_| bad(line))?;
        let mean_steps = if f[7] == "NA" {
            None
        } else {
            Some(f[7].parse().map_err(|_| bad(line))?)
        };
        let sr = SeedResult {
            seed,
            trials,
            successes,
            rate: ratio(successes, trials),
            mean_steps,
            disturbed_after_grasp: 0,
            recovered: 0,
        };
        match reports
            .iter_mut()
            .find(|r| r.method == f[0] && r.task == task && r.condition == condition)
        {
            Some(r) => r.seeds.push(sr),
            None => reports.push(EvalReport {
                method: f[0].to_string(),
                task,
                condition,
                seeds: vec![sr],
            }),
        }
    }
    Ok(reports)
}

/// Methods as rows, (task, condition) cells as columns, `successes/trials (rate%)`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut cols: Vec<(TaskId, Condition)> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !cols.contains(&(r.task, r.condition)) {
            cols.push((r.task, r.condition));
        }
    }
    let mut header = vec!["method".to_string()];
    header.extend(cols.iter().map(|(t, c)| format!("{t}/{c}")));
    header.push("average".into());
    let mut rows = vec![header];
    for m in &methods {
        let mut row = vec![m.to_string()];
        let mut rates = Vec::new();
        for (t, c) in &cols {
            match reports.iter().find(|r| r.method == *m && r.task == *t && r.condition == *c) {
                Some(r) => {
                    rates.push(r.rate());
                    row.push(format!("{}/{} ({:.1}%)", r.successes(), r.trials(), 100.0 * r.rate()));
                }
                None => row.push("-".into()),
            }
        }
        let avg = if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / rates.len() as f64 };
        row.push(format!("{:.1}%", 100.0 * avg));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(s, "|-{}-|", rule.join("-|-"));
        }
    }
    let recov: Vec<&EvalReport> = reports.iter().filter(|r| r.condition == Condition::Disturb).collect();
    if !recov.is_empty() {
        let _ = writeln!(s, "\nrecovery after disturbance (re-grasp / disturbed after grasp):");
        for r in recov {
            let (a, b) = r.recovery();
            let _ = writeln!(s, "  {:<12} {}/{} ({:.1}%)", r.method, a, b, 100.0 * ratio(a, b));
        }
    }
    s
}
