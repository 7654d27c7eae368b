#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use tacvla_core::modality::{ImageObs, Instruction, Proprio, TaskId, IMG_LEN, PROPRIO_DIM};
use tacvla_core::policy::{ModelConfig, Observation};
use tacvla_core::tactile::{TactileMap, TAXELS};

/// Small enough that a forward pass costs well under a millisecond.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        mlp_hidden: 32,
        tactile_hidden: 16,
        expert_hidden: 32,
        horizon: 4,
        tau_dim: 8,
        sample_steps: 5,
        ..ModelConfig::default()
    }
}

/// A frame that stays below contact: everything at or under `p_th`, plus up
/// to `k_th - 1` taxels anywhere in [0, 1].
pub fn quiet_map<R: Rng>(rng: &mut R, p_th: f64, k_th: usize) -> TactileMap {
    let mut v: Vec<f64> = (0..TAXELS).map(|_| rng.random_range(0.0..=p_th)).collect();
    let mut idx: Vec<usize> = (0..TAXELS).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(rng.random_range(0..k_th)) {
        v[i] = rng.random();
    }
    TactileMap::new(v).unwrap()
}

/// A frame with at least `k_th` taxels strictly above `p_th`.
pub fn touching_map<R: Rng>(rng: &mut R, p_th: f64, k_th: usize) -> TactileMap {
    let mut v: Vec<f64> = (0..TAXELS).map(|_| rng.random::<f64>() * p_th).collect();
    let mut idx: Vec<usize> = (0..TAXELS).collect();
    idx.shuffle(rng);
    let n = rng.random_range(k_th..=TAXELS);
    for &i in idx.iter().take(n) {
        v[i] = rng.random_range((p_th + 0.01)..=1.0);
    }
    TactileMap::new(v).unwrap()
}

pub fn random_obs<R: Rng>(rng: &mut R, tactile: TactileMap) -> Observation {
    let mut img = || (0..IMG_LEN).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
    let images = ImageObs::new(img(), img()).unwrap();
    let task = if rng.random::<bool>() { TaskId::Slide } else { TaskId::InBox };
    let mut state = [0.0; PROPRIO_DIM];
    for s in &mut state {
        *s = rng.random_range(-0.5..0.5);
    }
    state[3] = rng.random();
    Observation {
        images,
        instruction: Instruction::for_task(task),
        proprio: Proprio::new(state).unwrap(),
        tactile,
    }
}

pub fn quiet_obs<R: Rng>(rng: &mut R) -> Observation {
    let map = quiet_map(rng, 0.1, 3);
    random_obs(rng, map)
}

pub fn touching_obs<R: Rng>(rng: &mut R) -> Observation {
    let map = touching_map(rng, 0.1, 3);
    random_obs(rng, map)
}

pub mod sim {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tacvla_core::modality::TaskId;
    use tacvla_core::policy::{ACTION_DIM, ACTION_HIGH, ACTION_LOW};
    use tacvla_core::sim::{EventKind, Expert, SimConfig, World};

    /// Expert prefix of random length, then uniformly random commands. Returns
    /// the number of steps on which the rail constraint was broken: the object
    /// leaving its track while locked, reaching the bowl while locked, or an
    /// unlock before the full inward travel.
    pub fn locked_extractions(seed: u64, random_steps: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = World::new(TaskId::Slide, SimConfig::default(), rng.random()).unwrap();
        let mut ex = Expert::new(TaskId::Slide).unwrap();
        let prefix = rng.random_range(0..70);
        let mut bad = 0;
        let mut unlocked_seen = false;
        for t in 0..prefix + random_steps {
            let a = if t < prefix {
                match ex.act(&w) {
                    Ok(a) => a,
                    Err(_) => break,
                }
            } else {
                let mut a = [0.0; ACTION_DIM];
                for j in 0..ACTION_DIM {
                    a[j] = rng.random_range(ACTION_LOW[j]..=ACTION_HIGH[j]);
                }
                if rng.random::<f64>() < 0.5 {
                    a[3] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
                a
            };
            w.advance(a).unwrap();
            let r = w.rail.unwrap();
            if r.locked {
                let on_track = w.object[0] == r.x && w.object[1] >= r.y0 - 1e-12 && w.object[1] <= r.stop() + 1e-12;
                if !on_track || w.success {
                    bad += 1;
                }
            } else if !unlocked_seen {
                unlocked_seen = true;
                if !w.has_event(EventKind::Unlock) || r.slid + 1e-12 < r.travel {
                    bad += 1;
                }
            }
            if w.success {
                break;
            }
        }
        bad
    }

    /// `(agreeing frames, frames)` between the contact flag read off the
    /// synthesized frame and geometric overlap, along expert rollouts.
    pub fn contact_agreement(task: TaskId, worlds: std::ops::Range<u64>) -> (usize, usize) {
        let (mut agree, mut total) = (0, 0);
        for s in worlds {
            let mut w = World::new(task, SimConfig::default(), s).unwrap();
            let mut ex = Expert::new(task).unwrap();
            while !w.success && w.t < 300 {
                let Ok(a) = ex.act(&w) else { break };
                w.advance(a).unwrap();
                total += 1;
                if (w.pad_contact().0 > 0.0) == w.contact_state().flag {
                    agree += 1;
                }
            }
        }
        (agree, total)
    }
}
