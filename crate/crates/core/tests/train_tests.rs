mod common;

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tacvla_core::modality::TaskId;
use tacvla_core::policy::{ActionStats, GatingMode, PolicyModel};
use tacvla_core::sim::{gen_dataset, Dataset, SimConfig};
use tacvla_core::train::*;

fn data() -> &'static [Dataset; 2] {
    static D: OnceLock<[Dataset; 2]> = OnceLock::new();
    D.get_or_init(|| {
        [
            gen_dataset(TaskId::Slide, 2, 1, SimConfig::default()).unwrap(),
            gen_dataset(TaskId::InBox, 2, 2, SimConfig::default()).unwrap(),
        ]
    })
}

fn sets() -> Vec<&'static Dataset> {
    data().iter().collect()
}

fn config(seed: u64, gating: GatingMode) -> TrainConfig {
    TrainConfig {
        seed,
        gating,
        steps: 12,
        batch_size: 4,
        flow_samples: 2,
        warmup: 2,
        finetune_steps: 10,
        ..TrainConfig::default()
    }
}

fn tiny_model(c: &TrainConfig) -> PolicyModel {
    let mut m = PolicyModel::new(common::tiny(), c.gating, &mut ChaCha8Rng::seed_from_u64(c.seed)).unwrap();
    m.stats = ActionStats::fit(&dataset_actions(&sets()));
    m
}

fn losses(log: &[LossRow]) -> Vec<(usize, u64, u64)> {
    log.iter().map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits())).collect()
}

fn param_bits(m: &PolicyModel) -> Vec<(String, Vec<u64>)> {
    m.store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let c = config(3, GatingMode::Gated);
    let s = sets();
    let mut full = Trainer::new(tiny_model(&c), &c, Stage::Pretrain, &s).unwrap();
    full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::new(tiny_model(&c), &c, Stage::Pretrain, &s).unwrap();
    first.run_until(5).unwrap();
    first.save(&path, serde_json::json!({})).unwrap();
    let head = first.log.clone();
    drop(first);

    let mut rest = Trainer::resume(&path, &s).unwrap();
    assert_eq!(rest.step, 5);
    rest.run().unwrap();
    let mut joined = head;
    joined.extend(rest.log.iter().copied());
    assert_eq!(losses(&joined), losses(&full.log));
    assert_eq!(param_bits(&rest.model), param_bits(&full.model));
}

#[test]
fn same_seed_gives_identical_loss_log() {
    let c = config(4, GatingMode::Gated);
    let run = |c: &TrainConfig| {
        let mut t = Trainer::new(tiny_model(c), c, Stage::Pretrain, &sets()).unwrap();
        t.run().unwrap();
        losses(&t.log)
    };
    let a = run(&c);
    assert_eq!(a.len(), c.steps);
    assert_eq!(a, run(&c));
    assert_ne!(a, run(&config(5, GatingMode::Gated)));
}

#[test]
fn arms_share_initialization_data_order_and_noise() {
    let s = sets();
    let mut trainers: Vec<Trainer> = GatingMode::ALL
        .iter()
        .map(|&g| {
            let c = config(6, g);
            Trainer::new(tiny_model(&c), &c, Stage::Pretrain, &s).unwrap()
        })
        .collect();
    let init = param_bits(&trainers[0].model);
    for t in &trainers[1..] {
        assert_eq!(param_bits(&t.model), init);
    }
    for _ in 0..3 {
        let batches: Vec<_> = trainers.iter_mut().map(|t| t.batcher.next(4).unwrap()).collect();
        for b in &batches[1..] {
            assert_eq!(b.observations, batches[0].observations);
            assert_eq!(b.windows, batches[0].windows);
        }
    }
    let noise: Vec<u128> = trainers.iter().map(|t| t.state().flow_pos).collect();
    assert!(noise.iter().all(|&p| p == noise[0]));
    // After real steps the sampler positions still agree; only the gate differs.
    for t in &mut trainers {
        t.run_until(3).unwrap();
    }
    let states: Vec<_> = trainers.iter().map(|t| (t.state().data_pos, t.state().flow_pos)).collect();
    assert!(states.iter().all(|s| *s == states[0]));
}

#[test]
fn finetune_leaves_frozen_groups_byte_identical() {
    let c = config(7, GatingMode::Gated);
    let mut m = tiny_model(&c);
    m.attach_lora(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    m.freeze_for_finetune().unwrap();
    let before = param_bits(&m);
    let sum = m.frozen_checksum();
    let s = sets();
    let mut t = Trainer::new(m, &c, Stage::Finetune, &s).unwrap();
    t.run().unwrap();
    assert_eq!(t.model.frozen_checksum(), sum);
    let after = param_bits(&t.model);
    let mut moved = Vec::new();
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        let frozen = name.starts_with("tactile.") || (name.starts_with("prefix.") && !name.contains(".lora_"));
        if frozen {
            assert_eq!(a, b, "{name} changed");
        } else if a != b {
            moved.push(name.clone());
        }
    }
    // The trainable groups did learn something.
    assert!(moved.iter().any(|n| n.contains(".lora_")));
    assert!(moved.iter().any(|n| n.starts_with("expert.")));
}

#[test]
fn finetune_rejects_a_mismatched_base() {
    let c = config(8, GatingMode::Gated);
    let err = prepare_finetune(&c, tiny_model(&c));
    assert!(err.is_err());
    let other = TrainConfig {
        gating: GatingMode::NoGating,
        ..c.clone()
    };
    let base = PolicyModel::new(c.model_config(), GatingMode::Gated, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(prepare_finetune(&other, base.clone()).is_err());
    let no_lora = TrainConfig { lora: false, ..c.clone() };
    assert!(prepare_finetune(&no_lora, base.clone()).is_err());
    let ready = prepare_finetune(&c, base).unwrap();
    assert!(ready.has_lora());
}

#[test]
fn loss_log_csv_has_the_documented_columns() {
    let rows = [
        LossRow { step: 0, loss: 1.25, lr: 1e-3, wall_time_ms: 7 },
        LossRow { step: 1, loss: 0.5, lr: 5e-4, wall_time_ms: 15 },
    ];
    let csv = loss_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,wall_time_ms"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.25);
    assert_eq!(first[3], "7");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_file_overrides_defaults_and_later_lines_win() {
    let c = TrainConfig::parse("steps = 10\nlr = 0.01\nsteps = 20\n").unwrap();
    assert_eq!(c.steps, 20);
    assert_eq!(c.lr, 0.01);
    assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    // A flag applied after the file takes precedence.
    let mut c = c;
    c.set("steps", "30").unwrap();
    assert_eq!(c.steps, 30);
    assert_ne!(c.hash(), TrainConfig::parse("steps = 20\nlr = 0.01").unwrap().hash());
    assert!(TrainConfig::parse("gating = sometimes").is_err());
    assert!(TrainConfig::parse("batch_size = 0").is_err());
}
