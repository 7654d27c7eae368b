use std::path::Path;
use std::process::{Command, Output};

fn tacvla(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacvla"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn tacvla")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICK: [&str; 6] = ["--set", "batch_size=2", "--set", "flow_samples=1", "--set", "warmup=1"];

#[test]
fn unknown_flags_and_subcommands_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tacvla(dir.path(), &["gen-data", "--task", "inbox", "--bogus"])), 2);
    assert_eq!(code(&tacvla(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&tacvla(dir.path(), &["gen-data", "--task", "juggling"])), 2);
    assert_eq!(code(&tacvla(dir.path(), &["train", "--set", "colour=blue"])), 2);
    assert_eq!(code(&tacvla(dir.path(), &["train"])), 2);
}

#[test]
fn unreadable_config_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = tacvla(dir.path(), &["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "steps: many\n").unwrap();
    assert_eq!(code(&tacvla(dir.path(), &["train", "--config", bad.to_str().unwrap()])), 3);
}

#[test]
fn gen_data_is_byte_identical_and_refuses_to_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--task", "inbox", "--n", "2", "--seed", "7"];
    let oa = tacvla(a.path(), &args);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&tacvla(b.path(), &args)), 0);
    let name = "inbox-n2-s7.tvla";
    let bytes = std::fs::read(a.path().join(name)).unwrap();
    assert_eq!(bytes, std::fs::read(b.path().join(name)).unwrap());
    // The manifest travels inside the file and next to it.
    assert!(bytes.windows(8).any(|w| w == b"gen-data"));
    assert!(std::fs::read_dir(a.path()).unwrap().count() >= 2);
    let again = tacvla(a.path(), &args);
    assert_eq!(code(&again), 4);
    assert!(String::from_utf8_lossy(&again.stderr).contains("identical manifest"));
    assert_eq!(std::fs::read(a.path().join(name)).unwrap(), bytes);
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tacvla"))
        .env("TACVLA_OUT", dir.path())
        .args(["gen-data", "--task", "slide", "--n", "1", "--seed", "3"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("slide-n1-s3.tvla").exists());
}

#[test]
fn gradcheck_prints_max_relative_error_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tacvla(dir.path(), &["gradcheck", "--cases", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error")).expect("summary line");
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst < 1e-6, "{line}");
    let j = tacvla(dir.path(), &["--json", "gradcheck", "--cases", "1"]);
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert!(v["max_rel"].as_f64().unwrap() < 1e-6);
    assert!(v["layers"].as_array().unwrap().len() >= 6);
}

#[test]
fn train_finetune_eval_and_table_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tacvla(d, &["gen-data", "--task", "slide", "--n", "1", "--seed", "1"])), 0);
    let data = d.join("slide-n1-s1.tvla");
    // Config file says 5 steps, the flag says 2: the flag wins.
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, format!("steps = 5\nseed = 4\ndatasets = {}\n", data.display())).unwrap();
    let mut args = vec!["--json", "train", "--config", cfg.to_str().unwrap(), "--steps", "2"];
    args.extend(QUICK);
    let o = tacvla(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();
    let log = std::fs::read_to_string(v["loss_log"].as_str().unwrap()).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,lr,wall_time_ms"));
    assert_eq!(log.lines().count(), 3);
    assert!(ckpt.ends_with("gated-s4.ckpt"));

    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--steps", "2"];
    args.extend(QUICK);
    assert_eq!(code(&tacvla(d, &args)), 4);

    let mut args = vec!["finetune", "--config", cfg.to_str().unwrap(), "--base", &ckpt, "--set", "finetune_steps=2"];
    args.extend(QUICK);
    let o = tacvla(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("gated-s4-ft.ckpt").exists());

    let o = tacvla(
        d,
        &["eval", "--checkpoint", &ckpt, "--tasks", "slide", "--conditions", "nominal,block_front", "--seeds", "1", "--trials", "2", "--max-steps", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("slide/nominal") && text.contains("0/2 (0.0%)"), "{text}");
    let csv = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "csv") && !p.to_string_lossy().contains("loss"))
        .expect("report csv");
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("# manifest "));
    assert!(body.contains("method,task,condition,seed,trials,successes,rate,mean_steps"));

    let t = tacvla(d, &["--json", "bench", "table", csv.to_str().unwrap()]);
    assert_eq!(code(&t), 0);
    let v: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
    assert_eq!(v["reports"][0]["method"], "gated");
}
