//! `tacvla`: data generation, training, evaluation and ablations.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 unreadable config,
//! 4 output already exists.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tacvla_core::bench::{self, Actor, EvalReport, EvalSettings};
use tacvla_core::gradcheck;
use tacvla_core::manifest::{sha256_hex, RunManifest};
use tacvla_core::modality::TaskId;
use tacvla_core::policy::{GatingMode, PolicyModel};
use tacvla_core::sim::{self, Condition, Dataset, SimConfig};
use tacvla_core::train::{self, TrainConfig};
use tacvla_nn::gradcheck::TOLERANCE;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_EXISTS: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "tacvla", version, about = "Contact-gated tactile VLA at desk scale")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Output root; falls back to $TACVLA_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Scripted-expert demonstrations for one task.
    GenData(GenData),
    /// Pretrain a policy from scratch.
    Train(TrainArgs),
    /// LoRA fine-tune a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate one checkpoint.
    Eval(EvalArgs),
    /// Generate data, train the three arms and compare them.
    Ablate(AblateArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Benchmark harness.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Evaluate checkpoints over tasks, conditions and seeds.
    Run(BenchRunArgs),
    /// Render a results CSV as a table.
    Table(TableArgs),
    /// Same as the top-level `ablate`.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    task: TaskId,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gating: Option<GatingMode>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset files; overrides `datasets` from the config.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvalOpts {
    #[arg(long, value_delimiter = ',', default_value = "slide,inbox")]
    tasks: Vec<TaskId>,
    #[arg(long, value_delimiter = ',', default_value = "nominal,block_front,disturb")]
    conditions: Vec<Condition>,
    /// Number of evaluation seeds.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First evaluation seed; the rest follow consecutively.
    #[arg(long, default_value_t = 100)]
    eval_seed: u64,
    #[arg(long, default_value_t = bench::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = sim::DEFAULT_MAX_STEPS)]
    max_steps: usize,
}

impl EvalOpts {
    fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.eval_seed + i).collect()
    }

    fn settings(&self) -> EvalSettings {
        EvalSettings {
            trials: self.trials,
            max_steps: self.max_steps,
            sim: SimConfig::default(),
        }
    }

    fn describe(&self) -> String {
        let tasks: Vec<String> = self.tasks.iter().map(|t| t.to_string()).collect();
        let conds: Vec<String> = self.conditions.iter().map(|c| c.to_string()).collect();
        format!(
            "tasks={} conditions={} seeds={:?} trials={} max_steps={}",
            tasks.join(","),
            conds.join(","),
            self.seed_list(),
            self.trials,
            self.max_steps
        )
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    opts: EvalOpts,
}

#[derive(Args, Debug)]
struct BenchRunArgs {
    /// One checkpoint per method; repeatable.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    opts: EvalOpts,
}

#[derive(Args, Debug)]
struct TableArgs {
    csv: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Demonstrations per task.
    #[arg(long, default_value_t = 50)]
    demos: usize,
    #[command(flatten)]
    opts: EvalOpts,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Random cases per layer.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self { code: EXIT_RUNTIME, err }
    }
}

impl From<tacvla_core::CoreError> for Failure {
    fn from(e: tacvla_core::CoreError) -> Self {
        let code = match e {
            tacvla_core::CoreError::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, err: e.into() }
    }
}

fn fail(code: u8, err: anyhow::Error) -> Failure {
    Failure { code, err }
}

type CliResult<T> = Result<T, Failure>;

struct Ctx {
    json: bool,
    out: PathBuf,
}

impl Ctx {
    /// Refuses to overwrite; an identical embedded manifest is called out so
    /// the caller knows the existing file is already the requested artifact.
    fn claim(&self, name: &str, manifest: &RunManifest) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        if path.exists() {
            let same = existing_manifest(&path).map(|m| m.same_run(manifest)).unwrap_or(false);
            let why = if same {
                "already exists with an identical manifest"
            } else {
                "already exists from a different run"
            };
            return Err(fail(EXIT_EXISTS, anyhow!("{}: {why}", path.display())));
        }
        Ok(path)
    }

    fn emit(&self, value: serde_json::Value, text: &str) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        } else {
            print!("{text}");
        }
    }
}

fn existing_manifest(path: &Path) -> Option<RunManifest> {
    let side = RunManifest::sidecar_path(path);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(side).ok()?).ok()?;
    RunManifest::from_value(&v).ok()
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// CLI flag > config file > built-in default.
fn resolve_config(a: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(EXIT_CONFIG, anyhow!("cannot read config {}: {e}", path.display())))?;
        c.apply_text(&text)
            .map_err(|e| fail(EXIT_CONFIG, anyhow!("config {}: {e}", path.display())))?;
    }
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fail(EXIT_USAGE, anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(g) = a.gating {
        c.gating = g;
    }
    if let Some(s) = a.steps {
        c.steps = s;
    }
    c.validate()?;
    Ok(c)
}

fn load_sets(paths: &[PathBuf]) -> CliResult<Vec<Dataset>> {
    if paths.is_empty() {
        return Err(fail(EXIT_USAGE, anyhow!("no datasets given (use --data or `datasets` in the config)")));
    }
    paths
        .iter()
        .map(|p| sim::read_dataset(p).with_context(|| format!("reading dataset {}", p.display())).map_err(Failure::from))
        .collect()
}

fn gen_data(ctx: &Ctx, a: &GenData) -> CliResult<()> {
    let t0 = Instant::now();
    let name = format!("{}-n{}-s{}.tvla", a.task, a.n, a.seed);
    let config = format!("task={} n={} seed={} sim={:?}", a.task, a.n, a.seed, SimConfig::default());
    let manifest = RunManifest::new("gen-data", &config, a.seed, vec![], &[], vec![PathBuf::from(&name)]);
    let path = ctx.claim(&name, &manifest)?;
    let mut ds = sim::gen_dataset(a.task, a.n, a.seed, SimConfig::default())?;
    ds.header.manifest = manifest.to_value();
    sim::write_dataset(&path, &ds)?;
    manifest.write_sidecar(&path, t0.elapsed().as_millis() as u64)?;
    let retries: usize = ds.header.episodes.iter().map(|e| e.failed_seeds.len()).sum();
    ctx.emit(
        serde_json::json!({"path": path, "episodes": ds.episodes.len(), "frames": ds.frames(), "expert_retries": retries, "manifest": manifest}),
        &format!("wrote {} ({} episodes, {} frames, {retries} expert retries)\n", path.display(), ds.episodes.len(), ds.frames()),
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let mut cfg = resolve_config(&a.cfg)?;
    if !a.data.is_empty() {
        cfg.datasets = a.data.clone();
    }
    let digests = cfg.datasets.iter().map(|p| file_digest(p)).collect::<CliResult<Vec<_>>>()?;
    let name = format!("{}-s{}.ckpt", cfg.gating, cfg.seed);
    let manifest = RunManifest::new("train", &cfg.to_kv(), cfg.seed, cfg.datasets.clone(), &digests, vec![PathBuf::from(&name)]);
    let path = ctx.claim(&name, &manifest)?;
    let sets = load_sets(&cfg.datasets)?;
    let refs: Vec<&Dataset> = sets.iter().collect();
    let mut trainer = train::Trainer::new(fresh_model(&cfg, &refs)?, &cfg, train::Stage::Pretrain, &refs)?;
    trainer.run()?;
    trainer.save(&path, manifest.to_value())?;
    finish_training(ctx, &path, &manifest, &trainer.log, t0)
}

fn fresh_model(cfg: &TrainConfig, sets: &[&Dataset]) -> CliResult<PolicyModel> {
    let mut init = tacvla_core::rng::stream(cfg.seed, tacvla_core::rng::INIT);
    let mut model = PolicyModel::new(cfg.model_config(), cfg.gating, &mut init)?;
    model.stats = tacvla_core::policy::ActionStats::fit(&train::dataset_actions(sets));
    Ok(model)
}

fn finish_training(ctx: &Ctx, path: &Path, manifest: &RunManifest, log: &[train::LossRow], t0: Instant) -> CliResult<()> {
    let log_path = path.with_extension("loss.csv");
    std::fs::write(&log_path, train::loss_csv(log)).context("writing loss log")?;
    manifest.write_sidecar(path, t0.elapsed().as_millis() as u64)?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    ctx.emit(
        serde_json::json!({"checkpoint": path, "loss_log": log_path, "final_loss": last, "manifest": manifest}),
        &format!("wrote {} (final loss {last:.4}), log {}\n", path.display(), log_path.display()),
    );
    Ok(())
}

fn finetune_cmd(ctx: &Ctx, a: &FinetuneArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let mut cfg = resolve_config(&a.cfg)?;
    if !a.data.is_empty() {
        cfg.datasets = a.data.clone();
    }
    let mut inputs = vec![a.base.clone()];
    inputs.extend(cfg.datasets.iter().cloned());
    let digests = inputs.iter().map(|p| file_digest(p)).collect::<CliResult<Vec<_>>>()?;
    let name = format!("{}-s{}-ft.ckpt", cfg.gating, cfg.seed);
    let manifest = RunManifest::new("finetune", &cfg.to_kv(), cfg.seed, inputs, &digests, vec![PathBuf::from(&name)]);
    let path = ctx.claim(&name, &manifest)?;
    let (base, _) = PolicyModel::load(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let sets = load_sets(&cfg.datasets)?;
    let refs: Vec<&Dataset> = sets.iter().collect();
    let model = train::prepare_finetune(&cfg, base)?;
    let before = model.frozen_checksum();
    let mut trainer = train::Trainer::new(model, &cfg, train::Stage::Finetune, &refs)?;
    trainer.run()?;
    if trainer.model.frozen_checksum() != before {
        return Err(anyhow!("frozen parameters changed during fine-tuning").into());
    }
    trainer.save(&path, manifest.to_value())?;
    finish_training(ctx, &path, &manifest, &trainer.log, t0)
}

fn write_reports(ctx: &Ctx, name: &str, manifest: &RunManifest, reports: &[EvalReport], t0: Instant) -> CliResult<()> {
    let path = ctx.claim(name, manifest)?;
    let mut csv = format!("# manifest {}\n", serde_json::to_string(manifest).expect("json"));
    csv.push_str(&bench::reports_csv(reports));
    std::fs::write(&path, csv).context("writing report")?;
    let json_path = path.with_extension("json");
    let body = serde_json::json!({"manifest": manifest, "reports": reports});
    std::fs::write(&json_path, serde_json::to_vec_pretty(&body).expect("json")).context("writing report")?;
    manifest.write_sidecar(&path, t0.elapsed().as_millis() as u64)?;
    ctx.emit(
        serde_json::json!({"csv": path, "reports": reports, "manifest": manifest}),
        &format!("{}\nwrote {}\n", bench::render_table(reports), path.display()),
    );
    Ok(())
}

fn eval_models(models: &[(String, PolicyModel)], o: &EvalOpts) -> CliResult<Vec<EvalReport>> {
    let seeds = o.seed_list();
    let settings = o.settings();
    let mut reports = Vec::new();
    for (method, model) in models {
        for &task in &o.tasks {
            for &c in &o.conditions {
                if bench::condition_supported(task, c) {
                    reports.push(bench::evaluate(method, Actor::Model(model), task, c, &seeds, &settings)?);
                }
            }
        }
    }
    Ok(reports)
}

fn bench_run(ctx: &Ctx, ckpts: &[PathBuf], o: &EvalOpts, command: &str) -> CliResult<()> {
    let t0 = Instant::now();
    let digests = ckpts.iter().map(|p| file_digest(p)).collect::<CliResult<Vec<_>>>()?;
    let manifest = RunManifest::new(command, &o.describe(), o.eval_seed, ckpts.to_vec(), &digests, vec![PathBuf::from(format!("{command}-{}.csv", &digests_tag(&digests)))]);
    let name = manifest.outputs[0].to_string_lossy().into_owned();
    ctx.claim(&name, &manifest)?;
    let mut models = Vec::new();
    for p in ckpts {
        let (m, _) = PolicyModel::load(p).with_context(|| format!("loading {}", p.display()))?;
        models.push((m.gating.name().to_string(), m));
    }
    let reports = eval_models(&models, o)?;
    write_reports(ctx, &name, &manifest, &reports, t0)
}

fn digests_tag(d: &[String]) -> String {
    sha256_hex(d.join(",").as_bytes())[..8].to_string()
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let cfg = resolve_config(&a.cfg)?;
    let config_text = format!("{}demos = {}\n{}\n", cfg.to_kv(), a.demos, a.opts.describe());
    let manifest = RunManifest::new("ablate", &config_text, cfg.seed, vec![], &[], vec![PathBuf::from(format!("ablate-s{}.csv", cfg.seed))]);
    let name = manifest.outputs[0].to_string_lossy().into_owned();
    ctx.claim(&name, &manifest)?;
    let mut sets = Vec::new();
    for &task in &a.opts.tasks {
        let mut ds = sim::gen_dataset(task, a.demos, cfg.seed, SimConfig::default())?;
        ds.header.manifest = manifest.to_value();
        sets.push(ds);
    }
    let refs: Vec<&Dataset> = sets.iter().collect();
    let mut arms = BTreeMap::new();
    let mut progress = String::new();
    for arm in GatingMode::ALL {
        let mut c = cfg.clone();
        c.gating = arm;
        let (model, log) = train::train_arm(&c, &refs)?;
        let _ = writeln!(progress, "{arm}: final loss {:.4}", log.last().map(|r| r.loss).unwrap_or(f64::NAN));
        arms.insert(arm, model);
    }
    if !ctx.json {
        print!("{progress}");
    }
    let reports = bench::compare_arms(&arms, &a.opts.tasks, &a.opts.conditions, &a.opts.seed_list(), &a.opts.settings())?;
    write_reports(ctx, &name, &manifest, &reports, t0)
}

fn gradcheck_cmd(ctx: &Ctx, a: &GradArgs) -> CliResult<()> {
    let suite = gradcheck::full_suite(a.cases, a.seed)?;
    let worst = suite.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let mut text = String::new();
    for (name, r) in &suite {
        let _ = writeln!(text, "{name:<18} max_rel {:.3e}  checked {}", r.max_rel, r.checked);
    }
    let _ = writeln!(text, "max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    let rows: Vec<_> = suite
        .iter()
        .map(|(n, r)| serde_json::json!({"layer": n, "max_rel": r.max_rel, "max_abs": r.max_abs, "checked": r.checked}))
        .collect();
    ctx.emit(serde_json::json!({"layers": rows, "max_rel": worst, "tolerance": TOLERANCE}), &text);
    if worst >= TOLERANCE {
        return Err(anyhow!("gradient check failed: {worst:.3e} >= {TOLERANCE:e}").into());
    }
    Ok(())
}

fn table(ctx: &Ctx, a: &TableArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.csv)
        .map_err(|e| fail(EXIT_CONFIG, anyhow!("cannot read {}: {e}", a.csv.display())))?;
    let reports = bench::parse_csv(&text)?;
    ctx.emit(serde_json::json!({"reports": reports}), &bench::render_table(&reports));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli
        .out
        .or_else(|| std::env::var_os("TACVLA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let writes = !matches!(cli.cmd, Cmd::Gradcheck(_) | Cmd::Bench(BenchCmd::Table(_)));
    if writes {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    }
    let ctx = Ctx { json: cli.json, out };
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(&ctx, a),
        Cmd::Train(a) => train_cmd(&ctx, a),
        Cmd::Finetune(a) => finetune_cmd(&ctx, a),
        Cmd::Eval(a) => bench_run(&ctx, std::slice::from_ref(&a.checkpoint), &a.opts, "eval"),
        Cmd::Ablate(a) | Cmd::Bench(BenchCmd::Ablate(a)) => ablate(&ctx, a),
        Cmd::Gradcheck(a) => gradcheck_cmd(&ctx, a),
        Cmd::Bench(BenchCmd::Run(a)) => bench_run(&ctx, &a.checkpoints, &a.opts, "bench"),
        Cmd::Bench(BenchCmd::Table(a)) => table(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                eprintln!("{}", serde_json::json!({"error": format!("{:#}", f.err), "code": f.code}));
            } else {
                eprintln!("error: {:#}", f.err);
            }
            ExitCode::from(f.code)
        }
    }
}
