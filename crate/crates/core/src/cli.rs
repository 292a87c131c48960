//! The `ltms` command line.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;
use sha1::{Digest, Sha1};

use crate::data::{
    generate_synthetic, load_dataset, load_scenario, save_dataset, Checkpoint, DataError, ModelConfig, Profile,
    SynthOptions,
};
use crate::export::{prediction_csv, scene_svg};
use crate::model::{Model, SceneInputs};
use crate::numerics::NumericsError;
use crate::objective::{MetricReport, MISS_THRESHOLD};
use crate::train::{constant_velocity_baseline, evaluate, overfit, prepare, OverfitOptions, Trainer};
use crate::verify::{self, VerifyOptions};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "LTMS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ltms", version, about = "Train, evaluate and inspect multi-agent trajectory predictors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: one CSV and lane file per scene plus an index.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, a loss curve and a run manifest.
    Train(TrainArgs),
    /// Stage-one and stage-two metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-mode trajectories of one scenario as CSV.
    Predict(PredictArgs),
    /// SVG overlay of one scenario with the predicted modes of one agent.
    ExportSvg(ExportSvgArgs),
    /// Run the invariant suite and report the parameter budget.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// straight, turns or intersection
    #[arg(long, default_value = "intersection")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML model and training configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with an index file
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset used to pick the best checkpoint
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed
    #[arg(long, default_value_t = ModelConfig::default().seed)]
    pub seed: u64,
    /// Overrides the config epochs; optimizer steps in overfit mode
    #[arg(long, default_value_t = ModelConfig::default().epochs)]
    pub epochs: usize,
    /// Overrides the config stage-two loss weight
    #[arg(long, default_value_t = ModelConfig::default().lambda1)]
    pub lambda1: f64,
    /// Full-batch overfitting run on the first N scenes
    #[arg(long, value_name = "N")]
    pub overfit: Option<usize>,
    /// Continue from a checkpoint; epoch numbering carries on
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Miss threshold on the final displacement, meters
    #[arg(long, default_value_t = MISS_THRESHOLD)]
    pub threshold: f64,
    /// Also write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scenario CSV; a sibling .lanes file is read when present
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportSvgArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Agent whose modes are drawn; the first focal agent by default
    #[arg(long)]
    pub agent: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Configuration of the model-level checks
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Check a trained checkpoint instead of a fresh model
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test-only: let the temporal convolutions see one step ahead
    #[arg(long)]
    pub inject_noncausal: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Caps the global thread pool from `LTMS_THREADS` when set.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let sub = matches.subcommand().map(|(_, m)| m.clone()).expect("subcommand required");
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a, &sub),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::ExportSvg(a) => export_svg(&a),
        Command::Verify(a) => run_verify(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NUMERIC
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| DataError::io(path, e))?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let profile: Profile = a.profile.parse().map_err(|e: DataError| Failure::Usage(e.to_string()))?;
    let scenes = generate_synthetic(a.seed, a.count, profile, &SynthOptions::default())?;
    let scenarios: Vec<_> = scenes.into_iter().map(|s| s.scenario).collect();
    let files = save_dataset(&a.out, &scenarios)?;
    println!("wrote {} scenarios to {}", files.len(), a.out.display());
    Ok(())
}

fn sha1_hex(bytes: &[u8]) -> String {
    Sha1::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn load_config(path: Option<&Path>) -> std::result::Result<ModelConfig, Failure> {
    Ok(match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    })
}

fn metrics_json(m: &MetricReport) -> serde_json::Value {
    json!({
        "min_ade": m.min_ade,
        "min_fde": m.min_fde,
        "miss_rate": m.miss_rate,
        "agents": m.agents,
        "modes": m.modes,
    })
}

const CURVE_HEADER: &str = "epoch,lr,l_cls,l_reg,l_stage1,l_stage2,l_all,val_min_ade";

fn train(a: &TrainArgs, m: &ArgMatches) -> Outcome {
    let started = unix_time();
    let clock = Instant::now();
    let (mut trainer, resumed_from) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (Trainer::from_checkpoint(&ckpt)?, Some(path.clone()))
        }
        None => {
            let mut config = load_config(a.config.as_deref())?;
            if given(m, "seed") {
                config.seed = a.seed;
            }
            if given(m, "lambda1") {
                config.lambda1 = a.lambda1;
            }
            config.validate()?;
            (Trainer::new(Model::new(&config)?), None)
        }
    };
    if resumed_from.is_some() && given(m, "lambda1") {
        trainer.model.config.lambda1 = a.lambda1;
        trainer.model.config.validate()?;
    }
    if given(m, "epochs") {
        trainer.model.config.epochs = a.epochs;
    }
    let config = trainer.model.config.clone();
    let scenarios = load_dataset(&a.data, config.observed)?;
    fs::create_dir_all(&a.out).map_err(|e| DataError::io(&a.out, e))?;
    let curve_path = a.out.join("loss_curve.csv");
    let last_path = a.out.join("last.ckpt");
    let best_path = a.out.join("best.ckpt");
    let final_path = a.out.join("final.ckpt");

    let mut summary = json!({});
    if let Some(n) = a.overfit {
        if n == 0 || n > scenarios.len() {
            return Err(Failure::Usage(format!(
                "--overfit {n} needs between 1 and {} scenes",
                scenarios.len()
            )));
        }
        let steps = if given(m, "epochs") { a.epochs } else { OverfitOptions::default().steps };
        let opts = OverfitOptions {
            steps,
            ..OverfitOptions::default()
        };
        let (report, model) = overfit(&config, &scenarios[..n], &opts)?;
        let mut curve = String::from("step,l_all\n");
        for (i, l) in report.losses.iter().enumerate() {
            curve.push_str(&format!("{i},{l}\n"));
        }
        write_file(&curve_path, curve.as_bytes())?;
        Checkpoint::from_store(&model.config, &model.params, 0, model.config.seed, None).save(&final_path)?;
        println!(
            "overfit on {n} scenes: L_all {:.6} -> {:.6} ({:.1}% drop) over {steps} steps",
            report.initial(),
            report.last(),
            100.0 * report.reduction()
        );
        println!(
            "minADE stage1 {:.4} stage2 {:.4}",
            report.stage1.min_ade, report.stage2.min_ade
        );
        summary = json!({
            "overfit_scenes": n,
            "steps": steps,
            "initial_loss": report.initial(),
            "final_loss": report.last(),
            "reduction": report.reduction(),
            "stage1": metrics_json(&report.stage1),
            "stage2": metrics_json(&report.stage2),
        });
    } else {
        let (data, skipped) = prepare(&scenarios, &config)?;
        if data.is_empty() {
            return Err(Error::EmptyBatch.into());
        }
        if skipped > 0 {
            eprintln!("skipping {skipped} scenarios without a scored agent");
        }
        let val = match &a.val {
            Some(dir) => Some(prepare(&load_dataset(dir, config.observed)?, &config)?.0),
            None => None,
        };
        let mut curve = if resumed_from.is_some() && curve_path.exists() {
            fs::read_to_string(&curve_path).map_err(|e| DataError::io(&curve_path, e))?
        } else {
            format!("{CURVE_HEADER}\n")
        };
        let mut best = f64::INFINITY;
        let mut best_epoch = trainer.epoch;
        while trainer.epoch < config.epochs {
            let report = match trainer.run_epoch(&data, config.epochs) {
                Ok(r) => r,
                Err(e @ Error::Numerics(_)) => {
                    let kept = if trainer.epoch > 0 || resumed_from.is_some() {
                        trainer.checkpoint().save(&last_path)?;
                        format!("; last good checkpoint at {}", last_path.display())
                    } else {
                        String::new()
                    };
                    return Err(Failure::Check(format!(
                        "epoch {}: {e}; parameters were not updated by the failing step{kept}",
                        trainer.epoch + 1
                    )));
                }
                Err(e) => return Err(e.into()),
            };
            let val_ade = match &val {
                Some(v) if !v.is_empty() => Some(evaluate(&trainer.model, v, MISS_THRESHOLD)?.stage2.min_ade),
                _ => None,
            };
            let l = report.loss;
            curve.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                report.epoch,
                report.lr,
                l.cls,
                l.reg,
                l.stage1,
                l.stage2,
                l.all,
                val_ade.map(|v| v.to_string()).unwrap_or_default()
            ));
            write_file(&curve_path, curve.as_bytes())?;
            let ckpt = trainer.checkpoint();
            ckpt.save(&last_path)?;
            let score = val_ade.unwrap_or(l.all);
            if score < best {
                best = score;
                best_epoch = report.epoch;
                ckpt.save(&best_path)?;
            }
            println!(
                "epoch {:>3} lr {:.2e} L_cls {:.4} L_reg {:.4} L_stage2 {:.4} L_all {:.4}{}",
                report.epoch,
                report.lr,
                l.cls,
                l.reg,
                l.stage2,
                l.all,
                val_ade.map(|v| format!(" val minADE {v:.4}")).unwrap_or_default()
            );
        }
        trainer.checkpoint().save(&final_path)?;
        summary = json!({
            "epochs": trainer.epoch,
            "best_epoch": best_epoch,
            "scenes": data.len(),
            "skipped": skipped,
        });
    }
    let manifest = json!({
        "command": "train",
        "data": a.data.display().to_string(),
        "resumed_from": resumed_from.map(|p| p.display().to_string()),
        "config_sha1": sha1_hex(config.to_text().as_bytes()),
        "config": config.to_text(),
        "seed": config.seed,
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
        "result": summary,
        "started_unix": started,
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&a.out.join("manifest.json"), text.as_bytes())
}

fn load_model(path: &Path) -> std::result::Result<Model, Failure> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::new(&ckpt.config)?;
    ckpt.restore_into(&mut model.params)?;
    Ok(model)
}

fn eval(a: &EvalArgs) -> Outcome {
    if !(a.threshold.is_finite() && a.threshold > 0.0) {
        return Err(Failure::Usage(format!("--threshold {} must be positive", a.threshold)));
    }
    let model = load_model(&a.checkpoint)?;
    let scenarios = load_dataset(&a.data, model.config.observed)?;
    let (data, _) = prepare(&scenarios, &model.config)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch.into());
    }
    let report = evaluate(&model, &data, a.threshold)?;
    let cv = constant_velocity_baseline(&scenarios, &model.config, a.threshold)?;
    let line = |name: &str, m: &MetricReport| {
        println!(
            "{name:<8} minADE {:.4} minFDE {:.4} MR {:.4} agents {} modes {}",
            m.min_ade, m.min_fde, m.miss_rate, m.agents, m.modes
        )
    };
    line("stage1", &report.stage1);
    line("stage2", &report.stage2);
    line("cv", &cv);
    if let Some(out) = &a.out {
        let j = json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "data": a.data.display().to_string(),
            "threshold": a.threshold,
            "stage1": metrics_json(&report.stage1),
            "stage2": metrics_json(&report.stage2),
            "constant_velocity": metrics_json(&cv),
            "loss": {
                "l_cls": report.loss.cls,
                "l_reg": report.loss.reg,
                "l_stage2": report.loss.stage2,
                "l_all": report.loss.all,
            },
        });
        write_file(out, serde_json::to_string_pretty(&j).expect("report serializes").as_bytes())?;
    }
    Ok(())
}

fn predict_one(
    checkpoint: &Path,
    scenario: &Path,
) -> std::result::Result<(Model, crate::scene::Scenario, crate::model::Prediction), Failure> {
    let model = load_model(checkpoint)?;
    let s = load_scenario(scenario, model.config.observed)?;
    let inputs = SceneInputs::build(&s, &model.config)?;
    let pred = model.predict(&inputs).map_err(Error::from)?;
    Ok((model, s, pred))
}

fn predict(a: &PredictArgs) -> Outcome {
    let (_, s, pred) = predict_one(&a.checkpoint, &a.scenario)?;
    let csv = prediction_csv(&pred, &s);
    match &a.out {
        Some(path) => write_file(path, csv.as_bytes()),
        None => {
            let _ = std::io::stdout().write_all(csv.as_bytes());
            Ok(())
        }
    }
}

fn export_svg(a: &ExportSvgArgs) -> Outcome {
    let (model, s, pred) = predict_one(&a.checkpoint, &a.scenario)?;
    let slot = match &a.agent {
        Some(id) => pred
            .agents
            .iter()
            .position(|&i| &s.agent_ids[i] == id)
            .ok_or_else(|| Failure::Usage(format!("agent {id} is not present at the last observed step")))?,
        None => pred.agents.iter().position(|i| s.focal.contains(i)).unwrap_or(0),
    };
    let svg = scene_svg(&pred, &s, model.config.observed, slot);
    write_file(&a.out, svg.as_bytes())
}

fn run_verify(a: &VerifyArgs) -> Outcome {
    let model = match &a.checkpoint {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let config = match &model {
        Some(m) => m.config.clone(),
        None => load_config(a.config.as_deref())?,
    };
    let opts = VerifyOptions {
        seed: a.seed,
        inject_noncausal: a.inject_noncausal,
        ..VerifyOptions::default()
    };
    let report = verify::run(&config, model.as_ref(), &opts)?;
    for line in report.lines() {
        println!("{line}");
    }
    println!(
        "parameters: {} total, {} in refinement",
        report.param_count, report.refine_param_count
    );
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

impl From<NumericsError> for Failure {
    fn from(e: NumericsError) -> Self {
        Failure::Lib(e.into())
    }
}
