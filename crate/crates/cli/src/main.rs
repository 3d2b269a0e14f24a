mod config;
mod error;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genshield_core::dataset::{generate, write_dataset, Dataset};
use genshield_core::evalharness::{evaluate, write_report, ReportFormat};
use genshield_core::inference::{detect, vcot_correct, CorrectOptions};
use genshield_core::model::Model;
use genshield_core::selftest;
use genshield_core::toyworld::{vocab, ToyImage};
use genshield_core::trainer::checkpoint::{load, save};
use genshield_core::trainer::{run_stage, RunOptions, StepLog, TRAIN_LOG_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{CliConfig, Weights};
use error::{CliError, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "genshield",
    version,
    about = "Detect and repair artifacts in synthetic images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test splits as JSONL plus a manifest.
    GenData(GenDataArgs),
    /// Run one curriculum stage.
    Train(TrainArgs),
    /// Structured detection for one image or a whole test split.
    Detect(DetectArgs),
    /// Iterative diagnosis and regeneration of one image.
    Correct(CorrectArgs),
    /// Compute the metrics report on a dataset's test splits.
    Eval(EvalArgs),
    /// Gradient, sampler, masking and optimizer consistency checks.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// JSON config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (also read from GENSHIELD_MICRO_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    n_test_correct: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint; stage 2 defaults to OUT/stage1.gshd.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON file holding one C×H×W image.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    input: Option<PathBuf>,
    /// Dataset directory; every test_detect sample is scored.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    weights: Option<Weights>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    weights: Option<Weights>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Add the perturbation table.
    #[arg(long)]
    robustness: bool,
    /// Output path; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    n_correct: Option<usize>,
    #[arg(long)]
    n_clean: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<Weights>,
    #[command(flatten)]
    common: Common,
}

fn resolve(stage: u8, common: &Common) -> Result<CliConfig, CliError> {
    let mut cfg = CliConfig::load(stage, common.config.as_deref())?;
    cfg.apply_threads(common.threads)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{what} {} does not exist", path.display())))
    }
}

fn write_vocab(dir: &Path) -> Result<(), CliError> {
    let path = dir.join("vocab.json");
    fs::write(&path, vocab().to_json()).map_err(|e| CliError::io(&path, e))
}

fn load_model(path: &Path, weights: Weights) -> Result<Model, CliError> {
    require_exists(path, "checkpoint")?;
    let ckpt = load(path)?;
    Ok(match weights {
        Weights::Ema => ckpt.ema_model()?,
        Weights::Live => ckpt.model()?,
    })
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    require_exists(dir, "data directory")?;
    Ok(Dataset::load(dir)?)
}

fn read_image(path: &Path) -> Result<ToyImage, CliError> {
    require_exists(path, "input")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{} is not a C×H×W image array: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = resolve(1, &args.common)?;
    let d = &mut cfg.dataset;
    if let Some(v) = args.n_train {
        d.n_train = v;
    }
    if let Some(v) = args.n_test {
        d.n_test = v;
    }
    if args.n_test_correct.is_some() {
        d.n_test_correct = args.n_test_correct;
    }
    if let Some(v) = args.common.seed {
        d.seed = v;
    }
    let data = generate(&cfg.dataset)?;
    write_dataset(&data, &args.out)?;
    write_vocab(&args.out)?;
    cfg.write_resolved(&args.out)?;
    let c = data.manifest.counts;
    eprintln!(
        "wrote {} train / {} test detection samples, {} train / {} test correction tuples to {}",
        c.train_detect,
        c.test_detect,
        c.train_correct,
        c.test_correct,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(args.stage, &args.common)?;
    let t = &mut cfg.training;
    t.stage = args.stage;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { t.$f = v; } )* };
    }
    set!(
        total_steps,
        lr,
        warmup_steps,
        batch_size,
        checkpoint_every,
        d_model,
        n_layers,
        n_heads
    );
    if let Some(v) = args.common.seed {
        t.seed = v;
    }
    t.validate()?;

    let init_path = match (&args.init, args.stage) {
        (Some(p), _) => Some(p.clone()),
        (None, 2) => {
            let p = args.out.join("stage1.gshd");
            if !p.exists() {
                return Err(CliError::missing(format!(
                    "stage 2 requires a stage-1 checkpoint: pass --init CKPT or train stage 1 into {}",
                    args.out.display()
                )));
            }
            Some(p)
        }
        (None, _) => None,
    };
    let init = match &init_path {
        Some(p) => {
            require_exists(p, "init checkpoint")?;
            Some(load(p)?)
        }
        None => None,
    };
    let data = load_data(&args.data)?;
    create_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;
    write_vocab(&args.out)?;

    let total = cfg.training.total_steps;
    let mut progress = |log: &StepLog| {
        if log.step % 100 == 0 || log.step == total {
            eprintln!("step {}/{total} {} loss {:.5}", log.step, log.task.name(), log.loss);
        }
    };
    let outcome = run_stage(
        &cfg.training,
        &data,
        init.as_ref(),
        RunOptions {
            threads: cfg.threads,
            checkpoint_dir: Some(args.out.clone()),
            on_step: Some(&mut progress),
        },
    )?;

    let mut csv = String::from(TRAIN_LOG_HEADER);
    csv.push('\n');
    for row in &outcome.log {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let log_path = args.out.join("train_log.csv");
    fs::write(&log_path, csv).map_err(|e| CliError::io(&log_path, e))?;
    let ckpt_path = args.out.join(format!("stage{}.gshd", args.stage));
    save(&ckpt_path, &outcome.checkpoint)?;
    eprintln!("saved {}", ckpt_path.display());
    Ok(())
}

fn emit(text: String, output: Option<&Path>) -> Result<(), CliError> {
    match output {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn detect_cmd(args: DetectArgs) -> Result<(), CliError> {
    let Format::Json = args.format;
    let mut cfg = resolve(1, &args.common)?;
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    let model = load_model(&args.ckpt, cfg.weights)?;
    let text = match (&args.input, &args.data) {
        (Some(path), _) => {
            let image = read_image(path)?;
            image
                .check_grid(model.config.grid)
                .map_err(|e| CliError::config(e.to_string()))?;
            let d = detect(&model, &image)?;
            serde_json::to_string_pretty(&output::Detection::new(&d)).expect("serializes")
        }
        (None, Some(dir)) => {
            let data = load_data(dir)?;
            let rows = data
                .test_detect
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let d = detect(&model, &s.image)?;
                    Ok(output::LabeledDetection {
                        index: i,
                        label: s.label,
                        detection: output::Detection::new(&d),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            serde_json::to_string_pretty(&rows).expect("serializes")
        }
        (None, None) => return Err(CliError::usage("one of --input or --data is required")),
    };
    emit(text, args.output.as_deref())
}

fn correct_cmd(args: CorrectArgs) -> Result<(), CliError> {
    let mut cfg = resolve(1, &args.common)?;
    let e = &mut cfg.eval;
    if let Some(v) = args.max_rounds {
        e.max_rounds = v;
    }
    if let Some(v) = args.flow_steps {
        e.flow_steps = v;
    }
    if let Some(v) = args.common.seed {
        e.seed = v;
    }
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    if cfg.eval.max_rounds == 0 || cfg.eval.flow_steps == 0 {
        return Err(CliError::config("max_rounds and flow_steps must be at least 1"));
    }
    let model = load_model(&args.ckpt, cfg.weights)?;
    let image = read_image(&args.input)?;
    image
        .check_grid(model.config.grid)
        .map_err(|e| CliError::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let traj = vcot_correct(
        &model,
        &image,
        CorrectOptions {
            max_rounds: cfg.eval.max_rounds,
            flow_steps: cfg.eval.flow_steps,
        },
        &mut rng,
    )?;
    create_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;
    output::write_trajectory(&traj, &args.out)?;
    for r in output::Trajectory::new(&traj).rounds {
        println!("round {}: {}", r.round, r.diagnosis);
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve(1, &args.common)?;
    let e = &mut cfg.eval;
    e.robustness |= args.robustness;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { e.$f = v; } )* };
    }
    set!(n_correct, n_clean, max_rounds, flow_steps);
    if let Some(v) = args.common.seed {
        e.seed = v;
    }
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    let model = load_model(&args.ckpt, cfg.weights)?;
    let data = load_data(&args.data)?;
    let report = evaluate(&model, &data, &cfg.eval)?;
    let dir = match args.report.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    write_report(&report, &args.report, ReportFormat::from_path(&args.report))?;
    cfg.write_resolved(&dir)?;
    let d = &report.detection;
    eprintln!(
        "detection accuracy {:.4} A.P. {:.4} (n={})",
        d.accuracy, d.average_precision, d.n
    );
    if let Some(c) = &report.correction {
        eprintln!(
            "correction region RMSE {:.4} -> {:.4} single / {:.4} multi",
            c.region_rmse_before, c.region_rmse_single, c.region_rmse_multi
        );
    }
    if let Some(t) = &report.termination {
        eprintln!("stop in round 1 on clean input: {:.3}", t.stop_in_round1);
    }
    Ok(())
}

fn selftest_cmd() -> Result<(), CliError> {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            error::EXIT_RUNTIME,
            "selftest",
            format!("failed: {}", failed.join(", ")),
        ))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Selftest => selftest_cmd(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit)
        }
    }
}
