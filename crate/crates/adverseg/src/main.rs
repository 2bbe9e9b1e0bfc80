//! Command-line front end.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 configuration or
//! usage error, 3 training abort (non-finite losses or gradients).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adverseg::data::{
    generate_phantom, write_labels, write_tensor, DatasetManifest, PhantomSpec, Sample,
};
use adverseg::gradcheck::run_suite;
use adverseg::metrics::{render_table, MetricsReport, REPORT_COLUMNS};
use adverseg::training::{
    evaluate, load_checkpoint, train, TrainConfig, Trainer,
};
use adverseg::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "adverseg", about = "Adversarial semantic segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Render metric report lines as a comparison table.
    Report(ReportArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for .tsr files and manifest.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: u64,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path
    #[arg(long)]
    data: PathBuf,
    /// Key=value config file; command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, history, and metrics
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable the adversarial branch (reconstruction-only training)
    #[arg(long)]
    no_adversarial: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the metrics line here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model name recorded in the report line
    #[arg(long, default_value = "Ours")]
    model: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Files of metric report lines, one model per line
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Comma-separated column list
    #[arg(long, default_value = "pa,recall,iou,dice")]
    columns: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check only items whose name contains this substring
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one analytic gradient; the run must then fail (negative
    /// control for the checker itself)
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn env_seed() -> Option<u64> {
    std::env::var("ADVERSEG_SEED").ok()?.parse().ok()
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn error_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::DegenerateBatch => EXIT_TRAINING_ABORT,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn gen_data(args: GenDataArgs) -> ExitCode {
    let seed = args.seed.or_else(env_seed).unwrap_or(0);
    let spec = PhantomSpec::sized(args.size, args.size, args.classes);
    if let Err(e) = spec.validate() {
        return fail(EXIT_CONFIG, e);
    }
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        return fail(EXIT_FAILURE, format!("cannot create {}: {e}", args.out.display()));
    }
    let mut lines = vec![format!(
        "C={} H={} W={} CIN={}",
        args.classes, args.size, args.size, spec.in_channels
    )];
    for i in 0..args.count {
        let sample = match generate_phantom(&spec, seed, i) {
            Ok(s) => s,
            Err(e) => return fail(error_code(&e), e),
        };
        let img = format!("img_{i:05}.tsr");
        let lbl = format!("lbl_{i:05}.tsr");
        if let Err(e) = write_tensor(&args.out.join(&img), &sample.image) {
            return fail(EXIT_FAILURE, e);
        }
        if let Err(e) = write_labels(&args.out.join(&lbl), &sample.labels) {
            return fail(EXIT_FAILURE, e);
        }
        lines.push(format!("{img} {lbl}"));
    }
    let manifest = args.out.join("manifest.txt");
    if let Err(e) = std::fs::write(&manifest, lines.join("\n") + "\n") {
        return fail(EXIT_FAILURE, format!("cannot write manifest: {e}"));
    }
    println!(
        "wrote {} samples ({}x{}, {} classes, seed {}) to {}",
        args.count,
        args.size,
        args.size,
        args.classes,
        seed,
        args.out.display()
    );
    ExitCode::SUCCESS
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Sample>), Error> {
    let manifest = DatasetManifest::load(path)?;
    let samples = manifest.load_all()?;
    Ok((manifest, samples))
}

fn build_train_config(args: &TrainArgs) -> Result<(TrainConfig, DatasetManifest, Vec<Sample>), Error> {
    let (mut cfg, seen) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            TrainConfig::parse(&text)?
        }
        None => (TrainConfig::default(), Default::default()),
    };
    let (manifest, samples) = load_dataset(&args.data)?;
    // the dataset fixes the tensor shapes; a config that states something
    // else is a hard error, an unstated one just inherits them
    if seen.contains("num_classes") && cfg.net.num_classes != manifest.num_classes {
        return Err(Error::config(format!(
            "config says num_classes={} but dataset has {}",
            cfg.net.num_classes, manifest.num_classes
        )));
    }
    if seen.contains("in_channels") && cfg.net.in_channels != manifest.in_channels {
        return Err(Error::config(format!(
            "config says in_channels={} but dataset has {}",
            cfg.net.in_channels, manifest.in_channels
        )));
    }
    cfg.net.num_classes = manifest.num_classes;
    cfg.net.in_channels = manifest.in_channels;
    if args.no_adversarial {
        cfg.adversarial = false;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    } else if !seen.contains("seed") {
        if let Some(v) = env_seed() {
            cfg.seed = v;
        }
    }
    cfg.validate()?;
    Ok((cfg, manifest, samples))
}

fn run_train(args: TrainArgs) -> ExitCode {
    let (cfg, _manifest, samples) = match build_train_config(&args) {
        Ok(v) => v,
        Err(e) => return fail(error_code(&e), e),
    };
    let mut trainer = if let Some(resume) = &args.resume {
        let restored = load_checkpoint(resume).and_then(|ckpt| Trainer::restore(&ckpt));
        match restored {
            Ok(mut t) => {
                // resumed runs keep the checkpointed config except for the
                // step budget, which the flag may extend
                t.cfg.steps = cfg.steps;
                t
            }
            Err(e) => return fail(error_code(&e), e),
        }
    } else {
        match Trainer::new(&cfg) {
            Ok(t) => t,
            Err(e) => return fail(error_code(&e), e),
        }
    };
    match train(&mut trainer, &samples, &args.out) {
        Ok(outcome) => {
            if let Some(line) = outcome.history.last() {
                println!("{line}");
            }
            if let Some(report) = &outcome.final_report {
                println!("val: {}", report.to_kv());
            }
            println!(
                "trained {} steps; best validation dice {:.4} at step {}; outputs in {}",
                outcome.steps_run,
                outcome.best_dice,
                outcome.best_step,
                args.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_code(&e), e),
    }
}

fn run_eval(args: EvalArgs) -> ExitCode {
    let result = (|| -> Result<MetricsReport, Error> {
        let ckpt = load_checkpoint(&args.checkpoint)?;
        let mut trainer = Trainer::restore(&ckpt)?;
        let (manifest, samples) = load_dataset(&args.data)?;
        if manifest.num_classes != trainer.cfg.net.num_classes {
            return Err(Error::config(format!(
                "checkpoint was trained with {} classes, dataset has {}",
                trainer.cfg.net.num_classes, manifest.num_classes
            )));
        }
        let counts = evaluate(&mut trainer.gen, &samples, manifest.num_classes)?;
        MetricsReport::from_counts(&args.model, &counts)
    })();
    match result {
        Ok(report) => {
            let line = report.to_kv();
            match &args.out {
                Some(path) => {
                    if let Err(e) = std::fs::write(path, format!("{line}\n")) {
                        return fail(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()));
                    }
                }
                None => println!("{line}"),
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_code(&e), e),
    }
}

fn run_report(args: ReportArgs) -> ExitCode {
    let columns: Vec<&str> = args
        .columns
        .split(',')
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect();
    for col in &columns {
        if !REPORT_COLUMNS.contains(col) {
            return fail(
                EXIT_CONFIG,
                format!(
                    "unknown column '{col}'; valid columns: {}",
                    REPORT_COLUMNS.join(", ")
                ),
            );
        }
    }
    let mut reports = Vec::new();
    for path in &args.inputs {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_FAILURE, format!("cannot read {}: {e}", path.display())),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match MetricsReport::parse_kv(line) {
                Ok(r) => reports.push(r),
                Err(e) => return fail(EXIT_FAILURE, format!("{}: {e}", path.display())),
            }
        }
    }
    match render_table(&reports, &columns) {
        Ok(table) => {
            print!("{table}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_code(&e), e),
    }
}

fn run_gradcheck(args: GradcheckArgs) -> ExitCode {
    let seed = args.seed.or_else(env_seed).unwrap_or(0);
    let items = match run_suite(args.layer.as_deref(), seed, args.corrupt) {
        Ok(items) => items,
        Err(e) => return fail(error_code(&e), e),
    };
    if items.is_empty() {
        return fail(
            EXIT_CONFIG,
            format!("no gradient checks match '{}'", args.layer.as_deref().unwrap_or("")),
        );
    }
    let mut failed = false;
    for item in &items {
        let status = if item.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {} rel_err={:.3e} threshold={:.0e}",
            item.name, item.rel_err, item.threshold
        );
        failed |= !item.passed();
    }
    if failed {
        ExitCode::from(EXIT_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}
