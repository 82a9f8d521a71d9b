use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascsc::autodiff::Fault;
use cascsc::checks::{self, CheckOptions, Suite};
use cascsc::data::{self, rules, Dataset, GeneratorParams};
use cascsc::metrics::evaluate_checkpoint;
use cascsc::training::{self, TrainConfig};
use cascsc::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Segmentation with a cascaded multi-layer convolutional sparse coding decoder.
///
/// Exit codes: 0 success, 1 verification failure, 2 usage, config or input
/// error, 3 training diverged.
#[derive(Parser)]
#[command(name = "cascsc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic segmentation dataset.
    GenData(GenData),
    /// Train a model and write checkpoint, loss trace and report into a run directory.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split and write a JSON report.
    Eval(Eval),
    /// Train one model per ML-block iteration count T and tabulate the results.
    AblateT(AblateT),
    /// Run verification suites and print a JSON report to stdout.
    Check(Check),
}

#[derive(Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Random seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of cases (at least 2).
    #[arg(long, default_value_t = 200, value_parser = parse_with(rules::cases))]
    cases: usize,
    /// Image side length in pixels (multiple of 8, at least 16).
    #[arg(long, default_value_t = 96, value_parser = parse_with(rules::size))]
    size: usize,
    /// Number of classes including background (2 to 16).
    #[arg(long, default_value_t = 4, value_parser = parse_with(rules::classes))]
    classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.08, allow_negative_numbers = true, value_parser = parse_with(rules::noise))]
    noise: f64,
}

/// Training settings shared by `train` and `ablate-t`. Flags override the
/// config file, which overrides the built-in defaults.
#[derive(Args)]
struct TrainFlags {
    /// Dataset directory [config: data, default: data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON config file; any field may be omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of epochs [config: epochs, default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [config: batch_size, default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate [config: lr, default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW decoupled weight decay [config: weight_decay, default: 1e-4].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Random seed [config: seed, default: 42].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    flags: TrainFlags,
    /// Run directory [config: out, default: run].
    #[arg(long)]
    out: Option<PathBuf>,
    /// ML-block iterations: one T for every decoder stage, or one per stage
    /// deepest first, comma separated [config: model.iterations, default: 2,2,2].
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<usize>>,
}

#[derive(Args)]
struct Eval {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file (f32 or f64).
    #[arg(long)]
    model: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct AblateT {
    #[command(flatten)]
    flags: TrainFlags,
    /// Iteration counts to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    t: Vec<usize>,
    /// Output directory: ablation.csv plus one run directory per T.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Check {
    /// Suite to run.
    #[arg(value_enum)]
    suite: SuiteArg,
    /// Seed of the random test configurations.
    #[arg(long, default_value_t = CheckOptions::default().seed)]
    seed: u64,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Adjoint,
    Grad,
    Oracle,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ReluMask,
}

fn parse_with<T: std::str::FromStr + 'static>(
    rule: fn(T) -> Result<T, String>,
) -> impl Fn(&str) -> Result<T, String> + Clone + Send + Sync + 'static
where
    T::Err: std::fmt::Display,
{
    move |s: &str| rule(s.parse::<T>().map_err(|e| e.to_string())?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AblateT(a) => ablate_t(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::TrainingDiverged { .. } => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            })
        }
    }
}

fn gen_data(a: GenData) -> cascsc::Result<u8> {
    let params = GeneratorParams {
        seed: a.seed,
        n_cases: a.cases,
        size: a.size,
        n_classes: a.classes,
        noise_sigma: a.noise,
    };
    let manifest = data::generate(&params, &a.out)?;
    println!(
        "wrote {} cases ({} train, {} val), {}x{}, {} classes to {}",
        manifest.splits.train.len() + manifest.splits.val.len(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.image_size[0],
        manifest.image_size[1],
        manifest.n_classes,
        a.out.display()
    );
    Ok(0)
}

fn load_config(flags: &TrainFlags) -> cascsc::Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &flags.data {
        cfg.data = v.clone();
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn apply_t(cfg: &mut TrainConfig, t: &[usize]) -> cascsc::Result<()> {
    let stages = cfg.model.iterations.len();
    match t {
        [one] => cfg.model.set_all_iterations(*one),
        list if list.len() == stages => cfg.model.iterations = list.to_vec(),
        list => {
            return Err(Error::Config(format!(
                "--t needs one value or {stages} values, got {}",
                list.len()
            )))
        }
    }
    Ok(())
}

fn train(a: Train) -> cascsc::Result<u8> {
    let mut cfg = load_config(&a.flags)?;
    if let Some(out) = a.out {
        cfg.out = out;
    }
    if let Some(t) = &a.t {
        apply_t(&mut cfg, t)?;
    }
    let outcome = training::train(&cfg)?;
    println!(
        "best epoch {} of {}: val mean DSC {:.4}, mean HD95 {:.3}; wrote {}",
        outcome.best_epoch,
        cfg.epochs,
        outcome.report.mean_dsc,
        outcome.report.mean_hd95,
        cfg.out.display()
    );
    Ok(0)
}

fn eval(a: Eval) -> cascsc::Result<u8> {
    let data = Dataset::open(&a.data)?;
    let cases = match a.split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let report = evaluate_checkpoint(&a.model, cases, data.n_classes())?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&a.report, &json)?;
    print!("{json}");
    Ok(0)
}

fn ablate_t(a: AblateT) -> cascsc::Result<u8> {
    let cfg = load_config(&a.flags)?;
    cfg.validate()?;
    let data = Dataset::open(&cfg.data)?;
    let rows = training::ablate_t(&cfg, &data, &a.t, &a.out)?;
    for r in rows {
        println!(
            "T={}: mean DSC {:.4}, mean HD95 {:.3}, final gamma2 sparsity {:.4}",
            r.t, r.mean_dsc, r.mean_hd95, r.final_sparsity_gamma2
        );
    }
    Ok(0)
}

fn check(a: Check) -> cascsc::Result<u8> {
    let suite = match a.suite {
        SuiteArg::Adjoint => Suite::Adjoint,
        SuiteArg::Grad => Suite::Grad,
        SuiteArg::Oracle => Suite::Oracle,
        SuiteArg::All => Suite::All,
    };
    let opts = CheckOptions {
        seed: a.seed,
        fault: a
            .inject_fault
            .map(|FaultArg::ReluMask| Fault::NegateReluMask),
    };
    let report = checks::run(suite, opts);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        return Ok(0);
    }
    for f in report.failures() {
        eprintln!(
            "FAILED [{}] {}: worst {:e} > {:e} {}",
            f.suite, f.name, f.worst, f.tolerance, f.detail
        );
    }
    Ok(EXIT_VERIFY)
}

fn write_file(path: &Path, contents: &str) -> cascsc::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
