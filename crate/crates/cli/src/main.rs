use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cada::analysis::{export_spectra, l1_prune, profile};
use cada::backbone::{checkpoint, Backbone};
use cada::config::ExperimentConfig;
use cada::gradcheck::{self, GradCheck};
use cada::nn::Mode;
use cada::reference::{oracle_suite, ORACLE_TOLERANCE};
use cada::train::{evaluate, mean_loss, train_loop, Dataset, CHECKPOINT_FILE, METRICS_FILE};
use cada::Error;
use clap::{Args, Parser, Subcommand};

const CONFIG_FILE: &str = "config.cfg";

#[derive(Parser)]
#[command(name = "cada", version, about = "Decomposed-attention backbones: training, profiling and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset, writing metrics and checkpoints.
    Train(Common),
    /// Top-1 accuracy and loss of a checkpoint on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate counts of the configured model.
    Profile(Common),
    /// Finite-difference checks of every backward pass plus the configured model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sampled coordinates per tensor in the model check.
        #[arg(long, default_value_t = 40)]
        points: usize,
    },
    /// Greedy L1 pruning of base kernels under an accuracy budget.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allowed top-1 drop as a fraction; overrides `analysis.tolerance`.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Frequency responses of every depthwise and downsampling kernel.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Optimized kernels against naive references.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Random cases per kernel.
        #[arg(long, default_value_t = 25)]
        cases: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn resolve(common: &Common) -> Outcome<ExperimentConfig> {
    let (text, origin) = match &common.config {
        Some(p) => (std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?, p.display().to_string()),
        None => (String::new(), "<defaults>".to_string()),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(o) = &common.out {
        overrides.push(format!("run.out_dir={}", o.display()));
    }
    Ok(ExperimentConfig::parse_with_overrides(&text, &origin, &overrides)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn record(cfg: &ExperimentConfig) -> Outcome {
    write(&cfg.out_dir.join(CONFIG_FILE), cfg.to_text())
}

fn datasets(cfg: &ExperimentConfig) -> Outcome<(Dataset, Dataset)> {
    Ok(Dataset::load(&cfg.dataset_source(), cfg.model.num_classes, cfg.seed())?)
}

fn load_checkpoint(cfg: &mut ExperimentConfig, path: Option<PathBuf>) -> Outcome<Backbone<f32>> {
    let path = path.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let model = checkpoint::load::<f32>(&path)?;
    cfg.model = model.config.clone();
    Ok(model)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            record(&cfg)?;
            let (train, val) = datasets(&cfg)?;
            let mut model = Backbone::<f32>::build(&cfg.model, cfg.seed())?;
            let initial = mean_loss(&mut model.clone(), &train, &cfg.train.augment, cfg.train.batch_size, Mode::Train)?;
            println!("epoch=0 train_loss={initial}");
            let history = train_loop(&mut model, &train, &val, &cfg.train, Some(&cfg.out_dir))?;
            for e in &history.epochs {
                println!("epoch={} train_loss={} val_top1={} lr={}", e.epoch, e.train_loss, e.val_top1, e.lr);
            }
            println!("metrics={} checkpoint={}", cfg.out_dir.join(METRICS_FILE).display(), cfg.out_dir.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = resolve(&common)?;
            let mut model = load_checkpoint(&mut cfg, checkpoint)?;
            record(&cfg)?;
            let (_, val) = datasets(&cfg)?;
            let top1 = evaluate(&mut model, &val, &cfg.train.augment, cfg.train.batch_size)?;
            let loss = mean_loss(&mut model, &val, &cfg.train.augment, cfg.train.batch_size, Mode::Eval)?;
            println!("top1={top1} loss={loss}");
        }
        Command::Profile(common) => {
            let cfg = resolve(&common)?;
            record(&cfg)?;
            let report = profile(&cfg.model, cfg.model.input_hw)?;
            write(&cfg.out_dir.join("profile.csv"), report.to_csv())?;
            println!("{}", report.summary());
        }
        Command::Gradcheck { common, points } => {
            let cfg = resolve(&common)?;
            record(&cfg)?;
            let seed = cfg.seed();
            let mut suite = gradcheck::layer_suite(seed)?;
            suite.extend(gradcheck::attention_suite(seed)?);
            let mut failed = report_checks(&suite, gradcheck::TOLERANCE);
            let mut model = gradcheck::model_check(&cfg.model, 2, points, seed)?;
            model.name = "model end-to-end".to_string();
            failed += report_checks(std::slice::from_ref(&model), gradcheck::MODEL_TOLERANCE);
            let max_rel = suite.iter().map(|r| r.max_rel).fold(0.0, f64::max);
            println!("checks={} failed={failed} max_rel={max_rel:.3e} model_max_rel={:.3e}", suite.len() + 1, model.max_rel);
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} gradient checks exceeded tolerance")));
            }
        }
        Command::Prune { common, checkpoint, tolerance } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = tolerance {
                cfg.analysis.tolerance = t;
            }
            let mut model = load_checkpoint(&mut cfg, checkpoint)?;
            record(&cfg)?;
            let (_, val) = datasets(&cfg)?;
            let report = l1_prune(&mut model, &val, &cfg.train.augment, cfg.train.batch_size, cfg.analysis.tolerance)?;
            write(&cfg.out_dir.join("prune.csv"), report.to_csv())?;
            checkpoint::save(&model, &cfg.out_dir.join("pruned.cada"))?;
            for (name, mean) in report.mean_per_layer() {
                println!("layer={name} mean_surviving={mean}");
            }
            println!("{}", report.summary());
        }
        Command::Spectra { common, checkpoint } => {
            let mut cfg = resolve(&common)?;
            let mut model = load_checkpoint(&mut cfg, Some(checkpoint))?;
            record(&cfg)?;
            let written = export_spectra(&mut model, &cfg.out_dir.join("spectra"), cfg.analysis.grid)?;
            println!("spectra={} dir={}", written.len() / 2, cfg.out_dir.join("spectra").display());
        }
        Command::Oracle { common, cases } => {
            let cfg = resolve(&common)?;
            record(&cfg)?;
            let results = oracle_suite(cfg.seed(), cases)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.passed(ORACLE_TOLERANCE);
                failed += usize::from(!ok);
                println!("{} cases={} max_abs={:.3e} {}", r.name, r.cases, r.max_abs, if ok { "ok" } else { "FAIL" });
            }
            let total: usize = results.iter().map(|r| r.cases).sum();
            println!("cases={total} failed={failed}");
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} oracle checks exceeded {ORACLE_TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

fn report_checks(results: &[GradCheck], tol: f64) -> usize {
    let mut failed = 0;
    for r in results {
        let ok = r.passed(tol);
        failed += usize::from(!ok);
        println!("{} max_rel={:.3e} checked={} skipped={} {}", r.name, r.max_rel, r.checked, r.skipped, if ok { "ok" } else { "FAIL" });
    }
    failed
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(Error::Config(_) | Error::Parse { .. }) => 2,
        Failure::Lib(Error::Version { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("CADA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Lib(e) => e.to_string(),
                Failure::Check(m) => m.clone(),
            };
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(exit_code(&f))
        }
    }
}
