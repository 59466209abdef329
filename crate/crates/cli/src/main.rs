//! `adfq`: generate, train, calibrate, quantize, evaluate, inspect and
//! ablate the toy vision transformer from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adfq_core::audit::run_audit;
use adfq_core::calib::{load_bundle, save_bundle, Histogram};
use adfq_core::config::{RunConfig, Seeds};
use adfq_core::pipeline::{
    ablate, evaluate, gen_synthetic_dataset, inspect, load_dataset, quantize_model, save_dataset, train_toy,
    Dataset, ALPHA_SWEEP,
};
use adfq_core::storage::write_atomic;
use adfq_core::vit::{load_checkpoint, save_checkpoint, ViTModel};
use adfq_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "adfq", version, about = "Post-training quantization of a toy vision transformer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every stream (model, data, calibration, ...) derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "bits-w", global = true)]
    bits_w: Option<u32>,
    #[arg(long = "bits-a", global = true)]
    bits_a: Option<u32>,
    /// Published settings: 3000 iterations, 1024 calibration samples.
    #[arg(long = "paper-mode", global = true)]
    paper_mode: bool,
    /// Turn a component off (repeatable).
    #[arg(long, value_enum, global = true)]
    disable: Vec<Component>,
    /// Output file (directory for `inspect`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Poq,
    Slq,
    Amo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Calib,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded, untrained checkpoint.
    GenModel,
    /// Write a seeded synthetic dataset.
    GenData {
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a checkpoint on the synthetic task; prints the training report.
    TrainToy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Calibration only: statistics and initial quantizers.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Calibration followed by module-wise reconstruction.
    Quantize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Compare a bundle (or the model itself) against full precision.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-site histograms (CSV) and outlier ratios (JSON).
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Every POQ/SLQ/AMO combination plus the α sweep.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference audit of the gradients, per op class.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        graphs: usize,
    },
}

/// Failures that map onto an exit code.
#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 2),
            Failure::Gradcheck(_) => ("gradcheck", 9),
            Failure::Core(e) => match e {
                Error::Config(_) => ("config", 3),
                Error::Io { .. } => ("io", 4),
                Error::Manifest { .. } | Error::TensorShape { .. } | Error::Truncated { .. } => ("manifest", 5),
                Error::Dimension { .. } => ("dimension", 6),
                Error::Domain(_) | Error::Precondition(_) => ("domain", 7),
                Error::NonFinite(_) | Error::Divergence { .. } => ("numeric", 8),
                Error::Json(_) => ("json", 10),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) | Failure::Gradcheck(m) => m.clone(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn run_config(g: &Global) -> Outcome<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::from_json_str(&text, g.paper_mode)?
        }
        None => RunConfig::defaults(g.paper_mode),
    };
    if let Some(s) = g.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Some(k) = g.bits_w {
        cfg.bits_w = adfq_core::quant::BitWidth::new(k)?;
    }
    if let Some(k) = g.bits_a {
        cfg.bits_a = adfq_core::quant::BitWidth::new(k)?;
    }
    for c in &g.disable {
        match c {
            Component::Poq => cfg.toggles.poq = false,
            Component::Slq => cfg.toggles.slq = false,
            Component::Amo => cfg.toggles.amo = false,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    arg.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("missing --{what} (or paths.{what} in the config)")))
}

fn out_path(g: &Global, fallback: &Option<PathBuf>) -> Outcome<PathBuf> {
    required(&g.out, fallback, "out")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn model_for(cfg: &RunConfig, path: &Option<PathBuf>) -> Outcome<ViTModel> {
    let model = load_checkpoint(&required(path, &cfg.paths.checkpoint, "checkpoint")?)?;
    if model.config != cfg.model {
        return Err(Error::Config("checkpoint model config differs from the run config".into()).into());
    }
    Ok(model)
}

/// Dataset from a file, or generated from the split's seed stream.
fn dataset_for(cfg: &RunConfig, path: &Option<PathBuf>, split: Split) -> Outcome<Dataset> {
    let data = match path {
        Some(p) => load_dataset(p)?,
        None => {
            let (count, seed) = match split {
                Split::Train => (cfg.train.samples, cfg.seeds.train),
                Split::Calib => (cfg.calib_samples, cfg.seeds.calib),
                Split::Eval => (cfg.eval_samples, cfg.seeds.eval),
            };
            gen_synthetic_dataset(&cfg.model, count, seed)?
        }
    };
    data.validate(&cfg.model)?;
    Ok(data)
}

fn histogram_csv(h: &Histogram) -> Outcome<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Core(Error::Config(format!("csv: {e}")));
    w.write_record(["bin_left", "bin_right", "count"]).map_err(io)?;
    for (i, &c) in h.counts.iter().enumerate() {
        let (l, r) = h.edges(i);
        w.write_record([l.to_string(), r.to_string(), c.to_string()]).map_err(io)?;
    }
    w.into_inner().map_err(|e| Failure::Core(Error::Config(format!("csv: {e}"))))
}

#[derive(Serialize)]
struct RatioRow {
    site: String,
    alpha: Option<f64>,
    outliers: u64,
    count: u64,
    ratio: Option<f64>,
}

fn run(cli: Cli) -> Outcome<()> {
    let g = &cli.global;
    let cfg = run_config(g)?;
    match &cli.command {
        Command::GenModel => {
            let model = ViTModel::init(cfg.model, cfg.seeds.model)?;
            save_checkpoint(&model, &out_path(g, &cfg.paths.checkpoint)?)?;
        }
        Command::GenData { split, count } => {
            let mut data = dataset_for(&cfg, &None, *split)?;
            if let Some(n) = count {
                let seed = match split {
                    Split::Train => cfg.seeds.train,
                    Split::Calib => cfg.seeds.calib,
                    Split::Eval => cfg.seeds.eval,
                };
                data = gen_synthetic_dataset(&cfg.model, *n, seed)?;
            }
            save_dataset(&data, &out_path(g, &cfg.paths.dataset)?)?;
        }
        Command::TrainToy { checkpoint, data } => {
            let model = match checkpoint.as_ref().or(cfg.paths.checkpoint.as_ref()) {
                Some(p) => model_for(&cfg, &Some(p.clone()))?,
                None => ViTModel::init(cfg.model, cfg.seeds.model)?,
            };
            let data = dataset_for(&cfg, data, Split::Train)?;
            let (trained, report) = train_toy(&model, &data, &cfg.train, cfg.seeds.train)?;
            save_checkpoint(&trained, &required(&g.out, &None, "out")?)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::Calibrate { checkpoint, calib } | Command::Quantize { checkpoint, calib } => {
            let mut cfg = cfg.clone();
            if matches!(cli.command, Command::Calibrate { .. }) {
                cfg.toggles.amo = false;
            }
            let model = model_for(&cfg, checkpoint)?;
            let calib = dataset_for(&cfg, calib, Split::Calib)?;
            let (bundle, _) = quantize_model(&model, &calib.images, &cfg)?;
            save_bundle(&bundle, &out_path(g, &cfg.paths.bundle)?)?;
            for t in &bundle.traces {
                println!("{}\t{:.6e}\t{:.6e}", t.module, t.lo_before, t.lo_after);
            }
        }
        Command::Eval { checkpoint, bundle, data } => {
            let model = model_for(&cfg, checkpoint)?;
            let data = dataset_for(&cfg, data, Split::Eval)?;
            let bundle = match bundle.as_ref().or(cfg.paths.bundle.as_ref()) {
                Some(p) => Some(load_bundle(p)?),
                None => None,
            };
            let report = evaluate(&model, bundle.as_ref(), &data, &cfg)?;
            write_json(&out_path(g, &cfg.paths.report)?, &report)?;
            println!(
                "top1_agreement\t{:.6}\nlogits_mse_normalized\t{:.6e}\nmean_cosine\t{:.6}",
                report.top1_agreement, report.logits_mse_normalized, report.mean_cosine
            );
        }
        Command::Inspect { checkpoint, data } => {
            let model = model_for(&cfg, checkpoint)?;
            let data = dataset_for(&cfg, data, Split::Calib)?;
            let stats = inspect(&model, &data, &cfg)?;
            let dir = required(&g.out, &None, "out")?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut ratios = Vec::new();
            for s in &stats.sites {
                let label = s.site.label();
                if let Some(h) = &s.histogram {
                    write_atomic(&dir.join(format!("{label}.csv")), &histogram_csv(h)?)?;
                }
                ratios.push(RatioRow {
                    site: label,
                    alpha: s.outlier.and_then(|o| o.alpha.is_finite().then_some(o.alpha)),
                    outliers: s.outliers,
                    count: s.count,
                    ratio: s.outlier_ratio(),
                });
            }
            write_json(&dir.join("outlier_ratios.json"), &ratios)?;
            for r in &ratios {
                if let Some(x) = r.ratio {
                    println!("{}\t{x:.6e}", r.site);
                }
            }
        }
        Command::Ablate { checkpoint, calib, data } => {
            let model = model_for(&cfg, checkpoint)?;
            let calib = dataset_for(&cfg, calib, Split::Calib)?;
            let data = dataset_for(&cfg, data, Split::Eval)?;
            let table = ablate(&model, &calib.images, &data, &cfg, &ALPHA_SWEEP)?;
            write_json(&out_path(g, &cfg.paths.report)?, &table)?;
            for r in &table.rows {
                println!(
                    "poq={} slq={} amo={}\t{:.6}\t{:.6e}",
                    r.poq as u8, r.slq as u8, r.amo as u8, r.report.top1_agreement, r.report.logits_mse_normalized
                );
            }
            for a in &table.alpha_sweep {
                println!("alpha_{}={}\t{:.6e}\t{:.6}", a.layer, a.alpha, a.outlier_ratio, a.top1_agreement);
            }
        }
        Command::Gradcheck { graphs } => {
            let report = run_audit(*graphs, cfg.seeds.recon)?;
            for c in &report.classes {
                println!(
                    "{}\t{:.3e}\t{:.0e}\t{}",
                    c.class.name(),
                    c.max_rel_err,
                    c.tolerance,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(p) = &g.out {
                write_json(p, &report)?;
            }
            if !report.passed() {
                return Err(Failure::Gradcheck("gradient audit exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ADFQ_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code) = f.kind_and_code();
            let msg = f.message().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error kind={kind} code={code} msg=\"{msg}\"");
            ExitCode::from(code)
        }
    }
}
