//! `dcvit`: benchmark, train, gradient-check and self-test the DC-ViT engine.
//!
//! Exit codes: 0 success, 1 check or gradcheck failure, 2 configuration
//! error, 3 I/O or file-format error.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcvit::check::run_checks;
use dcvit::complexity::{loglog_slope, write_bench_csv, BenchMode, BenchRecord};
use dcvit::datagen::{gen_dataset, split, Split, SynthTask};
use dcvit::encoder::container::{load_model, save_model};
use dcvit::encoder::{DcVitModel, ModelConfig};
use dcvit::numerics::Fault;
use dcvit::training::{accuracy, gradcheck, train, GradcheckOptions};

use config::{DataConfig, RunConfig};

/// Gradcheck tolerance on the relative error.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug)]
pub enum Failure {
    Check(String),
    Config(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl From<dcvit::Error> for Failure {
    fn from(e: dcvit::Error) -> Self {
        use dcvit::Error as E;
        match e {
            E::Io(_) | E::Format(_) | E::Json(_) | E::Csv(_) => Failure::Io(e.to_string()),
            E::NonFinite { .. } => Failure::Check(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "dcvit", version, about = "Decoupled multi-channel vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    GeluBackward,
}

#[derive(Subcommand)]
enum Command {
    /// Time DSA and MSA forward passes over a channel sweep and write a CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `bench.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a synthetic task; writes the model and a JSON-lines history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validation accuracy of a saved model on the configured task.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of a tiny model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Run the built-in invariant suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench { config, out, seed } => cmd_bench(&config, &out, seed),
        Command::Train { config, out, history, seed } => cmd_train(&config, &out, &history, seed),
        Command::Eval { config, model } => cmd_eval(&config, &model),
        Command::Gradcheck { config, seed, inject_fault } => cmd_gradcheck(&config, seed, inject_fault),
        Command::Check { seed } => cmd_check(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(m) => eprintln!("check failed: {m}"),
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Io(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn slope(records: &[BenchRecord], mode: BenchMode, y: impl Fn(&BenchRecord) -> f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| (r.c as f64, y(r)))
        .collect();
    loglog_slope(&pts).ok()
}

fn cmd_bench(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let mut sweep = RunConfig::require(&cfg.bench, "bench")?.clone();
    if let Some(s) = seed {
        sweep.seed = s;
    }
    for &c in &sweep.c_list {
        sweep.model_config(c, BenchMode::Dsa)?;
    }
    let file = File::create(out).map_err(io_err(out))?;
    let records = sweep.run()?;
    for r in &records {
        println!(
            "{:<3} C={:<4} flops={:<14} time={:.6}s",
            format!("{:?}", r.mode).to_lowercase(),
            r.c,
            r.analytic_flops,
            r.wall_time_s
        );
    }
    write_bench_csv(BufWriter::new(file), &records)?;
    for mode in [BenchMode::Dsa, BenchMode::Msa] {
        let name = format!("{mode:?}").to_lowercase();
        match (slope(&records, mode, |r| r.analytic_flops as f64), slope(&records, mode, |r| r.wall_time_s)) {
            (Some(f), Some(t)) => println!("{name} log-log slope: flops {f:.4}, time {t:.4}"),
            _ => println!("{name} log-log slope: needs at least two distinct channel counts"),
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Task and split used by `train` and `eval`, checked against the model.
fn dataset(cfg: &RunConfig, model: &ModelConfig) -> Result<(SynthTask, Split), Failure> {
    let task = RunConfig::require(&cfg.task, "task")?.clone();
    let data = cfg.data.clone().unwrap_or_default();
    task.validate()?;
    if task.channels > model.c_max || task.image_size != model.image_size || task.num_classes != model.num_classes {
        return Err(Failure::Config(format!(
            "task ({} channels, {}px, {} classes) does not fit the model (c_max {}, {}px, {} classes)",
            task.channels, task.image_size, task.num_classes, model.c_max, model.image_size, model.num_classes
        )));
    }
    let DataConfig { n_samples, split: fractions } = data;
    let parts = split(&gen_dataset(&task, n_samples)?, fractions, task.seed)?;
    Ok((task, parts))
}

fn cmd_train(config: &Path, out: &Path, history_path: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let model_cfg = RunConfig::require(&cfg.model, "model")?.clone();
    let mut train_cfg = RunConfig::require(&cfg.train, "train")?.clone();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    let (_, parts) = dataset(&cfg, &model_cfg)?;

    let mut model = DcVitModel::new(model_cfg, train_cfg.seed)?;
    println!("{} parameters, {} training samples", model.num_params(), parts.train.batch_size());
    let mut history = train(&mut model, &parts.train, parts.val.as_ref(), &train_cfg)?;
    for r in &history.records {
        let acc = r.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("step {:>6}  loss {:.4}  val_acc {acc}", r.step, r.train_loss);
    }

    // Stored weights are f32; report the accuracy of exactly those.
    model.snap_to_f32();
    let final_acc = parts.val.as_ref().map(|v| accuracy(&model, v)).transpose()?;
    if let Some(s) = history.summary.as_mut() {
        s.final_val_accuracy = final_acc;
    }
    save_model(out, &model)?;
    let file = File::create(history_path).map_err(io_err(history_path))?;
    let mut w = BufWriter::new(file);
    history.write_jsonl(&mut w)?;
    w.flush().map_err(io_err(history_path))?;
    if let Some(a) = final_acc {
        println!("final val accuracy {a}");
    }
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

fn cmd_eval(config: &Path, model_path: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(model_path)?;
    let (_, parts) = dataset(&cfg, &model.config)?;
    let val = parts
        .val
        .ok_or_else(|| Failure::Config("data.split leaves no validation set".into()))?;
    println!("val accuracy {}", accuracy(&model, &val)?);
    Ok(())
}

fn cmd_gradcheck(config: &Path, seed: Option<u64>, fault: Option<FaultArg>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let model = RunConfig::require(&cfg.model, "model")?;
    model.validate()?;
    let seed = seed.or(cfg.train.as_ref().map(|t| t.seed)).unwrap_or(0);
    let opts = GradcheckOptions {
        fault: fault.map(|FaultArg::GeluBackward| Fault::GeluBackward),
        ..GradcheckOptions::default()
    };
    println!("precision: f64 (always)");
    let report = gradcheck(model, seed, &opts)?;
    println!("{:<14} {:>9} {:>14}", "group", "elements", "max_rel_error");
    for g in &report.groups {
        let err = g.max_rel_error.map_or("-".to_string(), |e| format!("{e:.3e}"));
        println!("{:<14} {:>9} {:>14}", g.group, g.elements, err);
    }
    let worst = report.max_rel_error();
    if report.passed(GRADCHECK_TOL) {
        println!("PASS max relative error {worst:.3e} < {GRADCHECK_TOL:e}");
        Ok(())
    } else {
        println!("FAIL max relative error {worst:.3e} >= {GRADCHECK_TOL:e}");
        Err(Failure::Check(format!("gradient mismatch {worst:.3e}")))
    }
}

fn cmd_check(seed: u64) -> Result<(), Failure> {
    let results = run_checks(seed);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed (seed {seed})", results.len() - failed, results.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Check(format!("{failed} invariant(s) failed")))
    }
}
