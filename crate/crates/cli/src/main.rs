use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mgt::check::run_checks;
use mgt::checkpoint::{load_checkpoint, save_checkpoint, Stage};
use mgt::config::{Precision, RunConfig};
use mgt::dataset::{load_jsonl, Example};
use mgt::moe::report_contributions;
use mgt::pipeline::{build_model, finetune, load_examples, load_trained, pretrain};
use mgt::tensor::Tensor;
use mgt::train::{evaluate, predict};
use mgt::{Error, Result};

/// Multi-view crystal graph transformer.
#[derive(Parser, Debug)]
#[command(name = "mgt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// JSONL dataset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output file or checkpoint directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long, global = true)]
    from: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Random structures drawn by `check`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Task label recorded by `inspect-router`.
    #[arg(long, global = true)]
    task: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Parse a dataset, build every graph, and optionally cache them as JSONL.
    Ingest,
    /// Self-supervised pretraining; writes a checkpoint and a JSONL loss log.
    Pretrain,
    /// Supervised training, optionally from a pretraining checkpoint.
    Finetune,
    /// Predictions of a fine-tuned checkpoint as JSONL.
    Predict,
    /// Metrics of a fine-tuned checkpoint on a labelled dataset.
    Eval,
    /// Symmetry and gradient self-check; exits nonzero on any violation.
    Check,
    /// Per-sample expert contribution scores.
    InspectRouter,
}

impl Cli {
    /// Config file (or defaults) with flag overrides, validated.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply_flags(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_flags(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(t) = &self.task {
            cfg.task = t.clone();
        }
        for (flag, slot) in [
            (&self.data, &mut cfg.io.data),
            (&self.out, &mut cfg.io.out),
            (&self.from, &mut cfg.io.from),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        Error::Config(vec![format!(
            "--{flag} is required (or set io.{flag} in the config)"
        )])
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Dataset(format!("{}: {e}", path.display()))
}

/// `--out` file, or stdout.
fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::Dataset(e.to_string()))
}

fn log_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
}

/// Configuration of a checkpoint with this invocation's file locations and
/// flags applied.
fn trained_config(cli: &Cli, from: &Path) -> Result<mgt::pipeline::Trained> {
    let mut t = load_trained(from)?;
    t.config.io = match &cli.config {
        Some(_) => cli.config()?.io,
        None => Default::default(),
    };
    cli.apply_flags(&mut t.config);
    t.config.validate()?;
    Ok(t)
}

/// Checkpoints record the model and training settings, not file locations.
fn portable(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        io: Default::default(),
        ..cfg.clone()
    }
}

fn run(cli: &Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest => {
            let cfg = cli.config()?;
            let data = required(&cfg.io.data, "data")?;
            let records = load_jsonl(data)?;
            let labelled = records.iter().filter(|r| r.target.is_some()).count();
            let examples = mgt::dataset::build_examples(records, &cfg.graph.params())?;
            if let Some(out) = &cfg.io.out {
                let mut w = BufWriter::new(File::create(out).map_err(io_err(out))?);
                for e in &examples {
                    let line = json!({"id": e.id, "target": e.target, "graph": e.graph.to_json()});
                    writeln!(w, "{line}").map_err(io_err(out))?;
                }
                w.flush().map_err(io_err(out))?;
            }
            let atoms: usize = examples.iter().map(|e| e.graph.num_nodes()).sum();
            let edges: usize = examples.iter().map(|e| e.graph.num_edges()).sum();
            emit(
                &mut io::stdout().lock(),
                &json!({"structures": examples.len(), "labelled": labelled, "atoms": atoms, "edges": edges}),
            )?;
        }
        Command::Pretrain => {
            let cfg = cli.config()?;
            let data = required(&cfg.io.data, "data")?;
            let out = required(&cfg.io.out, "out")?;
            let examples = load_examples(data, &cfg)?;
            let mut log = log_file(out, "pretrain_log.jsonl")?;
            let p = pretrain(&cfg, &examples, &mut log)?;
            log.flush().map_err(io_err(out))?;
            save_checkpoint(
                out,
                &p.store,
                &portable(&cfg),
                Stage::Pretrain,
                None,
                p.steps,
            )?;
            let last = p.log.last().map(|e| e.parts);
            emit(
                &mut io::stdout().lock(),
                &json!({"steps": p.steps, "final": last}),
            )?;
        }
        Command::Finetune => {
            let from = cli
                .from
                .clone()
                .or_else(|| cli.config().ok().and_then(|c| c.io.from));
            let ck = from.as_deref().map(load_checkpoint).transpose()?;
            // without --config, a starting checkpoint supplies the architecture
            let cfg = match (&cli.config, &ck) {
                (None, Some(ck)) => {
                    let mut c = ck.manifest.config.clone();
                    c.io = Default::default();
                    cli.apply_flags(&mut c);
                    c.validate()?;
                    c
                }
                _ => cli.config()?,
            };
            let data = required(&cfg.io.data, "data")?;
            let examples = load_examples(data, &cfg)?;
            let mut log: Box<dyn Write> = match &cfg.io.out {
                Some(dir) => Box::new(log_file(dir, "finetune_log.jsonl")?),
                None => Box::new(io::sink()),
            };
            let r = finetune(&cfg, &examples, ck.as_ref(), &mut log)?;
            log.flush().map_err(|e| Error::Dataset(e.to_string()))?;
            if let Some(dir) = &cfg.io.out {
                save_checkpoint(
                    dir,
                    &r.store,
                    &portable(&cfg),
                    Stage::Finetune,
                    Some(r.normalizer),
                    r.steps,
                )?;
            }
            let headline = r.metrics.test.as_ref().unwrap_or(&r.metrics.train);
            emit(
                &mut io::stdout().lock(),
                &json!({
                    "MAE": headline.mae,
                    "RMSE": headline.rmse,
                    "R2": headline.r2,
                    "splits": r.metrics,
                    "epochs_run": r.report.epochs_run,
                    "best_epoch": r.report.best_epoch,
                    "transferred_tensors": r.transferred.len(),
                }),
            )?;
        }
        Command::Predict | Command::Eval | Command::InspectRouter => {
            let from = cli
                .from
                .clone()
                .or_else(|| cli.config().ok().and_then(|c| c.io.from));
            let t = trained_config(cli, required(&from, "from")?)?;
            let data = required(&t.config.io.data, "data")?;
            let examples = load_examples(data, &t.config)?;
            let refs: Vec<&Example> = examples.iter().collect();
            let bs = t.config.finetune.batch_size;
            let mut out = sink(&t.config.io.out)?;
            match cli.command {
                Command::Predict => {
                    let (pred, _) = predict(&t.model, &t.store, &refs, &t.normalizer, bs, None)?;
                    for (e, y) in examples.iter().zip(pred) {
                        writeln!(out, "{}", json!({"id": e.id, "prediction": y}))
                            .map_err(|e| Error::Dataset(e.to_string()))?;
                    }
                }
                Command::Eval => emit(
                    &mut out,
                    &evaluate(&t.model, &t.store, &refs, &t.normalizer, bs)?,
                )?,
                _ => {
                    let (_, scores) = predict(&t.model, &t.store, &refs, &t.normalizer, bs, None)?;
                    let scores = scores.ok_or_else(|| {
                        Error::Config(vec![
                            "inspect-router needs a model with the mixture-of-experts head".into(),
                        ])
                    })?;
                    let flat = Tensor::matrix(scores.len(), 2, scores.concat());
                    emit(&mut out, &report_contributions(&t.config.task, &flat))?;
                }
            }
            out.flush().map_err(|e| Error::Dataset(e.to_string()))?;
        }
        Command::Check => {
            let cfg = cli.config()?;
            let (model, store, cfg) = match &cfg.io.from {
                Some(dir) => {
                    let t = trained_config(cli, dir)?;
                    (t.model, t.store, t.config)
                }
                None => {
                    let (m, s) = build_model(&cfg, true)?;
                    (m, s, cfg)
                }
            };
            let report = run_checks(&cfg, cfg.trials, &model, &store)?;
            emit(&mut sink(&cfg.io.out)?, &report)?;
            if !report.passed() {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
