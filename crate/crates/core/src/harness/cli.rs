//! `emil` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, data), 2 any
//! other failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::evaluate;
use super::{cross_validate, load_samples, run, split_samples};
use crate::error::{Error, Result};
use crate::head::build_heatmaps;
use crate::synth;

#[derive(Parser, Debug)]
#[command(name = "emil", version, about = "Embedding-space MIL: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Emit JSON lines on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint (or a CV summary with --folds).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write test-split metrics JSON here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Stratified k-fold cross-validation instead of a single split.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Evaluate a checkpoint and write metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to evaluate; defaults to the checkpoint's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Write `<out>.prob.pgm`, `<out>.attn.pgm` and `<out>.txt` for one sample.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: usize,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model on a small random input.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Quick oracle and invariant checks.
    Selftest,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Format { .. } | Error::Shape(_) => 1,
        _ => 2,
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn event(&self, kind: &str, payload: serde_json::Value, human: impl FnOnce() -> String) {
        let mut stdout = std::io::stdout().lock();
        if self.json {
            let mut v = json!({ "event": kind });
            if let (Some(obj), serde_json::Value::Object(p)) = (v.as_object_mut(), payload) {
                obj.extend(p);
            }
            let _ = writeln!(stdout, "{v}");
        } else {
            let _ = writeln!(stdout, "{}", human());
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data_path = Some(d.clone());
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn checkpoint_with_data(path: &Path, data: &Option<PathBuf>) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let mut cfg = ck.config.clone();
    if let Some(d) = data {
        cfg.data_path = Some(d.clone());
    }
    Ok((ck, cfg))
}

fn execute(cli: Cli) -> Result<()> {
    let out = Out { json: cli.json };
    match cli.command {
        Command::Generate { common, out: path } => {
            let mut cfg = load_config(&common)?;
            cfg.data_path = None;
            let samples = load_samples(&cfg)?;
            synth::write_dataset(&samples, &path)?;
            let n_pos = samples.iter().filter(|s| s.label == 1).count();
            out.event(
                "generated",
                json!({ "path": path, "samples": samples.len(), "positives": n_pos }),
                || format!("wrote {} samples ({} positive) to {}", samples.len(), n_pos, path.display()),
            );
        }
        Command::Train {
            common,
            out: path,
            metrics,
            folds,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = folds {
                cfg.split.folds = k;
            }
            let samples = load_samples(&cfg)?;
            if cfg.split.folds >= 2 {
                let summary = cross_validate(&cfg, &samples, cfg.split.folds, &mut |fold, e| {
                    out.event("epoch", json!({ "fold": fold, "log": e }), || {
                        format!("fold {fold} epoch {} loss {:.4} val bal.acc {:.4}", e.epoch, e.loss, e.val_balanced_accuracy)
                    })
                })?;
                write_json(&path, &summary)?;
                out.event("cv", json!({ "path": path, "summary": summary }), || {
                    format!("{}-fold balanced accuracy {:.4}, wrote {}", cfg.split.folds, summary.balanced_accuracy, path.display())
                });
                return Ok(());
            }
            let split = split_samples(&cfg, &samples)?;
            let result = run(&cfg, &samples, &split, &mut |e| {
                out.event("epoch", json!({ "log": e }), || {
                    format!(
                        "epoch {:>3} loss {:.4} image {:.4} patch {} val bal.acc {:.4}{}",
                        e.epoch,
                        e.loss,
                        e.l_image,
                        e.l_patch.map_or("-".into(), |v| format!("{v:.4}")),
                        e.val_balanced_accuracy,
                        if e.improved { " *" } else { "" }
                    )
                })
            })?;
            let ck = Checkpoint {
                config: cfg.clone(),
                best_epoch: result.outcome.best_epoch,
                best_val_balanced_accuracy: result.outcome.best_val_balanced_accuracy,
                model: result.outcome.model,
            };
            ck.save(&path)?;
            if let Some(m) = &metrics {
                write_json(m, &result.test)?;
            }
            out.event(
                "trained",
                json!({ "checkpoint": path, "best_epoch": ck.best_epoch, "test": result.test }),
                || {
                    format!(
                        "best epoch {} (val bal.acc {:.4}); test bal.acc {:.4}; wrote {}",
                        ck.best_epoch,
                        ck.best_val_balanced_accuracy,
                        result.test.image.balanced_accuracy,
                        path.display()
                    )
                },
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out: path,
            records,
        } => {
            let (ck, cfg) = checkpoint_with_data(&checkpoint, &data)?;
            let samples = load_samples(&cfg)?;
            let parts = split_samples(&cfg, &samples)?;
            let indices = match split {
                SplitName::Train => parts.train,
                SplitName::Val => parts.val,
                SplitName::Test => parts.test,
                SplitName::All => (0..samples.len()).collect(),
            };
            let (report, recs) = evaluate(&ck.model, &samples, &indices)?;
            if let Some(p) = &path {
                write_json(p, &report)?;
            }
            if let Some(p) = &records {
                let mut text = String::new();
                for r in &recs {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                fs::write(p, text)?;
            }
            out.event("metrics", json!({ "metrics": report }), || {
                serde_json::to_string_pretty(&report).unwrap_or_default()
            });
        }
        Command::Heatmap {
            checkpoint,
            data,
            index,
            out: prefix,
        } => {
            let (ck, cfg) = checkpoint_with_data(&checkpoint, &data)?;
            let samples = load_samples(&cfg)?;
            let sample = samples.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!("index {index} out of range for {} samples", samples.len()))
            })?;
            let input = (sample.mask.height, sample.mask.width);
            let (feature_dims, _) = ck.model.config.layout(input)?;
            let pred = ck.model.predict(&sample.image)?;
            let head = &ck.model.config.head;
            let (prob, attn) = build_heatmaps(&pred, head.kernel, head.stride, feature_dims, input)?;
            let with_ext = |ext: &str| {
                let mut s = prefix.clone().into_os_string();
                s.push(ext);
                PathBuf::from(s)
            };
            prob.write_pgm(with_ext(".prob.pgm"))?;
            attn.write_pgm(with_ext(".attn.pgm"))?;
            let sidecar = format!(
                "y_hat {:.9}\nlabel {}\nk_min {}\n# patch probabilities\n{}# attention\n{}",
                pred.y_hat,
                sample.label,
                pred.k_min,
                prob.grid_text(),
                attn.grid_text()
            );
            fs::write(with_ext(".txt"), sidecar)?;
            out.event("heatmap", json!({ "prefix": prefix, "y_hat": pred.y_hat }), || {
                format!("wrote heatmaps for sample {index} (y_hat {:.4}) to {}.*", pred.y_hat, prefix.display())
            });
        }
        Command::Gradcheck { seed, tolerance } => {
            let report = super::selftest::model_gradcheck(seed)?;
            let pass = report.passes(tolerance);
            out.event(
                "gradcheck",
                json!({ "max_rel_error": report.max_rel_error, "checked": report.checked, "pass": pass }),
                || format!("max relative error {:.3e} over {} entries: {}", report.max_rel_error, report.checked, if pass { "PASS" } else { "FAIL" }),
            );
            if !pass {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: {:.3e} > {tolerance:.1e}",
                    report.max_rel_error
                )));
            }
        }
        Command::Selftest => {
            let results = super::selftest::run_all();
            let mut failed = 0;
            for (name, r) in &results {
                let ok = r.is_ok();
                failed += usize::from(!ok);
                let detail = r.as_ref().err().map(|e| e.to_string());
                out.event("check", json!({ "name": name, "pass": ok, "detail": detail }), || match &detail {
                    None => format!("PASS {name}"),
                    Some(d) => format!("FAIL {name}: {d}"),
                });
            }
            if failed > 0 {
                return Err(Error::NonFinite(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
