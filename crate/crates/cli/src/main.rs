//! `deepnorm`: gains, verification suites, training sweeps and log-depth fits.
//!
//! Exit status: 0 on success, 1 when a verification check fails (or a run
//! diverges under `--strict`), 2 on usage or configuration errors. Successful
//! invocations print exactly one JSON document on stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Parser, Subcommand};
use deepnorm_core::experiment::{run_suite, run_sweep, to_json_pretty, ExperimentConfig, SchemePreset, Suite, SweepIndex, VerifyConfig, SCHEMA_VERSION};
use deepnorm_core::{compute_gains, fit_log_scaling, ArchKind, ArchShape, GainForm};
use serde::Deserialize;
use serde_json::{json, Value};

const WORKERS_ENV: &str = "DEEPNORM_WORKERS";

#[derive(Parser)]
#[command(name = "deepnorm", version, about = "DeepNorm stability lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print α and β for an architecture.
    #[command(group(ArgGroup::new("form").args(["exact", "rounded"])))]
    Gains {
        #[arg(long)]
        arch: ArchKind,
        /// Encoder layers.
        #[arg(long)]
        n: Option<usize>,
        /// Decoder layers.
        #[arg(long)]
        m: Option<usize>,
        /// Closed-form gains (default).
        #[arg(long)]
        exact: bool,
        /// 0.81/0.87 encoder constants for encoder-decoder models.
        #[arg(long)]
        rounded: bool,
    },
    /// Run a verification suite; exits 1 if any check fails.
    Verify {
        #[arg(long)]
        suite: Suite,
        /// JSON settings; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scale α in the forward passes only (negative control).
        #[arg(long)]
        alpha_scale: Option<f64>,
    },
    /// Train a sweep of scheme × depth × seed and write traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exit 1 if any run diverged.
        #[arg(long)]
        strict: bool,
        /// Worker threads (default: $DEEPNORM_WORKERS, else available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit `score = A·ln(depth) + B`.
    #[command(group(ArgGroup::new("source").required(true).args(["points", "index"])))]
    Fit {
        /// JSON array of `{"depth": d, "score": s}` objects.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Sweep `index.json`; seeds are averaged per depth.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, requires = "index")]
        scheme: Option<SchemePreset>,
        /// Summary field used as the score.
        #[arg(long, default_value = "final_loss", requires = "index")]
        metric: String,
    },
}

/// An error carrying its exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 2, err: e.into() }
    }
}

/// Success output plus whether the command's checks passed.
type Outcome = Result<(Value, bool), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gains { arch, n, m, rounded, .. } => gains(arch, n, m, rounded),
        Command::Verify { suite, config, alpha_scale } => verify(suite, config.as_deref(), alpha_scale),
        Command::Train { config, out, strict, workers } => train(&config, &out, strict, workers),
        Command::Fit { points, index, scheme, metric } => fit(points.as_deref(), index.as_deref(), scheme, &metric),
    };
    match result {
        Ok((doc, ok)) => match to_json_pretty(&doc) {
            Ok(s) => {
                print!("{s}");
                if ok { ExitCode::SUCCESS } else { ExitCode::from(1) }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn gains(arch: ArchKind, n: Option<usize>, m: Option<usize>, rounded: bool) -> Outcome {
    let shape = match arch {
        ArchKind::EncoderOnly => ArchShape::encoder_only(n.ok_or_else(|| anyhow!("--arch encoder_only needs --n"))?),
        ArchKind::DecoderOnly => ArchShape::decoder_only(m.ok_or_else(|| anyhow!("--arch decoder_only needs --m"))?),
        ArchKind::EncoderDecoder => match (n, m) {
            (Some(n), Some(m)) => ArchShape::encoder_decoder(n, m),
            _ => return Err(anyhow!("--arch encoder_decoder needs both --n and --m").into()),
        },
    };
    let form = if rounded { GainForm::Rounded } else { GainForm::Exact };
    let g = compute_gains(&shape, form)?;
    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "arch": arch,
        "n": shape.encoder_layers,
        "m": shape.decoder_layers,
        "form": form,
        "gains": g,
    });
    let single = match arch {
        ArchKind::EncoderOnly => Some((g.alpha_enc, g.beta_enc)),
        ArchKind::DecoderOnly => Some((g.alpha_dec, g.beta_dec)),
        ArchKind::EncoderDecoder => None,
    };
    if let Some((a, b)) = single {
        doc["alpha"] = json!(a);
        doc["beta"] = json!(b);
    }
    Ok((doc, true))
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn verify(suite: Suite, config: Option<&Path>, alpha_scale: Option<f64>) -> Outcome {
    let mut cfg = match config {
        Some(p) => VerifyConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => VerifyConfig::default(),
    };
    if let Some(s) = alpha_scale {
        cfg.alpha_scale = s;
    }
    let report = run_suite(suite, &cfg)?;
    let passed = report.passed;
    Ok((serde_json::to_value(report)?, passed))
}

fn worker_count(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(w) = flag {
        return Ok(w.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.parse::<usize>().map(|w| w.max(1)).with_context(|| format!("{WORKERS_ENV}={v:?}")),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn train(config: &Path, out: &Path, strict: bool, workers: Option<usize>) -> Outcome {
    let cfg = ExperimentConfig::from_json(&read(config)?).with_context(|| format!("parsing {}", config.display()))?;
    let workers = worker_count(workers)?;
    let index = run_sweep(&cfg, out, workers).with_context(|| format!("sweep into {}", out.display()))?;
    let diverged = index.runs.iter().filter(|r| r.summary.diverged).count();
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "out_dir": out.display().to_string(),
        "index": "index.json",
        "runs": index.runs.len(),
        "diverged": diverged,
    });
    Ok((doc, !(strict && index.any_diverged())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Point {
    depth: f64,
    score: f64,
}

fn fit(points: Option<&Path>, index: Option<&Path>, scheme: Option<SchemePreset>, metric: &str) -> Outcome {
    let pts: Vec<(f64, f64)> = match (points, index) {
        (Some(p), _) => {
            let raw: Vec<Point> = serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
            raw.into_iter().map(|p| (p.depth, p.score)).collect()
        }
        (None, Some(p)) => index_points(&read(p)?, scheme, metric)?,
        (None, None) => return Err(anyhow!("one of --points or --index is required").into()),
    };
    let f = fit_log_scaling(&pts)?;
    let doc = json!({ "schema_version": SCHEMA_VERSION, "points": pts.len(), "a": f.a, "b": f.b, "residual": f.residual });
    Ok((doc, true))
}

fn index_points(text: &str, scheme: Option<SchemePreset>, metric: &str) -> anyhow::Result<Vec<(f64, f64)>> {
    let index: SweepIndex = serde_json::from_str(text)?;
    let mut by_depth: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in index.runs.iter().filter(|r| scheme.is_none_or(|s| s == r.scheme)) {
        let summary = serde_json::to_value(&r.summary)?;
        let v = summary
            .get(metric)
            .ok_or_else(|| anyhow!("unknown metric {metric:?}"))?
            .as_f64()
            .ok_or_else(|| anyhow!("metric {metric:?} is not a number for {}", r.csv))?;
        by_depth.entry(r.depth).or_default().push(v);
    }
    Ok(by_depth.into_iter().map(|(d, vs)| (d as f64, vs.iter().sum::<f64>() / vs.len() as f64)).collect())
}
