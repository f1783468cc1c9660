//! Sweeps, verification suites and the log-depth fit behind the CLI.
//!
//! Depths count layers: depth `L` means `L` encoder layers (`2L` sub-layers)
//! and/or `L` decoder layers (`3L` sub-layers with cross-attention, `2L`
//! without).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config_err, Error, Result};
use crate::gains::{ArchKind, ArchShape, GainForm};
use crate::model::{InitScheme, ModelConfig, NormKind};
use crate::rng::rng_for;
use crate::theory::{
    identity_checks, lemma1_check, lemma1_instance, non_increasing, ratio_curve, rounded_gap, theorem1_bound_per_unit,
    theorem2_bound, verify_theorem1, verify_theorem2, BoundReport, DirectionMode, ScalarModel, UpdateMeasure,
    VerifyOptions,
};
use crate::train::{train_run, RunSummary, Schedule, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Warmup used by the `post_ln_warmup` preset.
pub const PRESET_WARMUP_STEPS: usize = 400;
pub const PRESET_WARMUP_INIT_LR: f64 = 1e-7;

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return config_err(format!("schema_version {v} unsupported (expected {SCHEMA_VERSION})"));
    }
    Ok(())
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// Normalization scheme of a sweep arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemePreset {
    PostLn,
    PreLn,
    NoLn,
    Deepnorm,
    /// Post-LN with residual-branch weights of layer l scaled by `1/(L − l + 1)`.
    PostLnInit,
    /// Post-LN with an inverse-sqrt warmup over [`PRESET_WARMUP_STEPS`].
    PostLnWarmup,
}

impl SchemePreset {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemePreset::PostLn => "post_ln",
            SchemePreset::PreLn => "pre_ln",
            SchemePreset::NoLn => "no_ln",
            SchemePreset::Deepnorm => "deepnorm",
            SchemePreset::PostLnInit => "post_ln_init",
            SchemePreset::PostLnWarmup => "post_ln_warmup",
        }
    }

    pub fn norm(self) -> NormKind {
        match self {
            SchemePreset::PreLn => NormKind::PreLn,
            SchemePreset::NoLn => NormKind::NoLn,
            SchemePreset::Deepnorm => NormKind::DeepNorm,
            _ => NormKind::PostLn,
        }
    }

    pub fn init(self) -> InitScheme {
        match self {
            SchemePreset::Deepnorm => InitScheme::DeepnormInit,
            SchemePreset::PostLnInit => InitScheme::PostlnInit,
            _ => InitScheme::XavierGain1,
        }
    }

    /// The training schedule for this arm; only the warmup preset overrides it.
    pub fn schedule(self, base: Schedule) -> Schedule {
        match self {
            SchemePreset::PostLnWarmup => {
                Schedule::InverseSqrt { warmup_steps: PRESET_WARMUP_STEPS, warmup_init_lr: PRESET_WARMUP_INIT_LR }
            }
            _ => base,
        }
    }
}

impl std::str::FromStr for SchemePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// Model geometry shared by every sweep arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch_kind: ArchKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub ln_affine: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub gain_form: GainForm,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelSection {
    pub fn model_config(&self, scheme: SchemePreset, depth: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            arch: ArchShape::uniform(self.arch_kind, depth),
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            norm: scheme.norm(),
            init: scheme.init(),
            gain_form: self.gain_form,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            ln_eps: self.ln_eps,
            ln_affine: self.ln_affine,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub schemes: Vec<SchemePreset>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: ModelSection,
    /// `seed` is ignored; every run takes its seed from the sweep.
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scheme: SchemePreset,
    pub depth: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn stem(&self) -> String {
        format!("{}_d{}_s{}", self.scheme.as_str(), self.depth, self.seed)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        let s = &self.sweep;
        if s.schemes.is_empty() || s.depths.is_empty() || s.seeds.is_empty() {
            return config_err("sweep needs at least one scheme, depth and seed");
        }
        for r in self.runs() {
            r.model.validate()?;
            r.train.validate()?;
        }
        Ok(())
    }

    /// Cells in scheme-major, then depth, then seed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &scheme in &self.sweep.schemes {
            for &depth in &self.sweep.depths {
                for &seed in &self.sweep.seeds {
                    let train = TrainConfig { seed, schedule: scheme.schedule(self.train.schedule), ..self.train.clone() };
                    out.push(RunSpec { scheme, depth, seed, model: self.model.model_config(scheme, depth, seed), train });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scheme: SchemePreset,
    pub depth: usize,
    pub seed: u64,
    pub csv: String,
    pub summary_file: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub schema_version: u32,
    pub runs: Vec<IndexEntry>,
}

impl SweepIndex {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.summary.diverged)
    }
}

/// Runs every cell on a pool of `workers` threads. Each worker writes its own
/// `<stem>.csv` and `<stem>.json`; `index.json` is written once at the end.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<SweepIndex> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let probe = out_dir.join(".write-check");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let runs = cfg.runs();
    let entries = pool.install(|| {
        runs.par_iter()
            .map(|r| -> Result<IndexEntry> {
                let trace = train_run(&r.model, &r.train)?;
                let stem = r.stem();
                let (csv, summary_file) = (format!("{stem}.csv"), format!("{stem}.json"));
                fs::write(out_dir.join(&csv), trace.to_csv())?;
                let summary = trace.summary();
                fs::write(out_dir.join(&summary_file), to_json_pretty(&summary)?)?;
                Ok(IndexEntry { scheme: r.scheme, depth: r.depth, seed: r.seed, csv, summary_file, summary })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let index = SweepIndex { schema_version: SCHEMA_VERSION, runs: entries };
    fs::write(out_dir.join("index.json"), to_json_pretty(&index)?)?;
    Ok(index)
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma1,
    Thm1,
    Thm2,
    Identities,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Thm1 => "thm1",
            Suite::Thm2 => "thm2",
            Suite::Identities => "identities",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarFamily {
    /// `v = w = α = 1`
    Vanilla,
    /// Exact DeepNorm gains.
    Deepnorm,
}

impl ScalarFamily {
    pub fn build(self, arch: ArchShape) -> Result<ScalarModel> {
        match self {
            ScalarFamily::Vanilla => ScalarModel::vanilla(arch),
            ScalarFamily::Deepnorm => ScalarModel::deepnorm(arch, GainForm::Exact),
        }
    }
}

/// Settings of every verification suite; each suite reads its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// `lemma1`: instances per `(n, d)` cell.
    pub instances: usize,
    pub ns: Vec<usize>,
    pub ds: Vec<usize>,
    /// `thm1` and `thm2`.
    pub kinds: Vec<ArchKind>,
    pub depths: Vec<usize>,
    pub families: Vec<ScalarFamily>,
    pub eta: f64,
    pub trials: usize,
    pub tolerance: f64,
    pub measure: UpdateMeasure,
    /// Each bound check runs once per listed direction mode.
    pub directions: Vec<DirectionMode>,
    pub alpha_scale: f64,
    /// Optional step sizes whose worst ratios must not increase.
    pub etas: Vec<f64>,
    /// `identities`.
    pub identity_depths: Vec<usize>,
    pub rounded_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            instances: 1000,
            ns: vec![2, 8, 32],
            ds: vec![4, 16, 64],
            kinds: ArchKind::ALL.to_vec(),
            depths: vec![1, 4, 16, 64],
            families: vec![ScalarFamily::Vanilla, ScalarFamily::Deepnorm],
            eta: 1e-4,
            trials: 500,
            tolerance: 1e-2,
            measure: UpdateMeasure::UnitScale,
            directions: vec![DirectionMode::Random, DirectionMode::Adversarial],
            alpha_scale: 1.0,
            etas: Vec::new(),
            identity_depths: log_spaced_depths(1000),
            rounded_tolerance: 5e-3,
        }
    }
}

/// `1, 2, 3, 5, 10, 18, 32, 56, 100, ...` up to and including `max`.
pub fn log_spaced_depths(max: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| 10f64.powf(k as f64 / 4.0).round() as usize)
        .take_while(|&d| d <= max)
        .collect();
    out.insert(1, 2);
    out.dedup();
    if out.last() != Some(&max) {
        out.push(max);
    }
    out
}

impl VerifyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.ns.contains(&0) || self.ds.iter().any(|&d| d < 2) {
            return config_err("lemma1 needs n >= 1 and d >= 2");
        }
        if self.depths.contains(&0) || self.identity_depths.contains(&0) {
            return config_err("depths must be at least 1");
        }
        if self.directions.is_empty() {
            return config_err("directions must list at least one mode");
        }
        if !(self.tolerance >= 0.0) || !(self.rounded_tolerance >= 0.0) {
            return config_err("tolerances must be non-negative");
        }
        Ok(())
    }

    fn options(&self, eta: f64, direction: DirectionMode) -> VerifyOptions {
        VerifyOptions {
            eta,
            trials: self.trials,
            measure: self.measure,
            direction,
            alpha_scale: self.alpha_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let checks = match suite {
        Suite::Lemma1 => lemma1_suite(cfg)?,
        Suite::Thm1 => bound_suite(cfg, false)?,
        Suite::Thm2 => bound_suite(cfg, true)?,
        Suite::Identities => identities_suite(cfg)?,
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { schema_version: SCHEMA_VERSION, suite, passed, checks })
}

fn lemma1_suite(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &n in &cfg.ns {
        for &d in &cfg.ds {
            let mut rng = rng_for(cfg.seed, &format!("lemma1/{n}/{d}"));
            let (mut failures, mut worst_gap) = (0usize, f64::NEG_INFINITY);
            for _ in 0..cfg.instances {
                let (x, q) = lemma1_instance(n, d, &mut rng)?;
                let r = lemma1_check(&x, &q)?;
                failures += usize::from(!r.holds);
                worst_gap = worst_gap.max(r.lhs - r.rhs);
            }
            out.push(CheckResult {
                name: format!("lemma1_n{n}_d{d}"),
                passed: failures == 0,
                detail: json!({ "instances": cfg.instances, "failures": failures, "worst_gap": worst_gap }),
            });
        }
    }
    Ok(out)
}

fn family_name(f: ScalarFamily) -> &'static str {
    match f {
        ScalarFamily::Vanilla => "vanilla",
        ScalarFamily::Deepnorm => "deepnorm",
    }
}

fn direction_name(d: DirectionMode) -> &'static str {
    match d {
        DirectionMode::Random => "random",
        DirectionMode::Adversarial => "adversarial",
        DirectionMode::Mixed => "mixed",
    }
}

fn report_value(r: &BoundReport) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn bound_suite(cfg: &VerifyConfig, two_stack: bool) -> Result<Vec<CheckResult>> {
    let kinds: Vec<ArchKind> = if two_stack { vec![ArchKind::EncoderDecoder] } else { cfg.kinds.clone() };
    let verify = if two_stack { verify_theorem2 } else { verify_theorem1 };
    let tag = if two_stack { "thm2" } else { "thm1" };
    let mut out = Vec::new();
    for kind in kinds {
        for &depth in &cfg.depths {
            for &family in &cfg.families {
                let model = family.build(ArchShape::uniform(kind, depth))?;
                for &direction in &cfg.directions {
                    let name = format!("{tag}_{}_{}_L{depth}_{}", kind.as_str(), family_name(family), direction_name(direction));
                    let opts = cfg.options(cfg.eta, direction);
                    let report = verify(&model, &opts)?;
                    out.push(CheckResult { name: name.clone(), passed: report.passes(cfg.tolerance), detail: report_value(&report) });
                    if !cfg.etas.is_empty() {
                        let curve = ratio_curve(verify, &model, &opts, &cfg.etas)?;
                        out.push(CheckResult {
                            name: format!("{name}_ratio_curve"),
                            passed: non_increasing(&curve),
                            detail: json!({ "etas": cfg.etas, "ratios": curve.iter().map(|r| r.ratio).collect::<Vec<_>>() }),
                        });
                    }
                }
            }
        }
    }
    if two_stack {
        for &depth in &cfg.depths {
            let model = ScalarModel::vanilla(ArchShape::encoder_decoder(depth, depth))?;
            let (n, m) = (depth as f64, depth as f64);
            let got = theorem2_bound(&model, &vec![1.0; 2 * depth], &vec![1.0; 3 * depth])?;
            let want = (2.0 * n * m + 3.0 * m) * 2f64.sqrt();
            out.push(CheckResult {
                name: format!("thm2_vanilla_unit_bound_L{depth}"),
                passed: (got - want).abs() <= 1e-12 * want,
                detail: json!({ "bound": got, "expected": want }),
            });
        }
    }
    Ok(out)
}

fn identities_suite(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &kind in &ArchKind::ALL {
        for &d in &cfg.identity_depths {
            for c in identity_checks(&ArchShape::uniform(kind, d))? {
                out.push(CheckResult {
                    name: format!("{}_{}_L{d}", c.name, kind.as_str()),
                    passed: c.pass,
                    detail: serde_json::to_value(&c)?,
                });
            }
        }
    }
    for &n in &cfg.identity_depths {
        for &m in &cfg.identity_depths {
            let gap = rounded_gap(n, m)?;
            out.push(CheckResult {
                name: format!("rounded_gains_N{n}_M{m}"),
                passed: gap < cfg.rounded_tolerance,
                detail: json!({ "relative_gap": gap }),
            });
        }
    }
    for &d in &cfg.identity_depths {
        let (g_post, g_deep) = bound_growth(d)?;
        out.push(CheckResult {
            name: format!("bound_growth_L{d}"),
            passed: (g_post - 2.0).abs() < 1e-12 && (g_deep - 2f64.sqrt()).abs() < 1e-9,
            detail: json!({ "post_ln_ratio": g_post, "deepnorm_ratio": g_deep }),
        });
    }
    Ok(out)
}

/// Per-unit single-stack bound at `2N` over the one at `N`, for Post-LN and
/// encoder-only DeepNorm scalar models.
pub fn bound_growth(n: usize) -> Result<(f64, f64)> {
    let at = |f: ScalarFamily, n| f.build(ArchShape::encoder_only(n)).and_then(|m| theorem1_bound_per_unit(&m));
    Ok((
        at(ScalarFamily::Vanilla, 2 * n)? / at(ScalarFamily::Vanilla, n)?,
        at(ScalarFamily::Deepnorm, 2 * n)? / at(ScalarFamily::Deepnorm, n)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    /// Root mean square of the fit residuals.
    pub residual: f64,
}

/// Least-squares fit of `L = A·ln(d) + B`. Points are sorted first, so the
/// result does not depend on their order.
pub fn fit_log_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.iter().any(|(d, l)| !(*d > 0.0) || !d.is_finite() || !l.is_finite()) {
        return Err(Error::Fit("depths must be positive and scores finite".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let distinct = pts.windows(2).filter(|w| w[0].0 != w[1].0).count() + usize::from(!pts.is_empty());
    if distinct < 2 {
        return Err(Error::Fit(format!("need at least 2 distinct depths, got {distinct}")));
    }
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&pts).map(|(x, p)| (x - xm) * (p.1 - ym)).sum();
    let a = sxy / sxx;
    let b = ym - a * xm;
    let sse: f64 = xs.iter().zip(&pts).map(|(x, p)| (p.1 - a * x - b).powi(2)).sum();
    Ok(ScalingFit { a, b, residual: (sse / n).sqrt() })
}

/// Output paths of a sweep written under `dir`.
pub fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.json")
}
