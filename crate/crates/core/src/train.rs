//! Optimizers, learning-rate schedules, toy sequence tasks and instrumented
//! training runs.
//!
//! Every run draws from three named seed streams: `init` (inside the model
//! config), `train/batches` and `train/probe`. The probe batch never feeds an
//! update; each record re-evaluates it to measure loss, the model update
//! `‖F(x, θ_t) − F(x, θ_0)‖` over its logits, per-sub-layer gradient norms and
//! the mean row norm entering every layer norm.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, IGNORE_TARGET};
use crate::error::{config_err, Error, Result};
use crate::gains::ArchKind;
use crate::model::{build_model, ModelConfig, ParamId, TokenBatch, TransformerModel};
use crate::rng::{rng_for, LabRng};
use crate::tensor::{l2, Tensor};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear ramp from `warmup_init_lr` to the peak over `warmup_steps`,
    /// then `peak·√(warmup_steps/step)`.
    InverseSqrt { warmup_steps: usize, warmup_init_lr: f64 },
}

/// Learning rate at 1-based `step`. With zero warmup steps the inverse-sqrt
/// decay is anchored at step 1.
pub fn lr_at(schedule: Schedule, peak: f64, step: usize) -> f64 {
    let step = step.max(1);
    match schedule {
        Schedule::Constant => peak,
        Schedule::InverseSqrt { warmup_steps, warmup_init_lr } => {
            if warmup_steps == 0 {
                peak / (step as f64).sqrt()
            } else if step <= warmup_steps {
                warmup_init_lr + (peak - warmup_init_lr) * step as f64 / warmup_steps as f64
            } else {
                peak * (warmup_steps as f64 / step as f64).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return config_err("task seq_len must be at least 2");
        }
        if self.vocab_size < 2 {
            return config_err("task vocab_size must be at least 2");
        }
        Ok(())
    }

    /// Id of the begin-of-sequence token, one past the task vocabulary.
    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    pub fn target_for(&self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self.kind {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }
}

/// `batch` source sequences with uniform tokens and their task targets.
pub fn make_batch(task: &TaskSpec, batch: usize, rng: &mut LabRng) -> Result<(TokenBatch, TokenBatch)> {
    task.validate()?;
    let src: Vec<usize> = (0..batch * task.seq_len).map(|_| rng.random_range(0..task.vocab_size)).collect();
    let tgt = src.chunks(task.seq_len).flat_map(|row| task.target_for(row)).collect();
    Ok((TokenBatch::new(batch, task.seq_len, src)?, TokenBatch::new(batch, task.seq_len, tgt)?))
}

/// Model inputs and per-position targets for one task batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelBatch {
    pub src: Option<TokenBatch>,
    pub tgt: Option<TokenBatch>,
    /// One entry per logits row; [`IGNORE_TARGET`] rows carry no loss.
    pub targets: Vec<usize>,
}

/// Lays a task batch out for an architecture:
///
/// * encoder-decoder: encoder reads `src`, decoder reads `[BOS, tgt[..L−1]]`
/// * decoder-only: one stream `[BOS, src, tgt[..L−1]]`, loss on the `tgt` half
/// * encoder-only: encoder reads `src` and labels every position with `tgt`
pub fn layout_batch(kind: ArchKind, task: &TaskSpec, src: &TokenBatch, tgt: &TokenBatch) -> Result<ModelBatch> {
    let (b, l) = (src.batch, src.seq_len);
    let bos = task.bos();
    let shifted = |row: &[usize]| std::iter::once(bos).chain(row[..l - 1].iter().copied()).collect::<Vec<_>>();
    Ok(match kind {
        ArchKind::EncoderOnly => ModelBatch { src: Some(src.clone()), tgt: None, targets: tgt.ids.clone() },
        ArchKind::EncoderDecoder => {
            let ids = (0..b).flat_map(|i| shifted(tgt.row(i))).collect();
            ModelBatch { src: Some(src.clone()), tgt: Some(TokenBatch::new(b, l, ids)?), targets: tgt.ids.clone() }
        }
        ArchKind::DecoderOnly => {
            let mut ids = Vec::with_capacity(b * 2 * l);
            let mut targets = Vec::with_capacity(b * 2 * l);
            for i in 0..b {
                ids.push(bos);
                ids.extend_from_slice(src.row(i));
                ids.extend_from_slice(&tgt.row(i)[..l - 1]);
                targets.extend(std::iter::repeat_n(IGNORE_TARGET, l));
                targets.extend_from_slice(tgt.row(i));
            }
            ModelBatch { src: None, tgt: Some(TokenBatch::new(b, 2 * l, ids)?), targets }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_interval")]
    pub record_interval: usize,
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub probe_batch_size: Option<usize>,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}
fn default_record_interval() -> usize {
    10
}

impl TrainConfig {
    /// Adam(0.9, 0.98), constant lr, copy task over 32 tokens of length 16.
    pub fn desk(lr: f64, steps: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            lr,
            schedule: Schedule::Constant,
            steps,
            batch_size: 16,
            task: TaskSpec { kind: TaskKind::Copy, vocab_size: 32, seq_len: 16 },
            grad_clip: None,
            label_smoothing: 0.0,
            seed,
            record_interval: default_record_interval(),
            probe_batch_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return config_err("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.record_interval == 0 || self.probe_batch_size == Some(0) {
            return config_err("batch sizes and record_interval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return config_err("label_smoothing must lie in [0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err("grad_clip must be positive");
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return config_err("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        if let Schedule::InverseSqrt { warmup_init_lr, .. } = self.schedule {
            if !(warmup_init_lr >= 0.0) {
                return config_err("warmup_init_lr must be non-negative");
            }
        }
        Ok(())
    }
}

/// Plain SGD over every parameter carrying a gradient. Returns `false`, leaving
/// parameters untouched, if any gradient is non-finite.
pub fn sgd_step(params: &mut [Tensor], lr: f64) -> bool {
    if !grads_finite(params) {
        return false;
    }
    for p in params.iter_mut() {
        let Some(g) = p.grad.take() else { continue };
        for (x, gi) in p.data_mut().iter_mut().zip(&g) {
            *x -= lr * gi;
        }
        p.grad = Some(g);
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Bias-corrected Adam. Same non-finite contract as [`sgd_step`].
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> bool {
    if !grads_finite(params) {
        return false;
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad.take() else { continue };
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
        p.grad = Some(g);
    }
    true
}

fn grads_finite(params: &[Tensor]) -> bool {
    params.iter().all(|p| p.grad.as_ref().is_none_or(|g| g.iter().all(|x| x.is_finite())))
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let total = params.iter().filter_map(|p| p.grad.as_ref()).map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    total
}

/// Optimizer plus its state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub adam: AdamState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, adam: AdamState::default() }
    }

    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> bool {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, lr),
            OptimizerKind::Adam { beta1, beta2, eps } => adam_step(params, &mut self.adam, lr, beta1, beta2, eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Updates applied before this record.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub model_update: f64,
    pub grad_norms: Vec<f64>,
    pub ln_input_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Sub-layer labels (`enc_1_self_attn`, ...) indexing the per-record lists.
    pub sites: Vec<String>,
    pub d_model: usize,
    pub records: Vec<TraceRecord>,
    pub steps_completed: usize,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
}

/// Result of one probe evaluation.
struct ProbeEval {
    loss: f64,
    logits: Vec<f64>,
    grad_norms: Vec<f64>,
    ln_input_norms: Vec<f64>,
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let d = t.last_dim();
    let rows = t.data().chunks(d);
    let n = rows.len() as f64;
    rows.map(l2).sum::<f64>() / n
}

/// Forward and backward on `batch`; gradients are stored in the model.
fn forward_backward(
    model: &mut TransformerModel,
    batch: &ModelBatch,
    smoothing: f64,
    dropout_rng: Option<&mut LabRng>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = model.forward_graph(&mut g, &vars, batch.src.as_ref(), batch.tgt.as_ref(), dropout_rng)?;
    let loss = g.cross_entropy(out.logits, &batch.targets, smoothing)?;
    let loss_value = g.value(loss).data()[0];
    let ln_norms = out.ln_inputs.iter().map(|(_, v)| mean_row_norm(g.value(*v))).collect();
    let logits = g.value(out.logits).data().to_vec();
    let mut grads = g.backward(loss)?;
    model.store_grads(&vars, &mut grads);
    Ok((loss_value, logits, ln_norms))
}

fn sublayer_grad_norms(model: &TransformerModel, groups: &[Vec<ParamId>]) -> Vec<f64> {
    groups
        .iter()
        .map(|ids| {
            ids.iter()
                .filter_map(|id| model.param(*id).grad.as_ref())
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn probe(model: &mut TransformerModel, batch: &ModelBatch, smoothing: f64, groups: &[Vec<ParamId>]) -> Result<ProbeEval> {
    let (loss, logits, ln_input_norms) = forward_backward(model, batch, smoothing, None)?;
    let grad_norms = sublayer_grad_norms(model, groups);
    model.zero_grads();
    Ok(ProbeEval { loss, logits, grad_norms, ln_input_norms })
}

/// Trains a fresh model and records its instability diagnostics. Divergence
/// (non-finite loss or gradient, or loss above 1000× the step-0 probe loss)
/// stops the run and is reported in the trace, not as an error.
pub fn train_run(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<RunTrace> {
    let model = build_model(model_cfg)?;
    train_model(model, train_cfg).map(|(trace, _)| trace)
}

/// [`train_run`] on an already built model, returning the trained model too.
pub fn train_model(mut model: TransformerModel, cfg: &TrainConfig) -> Result<(RunTrace, TransformerModel)> {
    cfg.validate()?;
    let kind = model.config.arch.kind;
    let needed_vocab = cfg.task.vocab_size + 1;
    if model.config.vocab_size < needed_vocab {
        return config_err(format!("model vocab {} < task vocab + BOS {needed_vocab}", model.config.vocab_size));
    }
    let needed_len = if kind == ArchKind::DecoderOnly { 2 * cfg.task.seq_len } else { cfg.task.seq_len };
    if model.config.max_seq_len < needed_len {
        return config_err(format!("model max_seq_len {} < {needed_len} needed by the task", model.config.max_seq_len));
    }

    let sites: Vec<_> = model.sublayers().iter().map(|s| s.site).collect();
    let groups: Vec<Vec<ParamId>> = model.sublayers().iter().map(|s| s.param_ids()).collect();
    let mut batch_rng = rng_for(cfg.seed, "train/batches");
    let mut dropout_rng = rng_for(cfg.seed, "train/dropout");
    let (ps, pt) = make_batch(&cfg.task, cfg.probe_batch_size.unwrap_or(cfg.batch_size), &mut rng_for(cfg.seed, "train/probe"))?;
    let probe_batch = layout_batch(kind, &cfg.task, &ps, &pt)?;

    let mut trace = RunTrace {
        sites: sites.iter().map(|s| s.label()).collect(),
        d_model: model.config.d_model,
        records: Vec::new(),
        steps_completed: 0,
        diverged: false,
        divergence_step: None,
    };
    let base = probe(&mut model, &probe_batch, cfg.label_smoothing, &groups)?;
    let initial_loss = base.loss;
    let base_logits = base.logits.clone();
    let record = |trace: &mut RunTrace, step: usize, eval: ProbeEval| -> bool {
        let delta: Vec<f64> = eval.logits.iter().zip(&base_logits).map(|(a, b)| a - b).collect();
        let model_update = l2(&delta);
        let lr = if step == 0 { 0.0 } else { lr_at(cfg.schedule, cfg.lr, step) };
        let bad = !eval.loss.is_finite() || eval.loss > 1000.0 * initial_loss || !model_update.is_finite();
        trace.records.push(TraceRecord {
            step,
            loss: eval.loss,
            lr,
            model_update,
            grad_norms: eval.grad_norms,
            ln_input_norms: eval.ln_input_norms,
        });
        bad
    };
    if record(&mut trace, 0, base) {
        trace.diverged = true;
        trace.divergence_step = Some(0);
        return Ok((trace, model));
    }

    let mut opt = Optimizer::new(cfg.optimizer);
    let use_dropout = model.config.dropout > 0.0;
    for step in 1..=cfg.steps {
        let (s, t) = make_batch(&cfg.task, cfg.batch_size, &mut batch_rng)?;
        let batch = layout_batch(kind, &cfg.task, &s, &t)?;
        let (loss, _, _) = forward_backward(&mut model, &batch, cfg.label_smoothing, use_dropout.then_some(&mut dropout_rng))?;
        let mut ok = loss.is_finite() && loss <= 1000.0 * initial_loss;
        if ok {
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), c);
            }
            ok = opt.step(model.params_mut(), lr_at(cfg.schedule, cfg.lr, step));
        }
        model.zero_grads();
        if !ok {
            trace.diverged = true;
            trace.divergence_step = Some(step);
            break;
        }
        trace.steps_completed = step;
        if step % cfg.record_interval == 0 || step == cfg.steps {
            let eval = probe(&mut model, &probe_batch, cfg.label_smoothing, &groups)?;
            if record(&mut trace, step, eval) {
                trace.diverged = true;
                trace.divergence_step = Some(step);
                break;
            }
        }
    }
    Ok((trace, model))
}

impl RunTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    /// Loss of the last finite record.
    pub fn final_loss(&self) -> Option<f64> {
        self.records.iter().rev().map(|r| r.loss).find(|l| l.is_finite())
    }

    pub fn terminal_model_update(&self) -> Option<f64> {
        self.records.last().map(|r| r.model_update)
    }

    pub fn peak_model_update(&self) -> f64 {
        self.records.iter().map(|r| r.model_update).filter(|x| x.is_finite()).fold(0.0, f64::max)
    }

    /// Largest recorded LN input norm divided by `√d_model`.
    pub fn peak_ln_input_ratio(&self) -> f64 {
        let sd = (self.d_model as f64).sqrt();
        self.records.iter().flat_map(|r| &r.ln_input_norms).filter(|x| x.is_finite()).fold(0.0, |m, x| m.max(x / sd))
    }

    /// Final loss below `fraction` of the initial loss, without divergence.
    pub fn converged(&self, fraction: f64) -> bool {
        match (self.diverged, self.initial_loss(), self.final_loss()) {
            (false, Some(a), Some(b)) => b < fraction * a,
            _ => false,
        }
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("step,loss,lr,model_update");
        for s in &self.sites {
            let _ = write!(h, ",grad_norm_{s}");
        }
        for s in &self.sites {
            let _ = write!(h, ",ln_input_{s}");
        }
        h
    }

    /// One row per record; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{}", r.step, r.loss, r.lr, r.model_update);
            for x in r.grad_norms.iter().chain(&r.ln_input_norms) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        let n = self.records.len().max(1) as f64;
        let sites = self
            .sites
            .iter()
            .enumerate()
            .map(|(i, label)| SiteSummary {
                site: label.clone(),
                mean_grad_norm: self.records.iter().map(|r| r.grad_norms[i]).sum::<f64>() / n,
                max_ln_input: self.records.iter().map(|r| r.ln_input_norms[i]).fold(0.0, f64::max),
            })
            .collect();
        RunSummary {
            schema_version: TRACE_SCHEMA_VERSION,
            diverged: self.diverged,
            divergence_step: self.divergence_step,
            steps_completed: self.steps_completed,
            initial_loss: self.initial_loss(),
            final_loss: self.final_loss(),
            terminal_model_update: self.terminal_model_update(),
            peak_model_update: self.peak_model_update(),
            peak_ln_input_ratio: self.peak_ln_input_ratio(),
            sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: String,
    pub mean_grad_norm: f64,
    pub max_ln_input: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
    pub steps_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub terminal_model_update: Option<f64>,
    pub peak_model_update: f64,
    pub peak_ln_input_ratio: f64,
    pub sites: Vec<SiteSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingReport {
    pub site: String,
    pub early: f64,
    pub late: f64,
    pub ratio: f64,
    pub vanished: bool,
}

pub const VANISHING_THRESHOLD: f64 = 0.01;

/// Late-to-early gradient-norm ratio per sub-layer. Early and late are the
/// means over the first and last quarter of the records (at least one each).
pub fn detect_gradient_vanishing(trace: &RunTrace) -> Result<Vec<VanishingReport>> {
    let n = trace.records.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 records, trace has {n}")));
    }
    let q = (n / 4).max(1);
    let mean = |rs: &[TraceRecord], i: usize| rs.iter().map(|r| r.grad_norms[i]).sum::<f64>() / rs.len() as f64;
    Ok(trace
        .sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            let early = mean(&trace.records[..q], i);
            let late = mean(&trace.records[n - q..], i);
            let ratio = if early == 0.0 {
                if late == 0.0 { 1.0 } else { f64::INFINITY }
            } else {
                late / early
            };
            VanishingReport { site: site.clone(), early, late, ratio, vanished: ratio < VANISHING_THRESHOLD }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(v: f64, g: f64) -> Vec<Tensor> {
        let mut t = Tensor::scalar(v);
        t.grad = Some(vec![g]);
        vec![t]
    }

    #[test]
    fn sgd_quadratic() {
        let mut p = with_grad(1.0, 2.0);
        assert!(sgd_step(&mut p, 0.1));
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        let mut p = with_grad(1.0, f64::NAN);
        assert!(!sgd_step(&mut p, 0.1));
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-3, -4.0, 250.0] {
            let mut p = with_grad(0.0, g);
            let mut st = AdamState::default();
            assert!(adam_step(&mut p, &mut st, 0.01, 0.9, 0.98, 1e-12));
            assert!((p[0].data()[0].abs() - 0.01).abs() < 1e-9);
            assert_eq!(p[0].data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn schedule_knots() {
        let s = Schedule::InverseSqrt { warmup_steps: 4000, warmup_init_lr: 1e-7 };
        assert_eq!(lr_at(s, 5e-4, 4000), 5e-4);
        assert!((lr_at(s, 5e-4, 16000) - 2.5e-4).abs() < 1e-18);
        assert!((lr_at(s, 5e-4, 1) - (1e-7 + (5e-4 - 1e-7) / 4000.0)).abs() < 1e-18);
        assert!((lr_at(s, 5e-4, 4001) - lr_at(s, 5e-4, 4000)).abs() < 1e-7);
        assert_eq!(lr_at(Schedule::Constant, 3e-4, 77), 3e-4);
    }

    #[test]
    fn task_targets() {
        let src = [3, 1, 2];
        let t = |kind| TaskSpec { kind, vocab_size: 4, seq_len: 3 }.target_for(&src);
        assert_eq!(t(TaskKind::Copy), vec![3, 1, 2]);
        assert_eq!(t(TaskKind::Reverse), vec![2, 1, 3]);
        assert_eq!(t(TaskKind::Sort), vec![1, 2, 3]);
    }

    #[test]
    fn decoder_only_layout() {
        let task = TaskSpec { kind: TaskKind::Reverse, vocab_size: 5, seq_len: 3 };
        let src = TokenBatch::single(&[3, 1, 2]).unwrap();
        let tgt = TokenBatch::single(&task.target_for(&src.ids)).unwrap();
        let b = layout_batch(ArchKind::DecoderOnly, &task, &src, &tgt).unwrap();
        assert_eq!(b.tgt.unwrap().ids, vec![5, 3, 1, 2, 2, 1]);
        assert_eq!(b.targets, vec![IGNORE_TARGET, IGNORE_TARGET, IGNORE_TARGET, 2, 1, 3]);
    }

    #[test]
    fn vanishing_flags() {
        let rec = |step, g: Vec<f64>| TraceRecord { step, loss: 1.0, lr: 0.0, model_update: 0.0, ln_input_norms: vec![0.0; g.len()], grad_norms: g };
        let trace = RunTrace {
            sites: vec!["a".into(), "b".into()],
            d_model: 4,
            records: (0..8).map(|i| rec(i, vec![1.0, 10f64.powi(-(i as i32))])).collect(),
            steps_completed: 7,
            diverged: false,
            divergence_step: None,
        };
        let r = detect_gradient_vanishing(&trace).unwrap();
        assert!(!r[0].vanished && r[0].ratio == 1.0);
        assert!(r[1].vanished);
        let short = RunTrace { records: trace.records[..1].to_vec(), ..trace };
        assert!(detect_gradient_vanishing(&short).is_err());
    }
}
