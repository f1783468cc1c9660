//! Scalar-reduced models and the model-update bounds.
//!
//! With hidden size 1 every sub-layer collapses to a value scalar `v` and an
//! output scalar `w`, and a residual block maps `x ↦ (α + vw)/√(α² + v²w²)·x`.
//! Cross-attention mixes in the encoder output instead:
//! `y ↦ (α_d·y + vw·x_e)/√(α_d² + v²w²)`.
//!
//! Bounds are checked against the measured update `|F(θ*) − F(θ)|` after random
//! or gradient-aligned perturbations of each `(v_i, w_i)` pair. The default
//! [`UpdateMeasure::UnitScale`] divides by `|F(θ)|`: the full model normalizes
//! every residual output, while the scalar recursion lets the magnitude of `x`
//! drift by the product of the per-block factors.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::error::{config_err, dim_err, Error, Result};
use crate::gains::{compute_gains, ArchKind, ArchShape, GainForm};
use crate::model::ModelConfig;
use crate::rng::{rng_for, LabRng};
use crate::tensor::{l2, Tensor};
use crate::train::{train_run, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarModel {
    pub arch: ArchShape,
    pub v_enc: Vec<f64>,
    pub w_enc: Vec<f64>,
    pub v_dec: Vec<f64>,
    pub w_dec: Vec<f64>,
    /// 1 when the architecture has no encoder.
    pub alpha_enc: f64,
    /// 1 when the architecture has no decoder.
    pub alpha_dec: f64,
}

fn check_unit_interval(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
        Some(x) => config_err(format!("{name} entry {x} outside (0, 1]")),
        None => Ok(()),
    }
}

impl ScalarModel {
    pub fn new(
        arch: ArchShape,
        (v_enc, w_enc): (Vec<f64>, Vec<f64>),
        (v_dec, w_dec): (Vec<f64>, Vec<f64>),
        alpha_enc: f64,
        alpha_dec: f64,
    ) -> Result<Self> {
        arch.validate()?;
        let (ne, nd) = (arch.encoder_sublayers(), arch.decoder_sublayers());
        if v_enc.len() != ne || w_enc.len() != ne || v_dec.len() != nd || w_dec.len() != nd {
            return dim_err(format!(
                "scalar model needs {ne} encoder and {nd} decoder pairs, got {}/{} and {}/{}",
                v_enc.len(),
                w_enc.len(),
                v_dec.len(),
                w_dec.len()
            ));
        }
        for (name, xs) in [("v_enc", &v_enc), ("w_enc", &w_enc), ("v_dec", &v_dec), ("w_dec", &w_dec)] {
            check_unit_interval(name, xs)?;
        }
        if !(alpha_enc > 0.0 && alpha_enc.is_finite() && alpha_dec > 0.0 && alpha_dec.is_finite()) {
            return config_err("alpha must be positive and finite");
        }
        Ok(Self { arch, v_enc, w_enc, v_dec, w_dec, alpha_enc, alpha_dec })
    }

    /// Same `(v, w)` in every sub-layer of a stack.
    pub fn uniform(arch: ArchShape, (v_e, w_e): (f64, f64), (v_d, w_d): (f64, f64), alpha_enc: f64, alpha_dec: f64) -> Result<Self> {
        let (ne, nd) = (arch.encoder_sublayers(), arch.decoder_sublayers());
        Self::new(arch, (vec![v_e; ne], vec![w_e; ne]), (vec![v_d; nd], vec![w_d; nd]), alpha_enc, alpha_dec)
    }

    /// Post-LN with Xavier weights: `v = w = α = 1`.
    pub fn vanilla(arch: ArchShape) -> Result<Self> {
        Self::uniform(arch, (1.0, 1.0), (1.0, 1.0), 1.0, 1.0)
    }

    /// DeepNorm: `α` from the gains, `v = w = β` per stack.
    pub fn deepnorm(arch: ArchShape, form: GainForm) -> Result<Self> {
        let g = compute_gains(&arch, form)?;
        let (ae, be) = (g.alpha_enc.unwrap_or(1.0), g.beta_enc.unwrap_or(1.0));
        let (ad, bd) = (g.alpha_dec.unwrap_or(1.0), g.beta_dec.unwrap_or(1.0));
        Self::uniform(arch, (be, be), (bd, bd), ae, ad)
    }

    /// Stack covered by the single-stack bound: the encoder when present,
    /// otherwise the decoder.
    fn single_stack(&self) -> (&[f64], &[f64], f64) {
        if self.arch.kind.has_encoder() {
            (&self.v_enc, &self.w_enc, self.alpha_enc)
        } else {
            (&self.v_dec, &self.w_dec, self.alpha_dec)
        }
    }
}

fn block(alpha: f64, v: f64, w: f64, x: f64) -> f64 {
    let p = v * w;
    (alpha + p) / (alpha * alpha + p * p).sqrt() * x
}

fn cross_block(alpha: f64, v: f64, w: f64, y: f64, x_e: f64) -> f64 {
    let p = v * w;
    (alpha * y + p * x_e) / (alpha * alpha + p * p).sqrt()
}

fn stack_forward(v: &[f64], w: &[f64], alpha: f64, x: f64) -> f64 {
    v.iter().zip(w).fold(x, |x, (v, w)| block(alpha, *v, *w, x))
}

fn decoder_forward(m: &ScalarModel, v: &[f64], w: &[f64], y: f64, x_e: Option<f64>) -> f64 {
    v.iter().zip(w).enumerate().fold(y, |y, (i, (v, w))| match x_e {
        Some(xe) if i % 3 == 1 => cross_block(m.alpha_dec, *v, *w, y, xe),
        _ => block(m.alpha_dec, *v, *w, y),
    })
}

/// Output of the scalar model for input `x`. Encoder-decoder models feed `x`
/// to both stacks and return the decoder output.
pub fn scalar_forward(model: &ScalarModel, x: f64) -> f64 {
    match model.arch.kind {
        ArchKind::EncoderOnly => stack_forward(&model.v_enc, &model.w_enc, model.alpha_enc, x),
        ArchKind::DecoderOnly => decoder_forward(model, &model.v_dec, &model.w_dec, x, None),
        ArchKind::EncoderDecoder => {
            let xe = stack_forward(&model.v_enc, &model.w_enc, model.alpha_enc, x);
            decoder_forward(model, &model.v_dec, &model.w_dec, x, Some(xe))
        }
    }
}

/// Output of the single stack bounded by [`theorem1_bound`].
pub fn single_stack_forward(model: &ScalarModel, x: f64) -> f64 {
    let (v, w, a) = model.single_stack();
    stack_forward(v, w, a, x)
}

fn terms(v: &[f64], w: &[f64], alpha: f64, delta: &[f64]) -> Vec<f64> {
    v.iter().zip(w).zip(delta).map(|((v, w), d)| (v * v + w * w).sqrt() / alpha * d).collect()
}

/// `Σ √(v_i² + w_i²)/α · ‖Δθ_i‖` over the single stack.
pub fn theorem1_bound(model: &ScalarModel, delta_theta: &[f64]) -> Result<f64> {
    Ok(theorem1_terms(model, delta_theta)?.iter().sum())
}

fn theorem1_terms(model: &ScalarModel, delta_theta: &[f64]) -> Result<Vec<f64>> {
    let (v, w, a) = model.single_stack();
    if delta_theta.len() != v.len() {
        return dim_err(format!("expected {} perturbation norms, got {}", v.len(), delta_theta.len()));
    }
    Ok(terms(v, w, a, delta_theta))
}

/// Encoder-decoder bound: the cross-attention coefficients
/// `Σ_j v_{d,3j−1} w_{d,3j−1}/α_d` times the encoder sum, plus the decoder sum.
pub fn theorem2_bound(model: &ScalarModel, delta_enc: &[f64], delta_dec: &[f64]) -> Result<f64> {
    Ok(theorem2_terms(model, delta_enc, delta_dec)?.iter().sum())
}

/// `[first term, second term]` of [`theorem2_bound`].
pub fn theorem2_terms(model: &ScalarModel, delta_enc: &[f64], delta_dec: &[f64]) -> Result<Vec<f64>> {
    if model.arch.kind != ArchKind::EncoderDecoder {
        return config_err("the two-stack bound needs an encoder-decoder model");
    }
    if delta_enc.len() != model.v_enc.len() || delta_dec.len() != model.v_dec.len() {
        return dim_err(format!(
            "expected {} encoder and {} decoder norms, got {} and {}",
            model.v_enc.len(),
            model.v_dec.len(),
            delta_enc.len(),
            delta_dec.len()
        ));
    }
    let cross: f64 = cross_coefficients(model).iter().sum();
    let enc: f64 = terms(&model.v_enc, &model.w_enc, model.alpha_enc, delta_enc).iter().sum();
    let dec: f64 = terms(&model.v_dec, &model.w_dec, model.alpha_dec, delta_dec).iter().sum();
    Ok(vec![cross * enc, dec])
}

fn cross_coefficients(model: &ScalarModel) -> Vec<f64> {
    (1..model.v_dec.len()).step_by(3).map(|i| model.v_dec[i] * model.w_dec[i] / model.alpha_dec).collect()
}

/// Bound per unit perturbation of every sub-layer.
pub fn theorem1_bound_per_unit(model: &ScalarModel) -> Result<f64> {
    let n = model.single_stack().0.len();
    theorem1_bound(model, &vec![1.0; n])
}

/// Encoder-decoder DeepNorm coefficient
/// `M·(β_d²/α_d)·2N·(2β_e²)/α_e²`, which the gains pin to 1 for every depth.
pub fn cross_term_coefficient(n: usize, m: usize, form: GainForm) -> Result<f64> {
    let g = compute_gains(&ArchShape::encoder_decoder(n, m), form)?;
    let (ae, be) = (g.alpha_enc.unwrap_or(1.0), g.beta_enc.unwrap_or(1.0));
    let (ad, bd) = (g.alpha_dec.unwrap_or(1.0), g.beta_dec.unwrap_or(1.0));
    Ok(m as f64 * (bd * bd / ad) * 2.0 * n as f64 * (2.0 * be * be) / (ae * ae))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Result {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `‖softmax(q)·X‖` against `max_i ‖x_i‖` for `X: [n × d]`.
pub fn lemma1_check(x: &Tensor, q: &[f64]) -> Result<Lemma1Result> {
    if x.shape().len() != 2 || x.rows() != q.len() {
        return dim_err(format!("lemma1: X {:?} with {} scores", x.shape(), q.len()));
    }
    let d = x.last_dim();
    let s = softmax_rows(&Tensor::new(vec![1, q.len()], q.to_vec())?);
    let mut mix = vec![0.0; d];
    for (row, si) in x.data().chunks(d).zip(s.data()) {
        mix.iter_mut().zip(row).for_each(|(m, r)| *m += si * r);
    }
    let lhs = l2(&mix);
    let rhs = x.data().chunks(d).map(l2).fold(0.0, f64::max);
    Ok(Lemma1Result { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}

/// Random `[n × d]` instance with rows normalized to mean 0, variance 1, and
/// Gaussian scores of random spread.
pub fn lemma1_instance(n: usize, d: usize, rng: &mut LabRng) -> Result<(Tensor, Vec<f64>)> {
    if d < 2 {
        return dim_err("lemma1 rows need d >= 2 to normalize");
    }
    let normal = rand_distr::StandardNormal;
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(normal)).collect();
    for row in data.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let sd = var.sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    }
    let spread = 10f64.powf(rng.random_range(-1.0..2.0));
    let q = (0..n).map(|_| spread * rng.sample::<f64, _>(normal)).collect();
    Ok((Tensor::new(vec![n, d], data)?, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMeasure {
    /// `|F(θ*) − F(θ)|`
    Absolute,
    /// `|F(θ*) − F(θ)| / |F(θ)|`
    #[default]
    UnitScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// Uniform on the circle of each pair.
    #[default]
    Random,
    /// Along `±∇F` of each pair, whichever sign stays in range.
    Adversarial,
    /// Per sub-layer coin flip between the two.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    pub eta: f64,
    pub trials: usize,
    #[serde(default)]
    pub measure: UpdateMeasure,
    #[serde(default)]
    pub direction: DirectionMode,
    /// Multiplies α in the perturbed and unperturbed forward passes while the
    /// bound keeps the true α. Anything but 1 is a negative control.
    #[serde(default = "one")]
    pub alpha_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl VerifyOptions {
    pub fn new(eta: f64, trials: usize, seed: u64) -> Self {
        Self { eta, trials, measure: UpdateMeasure::UnitScale, direction: DirectionMode::Random, alpha_scale: 1.0, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Measured update of the worst trial.
    pub measured_update: f64,
    /// Bound of the worst trial.
    pub theoretical_bound: f64,
    /// Largest measured/bound over all trials.
    pub ratio: f64,
    pub eta: f64,
    pub trials: usize,
    pub worst_trial: Option<usize>,
    /// Bound terms of the worst trial: one per sub-layer for the single-stack
    /// bound, `[cross term, decoder term]` for the two-stack bound.
    pub per_term: Vec<f64>,
}

impl BoundReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.ratio <= 1.0 + tolerance
    }
}

const RESAMPLE_LIMIT: usize = 1000;

fn in_range(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

/// Gradient of `f` with respect to `(v[i], w[i])` by central differences.
fn pair_gradient(f: &dyn Fn(&[f64], &[f64]) -> f64, v: &[f64], w: &[f64], i: usize) -> (f64, f64) {
    let h = 1e-6;
    let mut vp = v.to_vec();
    let mut wp = w.to_vec();
    vp[i] = v[i] + h;
    let a = f(&vp, w);
    vp[i] = v[i] - h;
    let b = f(&vp, w);
    wp[i] = w[i] + h;
    let c = f(v, &wp);
    wp[i] = w[i] - h;
    let d = f(v, &wp);
    ((a - b) / (2.0 * h), (c - d) / (2.0 * h))
}

/// Perturbs every pair of one stack; returns the new vectors and the radii.
fn perturb_stack(
    v: &[f64],
    w: &[f64],
    eta: f64,
    mode: DirectionMode,
    grad: &dyn Fn(usize) -> (f64, f64),
    rng: &mut LabRng,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = v.len();
    let (mut vs, mut ws, mut radii) = (v.to_vec(), w.to_vec(), vec![0.0; n]);
    for i in 0..n {
        let r = eta * (1.0 - rng.random::<f64>());
        let aligned = match mode {
            DirectionMode::Random => false,
            DirectionMode::Adversarial => true,
            DirectionMode::Mixed => rng.random::<bool>(),
        };
        let mut dir = None;
        if aligned {
            let (gv, gw) = grad(i);
            let norm = gv.hypot(gw);
            if norm > 0.0 {
                dir = [1.0, -1.0]
                    .into_iter()
                    .map(|s| (s * gv / norm, s * gw / norm))
                    .find(|(dv, dw)| in_range(v[i] + r * dv) && in_range(w[i] + r * dw));
            }
        }
        if dir.is_none() {
            for _ in 0..RESAMPLE_LIMIT {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let (dv, dw) = (phi.cos(), phi.sin());
                if in_range(v[i] + r * dv) && in_range(w[i] + r * dw) {
                    dir = Some((dv, dw));
                    break;
                }
            }
        }
        if let Some((dv, dw)) = dir {
            vs[i] = v[i] + r * dv;
            ws[i] = w[i] + r * dw;
            radii[i] = r;
        }
    }
    (vs, ws, radii)
}

fn measure(kind: UpdateMeasure, before: f64, after: f64) -> f64 {
    match kind {
        UpdateMeasure::Absolute => (after - before).abs(),
        UpdateMeasure::UnitScale => ((after - before) / before).abs(),
    }
}

fn ratio_of(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        measured / bound
    }
}

struct Trial {
    measured: f64,
    bound: f64,
    terms: Vec<f64>,
}

fn collect(trials: Vec<Trial>, eta: f64) -> BoundReport {
    let n = trials.len();
    let worst = trials
        .iter()
        .enumerate()
        .map(|(i, t)| (i, ratio_of(t.measured, t.bound)))
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, br)) if br >= r => best,
            _ => Some((i, r)),
        });
    match worst {
        Some((i, ratio)) => BoundReport {
            measured_update: trials[i].measured,
            theoretical_bound: trials[i].bound,
            ratio,
            eta,
            trials: n,
            worst_trial: Some(i),
            per_term: trials[i].terms.clone(),
        },
        None => BoundReport {
            measured_update: 0.0,
            theoretical_bound: 0.0,
            ratio: 0.0,
            eta,
            trials: 0,
            worst_trial: None,
            per_term: Vec::new(),
        },
    }
}

fn check_opts(opts: &VerifyOptions) -> Result<()> {
    if !(opts.eta >= 0.0) || !opts.eta.is_finite() {
        return config_err("eta must be finite and non-negative");
    }
    if !(opts.alpha_scale > 0.0) {
        return config_err("alpha_scale must be positive");
    }
    Ok(())
}

/// Worst measured/bound ratio of the single-stack bound over random
/// perturbations of size at most `eta` per sub-layer, at `x = 1`.
pub fn verify_theorem1(model: &ScalarModel, opts: &VerifyOptions) -> Result<BoundReport> {
    check_opts(opts)?;
    let (v, w, alpha) = model.single_stack();
    let a_run = alpha * opts.alpha_scale;
    let f = |v: &[f64], w: &[f64]| stack_forward(v, w, a_run, 1.0);
    let base = f(v, w);
    let trials = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(opts.seed, &format!("thm1/trial/{t}"));
            let grad = |i| pair_gradient(&f, v, w, i);
            let (vs, ws, radii) = perturb_stack(v, w, opts.eta, opts.direction, &grad, &mut rng);
            let terms = terms(v, w, alpha, &radii);
            Trial { measured: measure(opts.measure, base, f(&vs, &ws)), bound: terms.iter().sum(), terms }
        })
        .collect();
    Ok(collect(trials, opts.eta))
}

/// Same protocol as [`verify_theorem1`] on both stacks of an encoder-decoder
/// model, measured at the decoder output.
pub fn verify_theorem2(model: &ScalarModel, opts: &VerifyOptions) -> Result<BoundReport> {
    check_opts(opts)?;
    if model.arch.kind != ArchKind::EncoderDecoder {
        return config_err("the two-stack bound needs an encoder-decoder model");
    }
    let run = ScalarModel { alpha_enc: model.alpha_enc * opts.alpha_scale, alpha_dec: model.alpha_dec * opts.alpha_scale, ..model.clone() };
    let f = |ve: &[f64], we: &[f64], vd: &[f64], wd: &[f64]| {
        let xe = stack_forward(ve, we, run.alpha_enc, 1.0);
        decoder_forward(&run, vd, wd, 1.0, Some(xe))
    };
    let (ve, we, vd, wd) = (&model.v_enc[..], &model.w_enc[..], &model.v_dec[..], &model.w_dec[..]);
    let base = f(ve, we, vd, wd);
    let trials = (0..opts.trials)
        .into_par_iter()
        .map(|t| -> Result<Trial> {
            let mut rng = rng_for(opts.seed, &format!("thm2/trial/{t}"));
            let fe = |v: &[f64], w: &[f64]| f(v, w, vd, wd);
            let fd = |v: &[f64], w: &[f64]| f(ve, we, v, w);
            let ge = |i| pair_gradient(&fe, ve, we, i);
            let gd = |i| pair_gradient(&fd, vd, wd, i);
            let (ves, wes, re) = perturb_stack(ve, we, opts.eta, opts.direction, &ge, &mut rng);
            let (vds, wds, rd) = perturb_stack(vd, wd, opts.eta, opts.direction, &gd, &mut rng);
            let terms = theorem2_terms(model, &re, &rd)?;
            Ok(Trial { measured: measure(opts.measure, base, f(&ves, &wes, &vds, &wds)), bound: terms.iter().sum(), terms })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(trials, opts.eta))
}

/// Reports at each `eta`, reusing the same trial seeds.
pub fn ratio_curve(
    verify: impl Fn(&ScalarModel, &VerifyOptions) -> Result<BoundReport>,
    model: &ScalarModel,
    base: &VerifyOptions,
    etas: &[f64],
) -> Result<Vec<BoundReport>> {
    etas.iter().map(|&eta| verify(model, &VerifyOptions { eta, ..*base })).collect()
}

/// True when each worst ratio is no larger than the one before it.
pub fn non_increasing(reports: &[BoundReport]) -> bool {
    reports.windows(2).all(|p| p[1].ratio <= p[0].ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdateSeries {
    /// `‖F(x, θ_t) − F(x, θ_0)‖` after each update `t = 1, 2, ...`.
    pub series: Vec<f64>,
    pub diverged: bool,
}

/// Trains with a record after every update and returns the model-update series
/// on the run's probe batch; a divergence truncates the series.
pub fn verify_full_model_update(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<ModelUpdateSeries> {
    let cfg = TrainConfig { record_interval: 1, ..train_cfg.clone() };
    let trace = train_run(model_cfg, &cfg)?;
    let series = trace.records.iter().skip(1).map(|r| r.model_update).filter(|x| x.is_finite()).collect();
    Ok(ModelUpdateSeries { series, diverged: trace.diverged })
}

/// Checks a finite run of gain identities; see [`identity_checks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub kind: ArchKind,
    pub n: usize,
    pub m: usize,
    pub value: f64,
    pub expected: f64,
    /// Absolute error, or relative error for the power identity.
    pub error: f64,
    pub pass: bool,
}

pub const IDENTITY_TOLERANCE: f64 = 1e-12;

/// Exact-gain identities for one architecture:
///
/// * single stacks: `2L·(2β²)/α² = 1`
/// * encoder-decoder: `3M·(2β_d²)/α_d² = 1`, `α_e¹⁶ = N⁴M/27` (relative),
///   `α_e²·2β_e² = 1` and the cross coefficient of [`cross_term_coefficient`]
pub fn identity_checks(arch: &ArchShape) -> Result<Vec<IdentityCheck>> {
    let g = compute_gains(arch, GainForm::Exact)?;
    let (n, m) = (arch.n(), arch.m());
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64, expected: f64, relative: bool| {
        let error = if relative { (value / expected - 1.0).abs() } else { (value - expected).abs() };
        out.push(IdentityCheck { name: name.into(), kind: arch.kind, n, m, value, expected, error, pass: error < IDENTITY_TOLERANCE });
    };
    let missing = || Error::Config("gain missing for stack".into());
    match arch.kind {
        ArchKind::EncoderOnly | ArchKind::DecoderOnly => {
            let (a, b) = if arch.kind == ArchKind::EncoderOnly {
                (g.alpha_enc.ok_or_else(missing)?, g.beta_enc.ok_or_else(missing)?)
            } else {
                (g.alpha_dec.ok_or_else(missing)?, g.beta_dec.ok_or_else(missing)?)
            };
            let l = if arch.kind == ArchKind::EncoderOnly { n } else { m } as f64;
            push("stack_update_coefficient", 2.0 * l * 2.0 * b * b / (a * a), 1.0, false);
        }
        ArchKind::EncoderDecoder => {
            let (ae, be) = (g.alpha_enc.ok_or_else(missing)?, g.beta_enc.ok_or_else(missing)?);
            let (ad, bd) = (g.alpha_dec.ok_or_else(missing)?, g.beta_dec.ok_or_else(missing)?);
            push("decoder_update_coefficient", 3.0 * m as f64 * 2.0 * bd * bd / (ad * ad), 1.0, false);
            let (nf, mf) = (n as f64, m as f64);
            push("encoder_alpha_power", ae.powi(16), nf.powi(4) * mf / 27.0, true);
            push("encoder_alpha_beta_product", ae * ae * 2.0 * be * be, 1.0, false);
            push("cross_term_coefficient", cross_term_coefficient(n, m, GainForm::Exact)?, 1.0, false);
        }
    }
    Ok(out)
}

/// Largest relative gap between the rounded and exact encoder gains of an
/// encoder-decoder model.
pub fn rounded_gap(n: usize, m: usize) -> Result<f64> {
    let arch = ArchShape::encoder_decoder(n, m);
    let e = compute_gains(&arch, GainForm::Exact)?;
    let r = compute_gains(&arch, GainForm::Rounded)?;
    let rel = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => ((a - b) / b).abs(),
        _ => 0.0,
    };
    Ok(rel(r.alpha_enc, e.alpha_enc).max(rel(r.beta_enc, e.beta_enc)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_forward_scales_by_root_two() {
        let m = ScalarModel::vanilla(ArchShape::encoder_only(3)).unwrap();
        assert!((scalar_forward(&m, 1.0) - 2f64.sqrt().powi(6)).abs() < 1e-12);
    }

    #[test]
    fn documented_forward_example() {
        let m = ScalarModel::uniform(ArchShape::encoder_only(2), (0.5, 0.5), (1.0, 1.0), 1.5, 1.0).unwrap();
        let factor: f64 = 1.75 / (1.5f64 * 1.5 + 0.0625).sqrt();
        assert!((scalar_forward(&m, 2.0) - 2.0 * factor.powi(4)).abs() < 1e-12);
        assert!((factor.powi(4) - 1.753834).abs() < 1e-6);
    }

    #[test]
    fn construction_enforces_ranges() {
        let arch = ArchShape::encoder_only(1);
        assert!(ScalarModel::uniform(arch, (1.2, 0.5), (1.0, 1.0), 1.0, 1.0).is_err());
        assert!(ScalarModel::uniform(arch, (0.0, 0.5), (1.0, 1.0), 1.0, 1.0).is_err());
        assert!(ScalarModel::uniform(arch, (0.5, 0.5), (1.0, 1.0), 0.0, 1.0).is_err());
        assert!(ScalarModel::new(arch, (vec![1.0], vec![1.0]), (vec![], vec![]), 1.0, 1.0).is_err());
    }

    #[test]
    fn bound_examples() {
        let m = ScalarModel::vanilla(ArchShape::encoder_only(4)).unwrap();
        assert!((theorem1_bound(&m, &[0.5; 8]).unwrap() - 8.0 * 2f64.sqrt() * 0.5).abs() < 1e-12);
        assert_eq!(theorem1_bound(&m, &[0.0; 8]).unwrap(), 0.0);
        assert!(matches!(theorem1_bound(&m, &[0.0; 7]), Err(Error::Dimension(_))));
        let d = ScalarModel::deepnorm(ArchShape::encoder_only(1), GainForm::Exact).unwrap();
        assert!((theorem1_bound_per_unit(&d).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_eta_reports_zero() {
        let m = ScalarModel::vanilla(ArchShape::encoder_only(2)).unwrap();
        let r = verify_theorem1(&m, &VerifyOptions::new(0.0, 10, 1)).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert_eq!(r.measured_update, 0.0);
    }

    #[test]
    fn lemma1_trivial_cases() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let r = lemma1_check(&x, &[3.0]).unwrap();
        assert!((r.lhs - r.rhs).abs() < 1e-15 && r.holds);
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let r = lemma1_check(&x, &[5.0, -2.0]).unwrap();
        assert!((r.lhs - 2f64.sqrt()).abs() < 1e-12);
    }
}
