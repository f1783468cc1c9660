//! Tiny Transformers with pluggable residual normalization and initialization.
//!
//! Weights multiply activations on the right (`x · W`), heads are merged into
//! single `d_model × d_model` projections, and no projection carries a bias.
//! Positional information is sinusoidal; token embeddings are scaled by
//! `√d_model` before positions are added.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::gains::{apply_residual, compute_gains, postln_init_scale, ArchKind, ArchShape, GainForm, LnSettings, NormScheme};
use crate::init::xavier_normal;
use crate::rng::{rng_for, LabRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    PostLn,
    PreLn,
    NoLn,
    /// `LN(α·x + G(x))` with α taken from the architecture's gains.
    DeepNorm,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::PostLn => "post_ln",
            NormKind::PreLn => "pre_ln",
            NormKind::NoLn => "no_ln",
            NormKind::DeepNorm => "deepnorm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Xavier normal with gain 1 everywhere.
    XavierGain1,
    /// Gain β on value/output projections and FFN weights, gain 1 on query/key.
    DeepnormInit,
    /// Xavier, then residual-branch weights of layer l divided by `N − l + 1`.
    PostlnInit,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::XavierGain1 => "xavier_gain1",
            InitScheme::DeepnormInit => "deepnorm_init",
            InitScheme::PostlnInit => "postln_init",
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchShape,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub norm: NormKind,
    pub init: InitScheme,
    #[serde(default)]
    pub gain_form: GainForm,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    /// Learned LN scale/bias (initialized to 1 and 0).
    #[serde(default)]
    pub ln_affine: bool,
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale geometry: d_model 64, 4 heads, FFN 128, vocab 33 (32 task
    /// tokens plus BOS), positions up to 64.
    pub fn desk(arch: ArchShape, norm: NormKind, init: InitScheme, seed: u64) -> Self {
        Self {
            arch,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            norm,
            init,
            gain_form: GainForm::Exact,
            vocab_size: 33,
            max_seq_len: 64,
            ln_eps: default_eps(),
            ln_affine: false,
            dropout: 0.0,
            seed,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return config_err("all model dimensions must be at least 1");
        }
        if self.d_model % self.n_heads != 0 {
            return config_err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model < 2 && self.norm != NormKind::NoLn {
            return config_err("layer norm needs d_model >= 2");
        }
        if !(self.ln_eps > 0.0) {
            return config_err("ln_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config_err("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    fn gains(&self) -> Result<crate::gains::GainSpec> {
        compute_gains(&self.arch, self.gain_form)
    }

    /// Residual rule of the encoder stack.
    pub fn encoder_scheme(&self) -> Result<NormScheme> {
        self.scheme_with(|g| g.alpha_enc)
    }

    /// Residual rule of the decoder stack.
    pub fn decoder_scheme(&self) -> Result<NormScheme> {
        self.scheme_with(|g| g.alpha_dec)
    }

    fn scheme_with(&self, pick: impl Fn(&crate::gains::GainSpec) -> Option<f64>) -> Result<NormScheme> {
        Ok(match self.norm {
            NormKind::PostLn => NormScheme::PostLn,
            NormKind::PreLn => NormScheme::PreLn,
            NormKind::NoLn => NormScheme::NoLn,
            NormKind::DeepNorm => {
                let alpha = pick(&self.gains()?).ok_or_else(|| Error::Config("stack absent from architecture".into()))?;
                NormScheme::deepnorm(alpha)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Enc,
    Dec,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Enc => "enc",
            Component::Dec => "dec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubLayerKind {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl SubLayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubLayerKind::SelfAttn => "self_attn",
            SubLayerKind::CrossAttn => "cross_attn",
            SubLayerKind::Ffn => "ffn",
        }
    }
}

/// Position of one sub-layer: component, 1-based layer, kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SiteId {
    pub component: Component,
    pub layer: usize,
    pub kind: SubLayerKind,
}

impl SiteId {
    /// `enc_3_self_attn`
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.component.as_str(), self.layer, self.kind.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubLayerWeights {
    Attention { w_q: ParamId, w_k: ParamId, w_v: ParamId, w_o: ParamId },
    Ffn { w_1: ParamId, w_2: ParamId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubLayer {
    pub site: SiteId,
    pub weights: SubLayerWeights,
    pub ln: Option<LnParams>,
}

impl SubLayer {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match self.weights {
            SubLayerWeights::Attention { w_q, w_k, w_v, w_o } => vec![w_q, w_k, w_v, w_o],
            SubLayerWeights::Ffn { w_1, w_2 } => vec![w_1, w_2],
        };
        if let Some(ln) = self.ln {
            ids.extend([ln.gain, ln.bias]);
        }
        ids
    }
}

/// Token ids for `batch` sequences of `seq_len`, batch-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq_len: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq_len == 0 || ids.len() != batch * seq_len {
            return Err(Error::Input(format!("{} ids cannot form {batch} sequences of {seq_len}", ids.len())));
        }
        Ok(Self { batch, seq_len, ids })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(1, ids.len(), ids.to_vec())
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    pub src_embed: Option<ParamId>,
    pub tgt_embed: Option<ParamId>,
    pub out_proj: ParamId,
    /// `(self_attn, ffn)` per encoder layer.
    pub encoder_layers: Vec<[SubLayer; 2]>,
    /// `(self_attn, [cross_attn], ffn)` per decoder layer; decoder-only layers
    /// have no cross-attention.
    pub decoder_layers: Vec<Vec<SubLayer>>,
    pub encoder_final_ln: Option<LnParams>,
    pub decoder_final_ln: Option<LnParams>,
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch·seq × vocab]`
    pub logits: Var,
    /// Tensor entering the layer norm of each sub-layer, in sub-layer order.
    pub ln_inputs: Vec<(SiteId, Var)>,
}

struct Builder {
    seed: u64,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.params.push(t.with_requires_grad(true));
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        let t = xavier_normal(fan_in, fan_out, gain, &mut rng_for(self.seed, &name));
        self.add(name, t)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnParams {
        let gain = self.add(format!("{prefix}.ln.gain"), Tensor::new(vec![d], vec![1.0; d]).expect("d >= 1"));
        let bias = self.add(format!("{prefix}.ln.bias"), Tensor::zeros(vec![d]));
        LnParams { gain, bias }
    }
}

/// Per-stack gains for the branch weights (`W_V`, `W_O`, `W_1`, `W_2`) of a layer.
fn branch_gain(cfg: &ModelConfig, component: Component, layer: usize, depth: usize) -> Result<f64> {
    Ok(match cfg.init {
        InitScheme::XavierGain1 => 1.0,
        InitScheme::DeepnormInit => {
            let g = cfg.gains()?;
            let beta = match component {
                Component::Enc => g.beta_enc,
                Component::Dec => g.beta_dec,
            };
            beta.ok_or_else(|| Error::Config("stack absent from architecture".into()))?
        }
        InitScheme::PostlnInit => 1.0 / postln_init_scale(layer, depth)?,
    })
}

pub fn build_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let cfg = config;
    let d = cfg.d_model;
    let affine = cfg.ln_affine && cfg.norm != NormKind::NoLn;
    let mut b = Builder { seed: cfg.seed, params: Vec::new(), names: Vec::new() };

    let kind = cfg.arch.kind;
    let src_embed = kind.has_encoder().then(|| b.xavier("src_embed".into(), cfg.vocab_size, d, 1.0));
    let tgt_embed = kind.has_decoder().then(|| b.xavier("tgt_embed".into(), cfg.vocab_size, d, 1.0));

    let attention = |b: &mut Builder, prefix: &str, gain: f64| SubLayerWeights::Attention {
        w_q: b.xavier(format!("{prefix}.w_q"), d, d, 1.0),
        w_k: b.xavier(format!("{prefix}.w_k"), d, d, 1.0),
        w_v: b.xavier(format!("{prefix}.w_v"), d, d, gain),
        w_o: b.xavier(format!("{prefix}.w_o"), d, d, gain),
    };
    let ffn = |b: &mut Builder, prefix: &str, gain: f64| SubLayerWeights::Ffn {
        w_1: b.xavier(format!("{prefix}.w_1"), d, cfg.d_ffn, gain),
        w_2: b.xavier(format!("{prefix}.w_2"), cfg.d_ffn, d, gain),
    };
    let sublayer = |b: &mut Builder, component: Component, layer: usize, kind: SubLayerKind, gain: f64| {
        let prefix = format!("{}.{layer}.{}", component.as_str(), kind.as_str());
        let weights = match kind {
            SubLayerKind::Ffn => ffn(b, &prefix, gain),
            _ => attention(b, &prefix, gain),
        };
        let ln = affine.then(|| b.ln(&prefix, d));
        SubLayer { site: SiteId { component, layer, kind }, weights, ln }
    };

    let n = cfg.arch.n();
    let mut encoder_layers = Vec::with_capacity(n);
    for l in 1..=n {
        let gain = branch_gain(cfg, Component::Enc, l, n)?;
        let attn = sublayer(&mut b, Component::Enc, l, SubLayerKind::SelfAttn, gain);
        let ff = sublayer(&mut b, Component::Enc, l, SubLayerKind::Ffn, gain);
        encoder_layers.push([attn, ff]);
    }
    let m = cfg.arch.m();
    let mut decoder_layers = Vec::with_capacity(m);
    for l in 1..=m {
        let gain = branch_gain(cfg, Component::Dec, l, m)?;
        let mut subs = vec![sublayer(&mut b, Component::Dec, l, SubLayerKind::SelfAttn, gain)];
        if kind == ArchKind::EncoderDecoder {
            subs.push(sublayer(&mut b, Component::Dec, l, SubLayerKind::CrossAttn, gain));
        }
        subs.push(sublayer(&mut b, Component::Dec, l, SubLayerKind::Ffn, gain));
        decoder_layers.push(subs);
    }
    let pre = cfg.norm == NormKind::PreLn && cfg.ln_affine;
    let encoder_final_ln = (pre && kind.has_encoder()).then(|| b.ln("enc.final", d));
    let decoder_final_ln = (pre && kind.has_decoder()).then(|| b.ln("dec.final", d));
    let out_proj = b.xavier("out_proj".into(), d, cfg.vocab_size, 1.0);

    Ok(TransformerModel {
        config: cfg.clone(),
        params: b.params,
        names: b.names,
        src_embed,
        tgt_embed,
        out_proj,
        encoder_layers,
        decoder_layers,
        encoder_final_ln,
        decoder_final_ln,
    })
}

/// `[seq × d]` sinusoidal table: `sin(p/10000^(2i/d))` on even columns,
/// `cos` on odd ones.
pub fn sinusoidal_positions(seq: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; seq * d];
    for p in 0..seq {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = p as f64 / 10000f64.powf(pair / d as f64);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![seq, d], data).expect("positive extents")
}

/// Attention projection tensors for the standalone [`attention_forward`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionTensors<'a> {
    pub w_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub w_v: &'a Tensor,
    pub w_o: &'a Tensor,
}

#[derive(Debug, Clone, Copy)]
struct AttnVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
}

/// Multi-head `softmax(x_q W_Q (x_kv W_K)ᵀ / √d_k) x_kv W_V W_O` over `batch`
/// sequences laid out batch-major.
#[allow(clippy::too_many_arguments)]
fn attention_graph(
    g: &mut Graph,
    w: AttnVars,
    xq: Var,
    xkv: Var,
    batch: usize,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (sq, skv) = (g.shape(xq).to_vec(), g.shape(xkv).to_vec());
    if sq.len() != 2 || skv.len() != 2 || sq[1] != skv[1] || sq[0] % batch != 0 || skv[0] % batch != 0 {
        return dim_err(format!("attention: queries {sq:?}, keys {skv:?}, batch {batch}"));
    }
    let (lq, lk) = (sq[0] / batch, skv[0] / batch);
    let d = sq[1];
    if g.shape(w.w_q)[0] != d {
        return dim_err(format!("attention: input width {d} vs projection {:?}", g.shape(w.w_q)));
    }
    let dk = d / heads;
    let q = g.matmul(xq, w.w_q)?;
    let k = g.matmul(xkv, w.w_k)?;
    let v = g.matmul(xkv, w.w_v)?;
    let qh = g.split_heads(q, batch, lq, heads)?;
    let kh = g.split_heads(k, batch, lk, heads)?;
    let vh = g.split_heads(v, batch, lk, heads)?;
    let scores = g.batch_matmul(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let probs = if causal { g.causal_softmax(scores)? } else { g.softmax_rows(scores) };
    let ctx = g.batch_matmul(probs, vh, false)?;
    let merged = g.merge_heads(ctx, batch, lq, heads)?;
    g.matmul(merged, w.w_o)
}

/// Standalone attention on single sequences `x_q: [Lq × d]`, `x_kv: [Lk × d]`.
pub fn attention_forward(x_q: &Tensor, x_kv: &Tensor, w: AttentionTensors<'_>, n_heads: usize, causal: bool) -> Result<Tensor> {
    if n_heads == 0 || x_q.last_dim() % n_heads != 0 {
        return dim_err("attention: width not divisible by head count");
    }
    let mut g = Graph::new();
    let vars = AttnVars {
        w_q: g.constant(w.w_q.clone()),
        w_k: g.constant(w.w_k.clone()),
        w_v: g.constant(w.w_v.clone()),
        w_o: g.constant(w.w_o.clone()),
    };
    let xq = g.constant(x_q.clone());
    let xkv = g.constant(x_kv.clone());
    let out = attention_graph(&mut g, vars, xq, xkv, 1, n_heads, causal)?;
    Ok(g.value(out).clone())
}

impl TransformerModel {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// All sub-layers in θ order: the 2N encoder sub-layers, then the decoder's.
    pub fn sublayers(&self) -> Vec<&SubLayer> {
        self.encoder_layers
            .iter()
            .flat_map(|l| l.iter())
            .chain(self.decoder_layers.iter().flat_map(|l| l.iter()))
            .collect()
    }

    /// Parameter partition `(θ_e, θ_d)`, one entry per sub-layer.
    pub fn theta_partition(&self) -> (Vec<Vec<ParamId>>, Vec<Vec<ParamId>>) {
        let enc = self.encoder_layers.iter().flat_map(|l| l.iter()).map(SubLayer::param_ids).collect();
        let dec = self.decoder_layers.iter().flat_map(|l| l.iter()).map(SubLayer::param_ids).collect();
        (enc, dec)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Writes gradients of the bound leaves into each parameter's `grad`.
    pub fn store_grads(&mut self, vars: &[Var], grads: &mut crate::autodiff::Gradients) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(grads.take(*v).unwrap_or_else(|| vec![0.0; p.len()]));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn embed(&self, g: &mut Graph, table: Var, tokens: &TokenBatch) -> Result<Var> {
        if tokens.seq_len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq_len, self.config.max_seq_len
            )));
        }
        let d = self.config.d_model;
        let rows = g.gather_rows(table, &tokens.ids)?;
        let scaled = g.scale(rows, (d as f64).sqrt());
        g.add_const(scaled, &sinusoidal_positions(tokens.seq_len, d))
    }

    fn ln_settings(&self, vars: &[Var], ln: Option<LnParams>) -> LnSettings {
        LnSettings { eps: self.config.ln_eps, affine: ln.map(|p| (vars[p.gain.0], vars[p.bias.0])) }
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut LabRng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, *r),
            _ => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_sublayer(
        &self,
        g: &mut Graph,
        vars: &[Var],
        sub: &SubLayer,
        scheme: NormScheme,
        x: Var,
        memory: Option<Var>,
        batch: usize,
        rng: &mut Option<&mut LabRng>,
    ) -> Result<(Var, Var)> {
        let heads = self.config.n_heads;
        let ln = self.ln_settings(vars, sub.ln);
        let out = apply_residual(g, scheme, x, &ln, |g, h| {
            let y = match (sub.weights, sub.site.kind) {
                (SubLayerWeights::Ffn { w_1, w_2 }, _) => {
                    let a = g.matmul(h, vars[w_1.0])?;
                    let a = g.relu(a);
                    g.matmul(a, vars[w_2.0])?
                }
                (SubLayerWeights::Attention { w_q, w_k, w_v, w_o }, kind) => {
                    let w = AttnVars { w_q: vars[w_q.0], w_k: vars[w_k.0], w_v: vars[w_v.0], w_o: vars[w_o.0] };
                    match kind {
                        SubLayerKind::CrossAttn => {
                            let mem = memory.ok_or_else(|| Error::Input("cross-attention without encoder output".into()))?;
                            attention_graph(g, w, h, mem, batch, heads, false)?
                        }
                        SubLayerKind::SelfAttn => {
                            let causal = sub.site.component == Component::Dec;
                            attention_graph(g, w, h, h, batch, heads, causal)?
                        }
                        SubLayerKind::Ffn => unreachable!("ffn sub-layers carry ffn weights"),
                    }
                }
            };
            Ok(self.maybe_dropout(g, y, rng))
        })?;
        Ok((out.output, out.ln_input))
    }

    /// Records a forward pass. `src` feeds the encoder, `tgt` the decoder
    /// (decoder-only models read only `tgt`, encoder-only only `src`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        src: Option<&TokenBatch>,
        tgt: Option<&TokenBatch>,
        mut dropout_rng: Option<&mut LabRng>,
    ) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return dim_err("forward: parameter binding does not match the model");
        }
        let kind = self.config.arch.kind;
        let mut ln_inputs = Vec::with_capacity(self.sublayers().len());
        let mut memory = None;
        let mut batch = 0;
        if kind.has_encoder() {
            let src = src.ok_or_else(|| Error::Input("encoder needs source tokens".into()))?;
            batch = src.batch;
            let scheme = self.config.encoder_scheme()?;
            let mut x = self.embed(g, vars[self.src_embed.expect("encoder embed").0], src)?;
            for layer in &self.encoder_layers {
                for sub in layer {
                    let (y, li) = self.run_sublayer(g, vars, sub, scheme, x, None, batch, &mut dropout_rng)?;
                    ln_inputs.push((sub.site, li));
                    x = y;
                }
            }
            if self.config.norm == NormKind::PreLn {
                x = self.ln_settings(vars, self.encoder_final_ln).apply(g, x)?;
            }
            memory = Some(x);
        }
        let hidden = if kind.has_decoder() {
            let tgt = tgt.ok_or_else(|| Error::Input("decoder needs target tokens".into()))?;
            if kind.has_encoder() && tgt.batch != batch {
                return Err(Error::Input(format!("source batch {batch} vs target batch {}", tgt.batch)));
            }
            batch = tgt.batch;
            let scheme = self.config.decoder_scheme()?;
            let mut y = self.embed(g, vars[self.tgt_embed.expect("decoder embed").0], tgt)?;
            for layer in &self.decoder_layers {
                for sub in layer {
                    let (out, li) = self.run_sublayer(g, vars, sub, scheme, y, memory, batch, &mut dropout_rng)?;
                    ln_inputs.push((sub.site, li));
                    y = out;
                }
            }
            if self.config.norm == NormKind::PreLn {
                y = self.ln_settings(vars, self.decoder_final_ln).apply(g, y)?;
            }
            y
        } else {
            memory.expect("encoder-only output")
        };
        let logits = g.matmul(hidden, vars[self.out_proj.0])?;
        Ok(ForwardOutput { logits, ln_inputs })
    }

    /// Inference forward returning `[batch·seq × vocab]` logits.
    pub fn forward(&self, src: Option<&TokenBatch>, tgt: Option<&TokenBatch>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let out = self.forward_graph(&mut g, &vars, src, tgt, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Flat binary checkpoint, little-endian:
    ///
    /// ```text
    /// magic   8 bytes  "DNLABCK1"
    /// u64     length of the JSON header
    /// bytes   JSON ModelConfig
    /// u64     tensor count
    /// per tensor:
    ///   u32 name length, name bytes (UTF-8)
    ///   u32 rank, u64 per extent
    ///   f64 values, row-major
    /// ```
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = serde_json::to_vec(&self.config)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.params) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let config: ModelConfig = serde_json::from_slice(&header)?;
        let mut model = build_model(&config)?;
        let count = read_u64(&mut r)? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", model.params.len())));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let id = model.find(&name).ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            if model.params[id.0].shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {shape:?}")));
            }
            for v in model.params[id.0].data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DNLABCK1";

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Inference forward (`model_forward`).
pub fn model_forward(model: &TransformerModel, src: Option<&TokenBatch>, tgt: Option<&TokenBatch>) -> Result<Tensor> {
    model.forward(src, tgt)
}
