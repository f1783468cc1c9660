//! DeepNorm constants and the residual rule of each normalization scheme.
//!
//! | kind            | encoder α          | encoder β            | decoder α    | decoder β      |
//! |-----------------|--------------------|----------------------|--------------|----------------|
//! | encoder-only    | (2N)^¼             | (8N)^-¼              |              |                |
//! | decoder-only    |                    |                      | (2M)^¼       | (8M)^-¼        |
//! | encoder-decoder | (N⁴M/27)^(1/16)    | 2^-½·(N⁴M/27)^-1/16  | (3M)^¼       | (12M)^-¼       |
//!
//! The encoder-decoder encoder gains are also available in their rounded
//! published form `0.81·(N⁴M)^(1/16)` and `0.87·(N⁴M)^(-1/16)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    EncoderOnly,
    DecoderOnly,
    EncoderDecoder,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::EncoderOnly, ArchKind::DecoderOnly, ArchKind::EncoderDecoder];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::EncoderOnly => "encoder_only",
            ArchKind::DecoderOnly => "decoder_only",
            ArchKind::EncoderDecoder => "encoder_decoder",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != ArchKind::DecoderOnly
    }

    pub fn has_decoder(self) -> bool {
        self != ArchKind::EncoderOnly
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_only" => Ok(ArchKind::EncoderOnly),
            "decoder_only" => Ok(ArchKind::DecoderOnly),
            "encoder_decoder" => Ok(ArchKind::EncoderDecoder),
            other => config_err(format!("unknown architecture kind {other:?}")),
        }
    }
}

/// Architecture kind plus layer counts (layers, not sub-layers: an N-layer
/// encoder has 2N sub-layers, an M-layer decoder 3M with cross-attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchShape {
    pub kind: ArchKind,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
}

impl ArchShape {
    pub fn encoder_only(n: usize) -> Self {
        Self { kind: ArchKind::EncoderOnly, encoder_layers: Some(n), decoder_layers: None }
    }

    pub fn decoder_only(m: usize) -> Self {
        Self { kind: ArchKind::DecoderOnly, encoder_layers: None, decoder_layers: Some(m) }
    }

    pub fn encoder_decoder(n: usize, m: usize) -> Self {
        Self { kind: ArchKind::EncoderDecoder, encoder_layers: Some(n), decoder_layers: Some(m) }
    }

    /// Same kind with every present stack set to `depth` layers.
    pub fn uniform(kind: ArchKind, depth: usize) -> Self {
        match kind {
            ArchKind::EncoderOnly => Self::encoder_only(depth),
            ArchKind::DecoderOnly => Self::decoder_only(depth),
            ArchKind::EncoderDecoder => Self::encoder_decoder(depth, depth),
        }
    }

    /// Checks that the counts the kind needs are present and at least 1.
    pub fn validate(&self) -> Result<()> {
        let need = |c: Option<usize>, what: &str| match c {
            None => config_err(format!("{} needs the {what} layer count", self.kind.as_str())),
            Some(0) => config_err(format!("{what} layer count must be at least 1")),
            Some(_) => Ok(()),
        };
        if self.kind.has_encoder() {
            need(self.encoder_layers, "encoder")?;
        }
        if self.kind.has_decoder() {
            need(self.decoder_layers, "decoder")?;
        }
        Ok(())
    }

    /// Encoder layer count, 0 when absent from the kind.
    pub fn n(&self) -> usize {
        if self.kind.has_encoder() {
            self.encoder_layers.unwrap_or(0)
        } else {
            0
        }
    }

    /// Decoder layer count, 0 when absent from the kind.
    pub fn m(&self) -> usize {
        if self.kind.has_decoder() {
            self.decoder_layers.unwrap_or(0)
        } else {
            0
        }
    }

    pub fn encoder_sublayers(&self) -> usize {
        2 * self.n()
    }

    /// Decoder-only layers carry two sub-layers; encoder-decoder decoder layers three.
    pub fn decoder_sublayers(&self) -> usize {
        match self.kind {
            ArchKind::EncoderDecoder => 3 * self.m(),
            _ => 2 * self.m(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainForm {
    /// Closed forms that satisfy the bounding identities exactly.
    #[default]
    Exact,
    /// The 0.81 / 0.87 published constants for encoder-decoder encoders.
    Rounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GainSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_enc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_enc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_dec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_dec: Option<f64>,
}

/// `(N⁴M)` as f64.
fn n4m(n: usize, m: usize) -> f64 {
    (n as f64).powi(4) * m as f64
}

pub fn compute_gains(arch: &ArchShape, form: GainForm) -> Result<GainSpec> {
    arch.validate()?;
    let (n, m) = (arch.n() as f64, arch.m() as f64);
    let spec = match arch.kind {
        ArchKind::EncoderOnly => GainSpec {
            alpha_enc: Some((2.0 * n).powf(0.25)),
            beta_enc: Some((8.0 * n).powf(-0.25)),
            ..GainSpec::default()
        },
        ArchKind::DecoderOnly => GainSpec {
            alpha_dec: Some((2.0 * m).powf(0.25)),
            beta_dec: Some((8.0 * m).powf(-0.25)),
            ..GainSpec::default()
        },
        ArchKind::EncoderDecoder => {
            let p = n4m(arch.n(), arch.m());
            let (alpha_e, beta_e) = match form {
                GainForm::Exact => {
                    let r = p / 27.0;
                    (r.powf(1.0 / 16.0), std::f64::consts::FRAC_1_SQRT_2 * r.powf(-1.0 / 16.0))
                }
                GainForm::Rounded => (0.81 * p.powf(1.0 / 16.0), 0.87 * p.powf(-1.0 / 16.0)),
            };
            GainSpec {
                alpha_enc: Some(alpha_e),
                beta_enc: Some(beta_e),
                alpha_dec: Some((3.0 * m).powf(0.25)),
                beta_dec: Some((12.0 * m).powf(-0.25)),
            }
        }
    };
    Ok(spec)
}

/// Post-LN-init down-scaling factor `k_l = N − l + 1` for layer `l` (1-based).
/// Residual-branch weights of layer `l` are drawn with Xavier gain `1/k_l`,
/// i.e. variance `1/(k_l²·d′)` with `d′` the mean of fan-in and fan-out.
pub fn postln_init_scale(layer: usize, depth: usize) -> Result<f64> {
    if layer == 0 || layer > depth {
        return Err(Error::Index(format!("layer {layer} outside 1..={depth}")));
    }
    Ok((depth - layer + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum NormScheme {
    /// `LN(x + G(x))`
    PostLn,
    /// `x + G(LN(x))`
    PreLn,
    /// `x + G(x)`
    NoLn,
    /// `LN(α·x + G(x))`
    DeepNorm { alpha: f64 },
}

impl NormScheme {
    pub fn deepnorm(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return config_err(format!("deepnorm alpha must be positive and finite, got {alpha}"));
        }
        Ok(NormScheme::DeepNorm { alpha })
    }
}

/// Layer-norm settings for one residual site. `affine` carries learned
/// `(gain, bias)` leaves when the model was built with them.
#[derive(Debug, Clone, Copy)]
pub struct LnSettings {
    pub eps: f64,
    pub affine: Option<(Var, Var)>,
}

impl LnSettings {
    pub fn plain(eps: f64) -> Self {
        Self { eps, affine: None }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, self.eps)?;
        match self.affine {
            None => Ok(y),
            Some((gain, bias)) => {
                let s = g.row_scale(y, gain)?;
                g.row_shift(s, bias)
            }
        }
    }
}

/// Output of one residual site, plus the tensor that entered its layer norm
/// (for `no_ln`, the residual sum that would have entered it).
#[derive(Debug, Clone, Copy)]
pub struct ResidualOutput {
    pub output: Var,
    pub ln_input: Var,
}

/// Composes `x` with a sub-layer `G` under `scheme`.
pub fn apply_residual<F>(g: &mut Graph, scheme: NormScheme, x: Var, ln: &LnSettings, sublayer: F) -> Result<ResidualOutput>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let check = |g: &Graph, gx: Var| -> Result<()> {
        if g.shape(gx) != g.shape(x) {
            return dim_err(format!("sub-layer output {:?} differs from input {:?}", g.shape(gx), g.shape(x)));
        }
        Ok(())
    };
    match scheme {
        NormScheme::PostLn => {
            let gx = sublayer(g, x)?;
            check(g, gx)?;
            let s = g.add(x, gx)?;
            Ok(ResidualOutput { output: ln.apply(g, s)?, ln_input: s })
        }
        NormScheme::PreLn => {
            let n = ln.apply(g, x)?;
            let gx = sublayer(g, n)?;
            check(g, gx)?;
            Ok(ResidualOutput { output: g.add(x, gx)?, ln_input: x })
        }
        NormScheme::NoLn => {
            let gx = sublayer(g, x)?;
            check(g, gx)?;
            let s = g.add(x, gx)?;
            Ok(ResidualOutput { output: s, ln_input: s })
        }
        NormScheme::DeepNorm { alpha } => {
            let gx = sublayer(g, x)?;
            check(g, gx)?;
            let ax = g.scale(x, alpha);
            let s = g.add(ax, gx)?;
            Ok(ResidualOutput { output: ln.apply(g, s)?, ln_input: s })
        }
    }
}

/// Tensor-level convenience around [`apply_residual`].
pub fn apply_residual_tensor<F>(scheme: NormScheme, x: &Tensor, eps: f64, sublayer: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Tensor,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = apply_residual(&mut g, scheme, xv, &LnSettings::plain(eps), |g, v| {
        let y = sublayer(g.value(v));
        Ok(g.constant(y))
    })?;
    Ok(g.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn table_examples() {
        let g = compute_gains(&ArchShape::encoder_only(1), GainForm::Exact).unwrap();
        assert!(close(g.alpha_enc.unwrap(), 1.18921, 5e-6));
        assert!(close(g.beta_enc.unwrap(), 0.59460, 5e-6));
        assert!(g.alpha_dec.is_none());

        let g = compute_gains(&ArchShape::encoder_only(12), GainForm::Exact).unwrap();
        assert!(close(g.alpha_enc.unwrap(), 2.21336, 5e-6));
        assert!(close(g.beta_enc.unwrap(), 96f64.powf(-0.25), 1e-15));
        assert!(close(g.beta_enc.unwrap(), 0.31947, 5e-6));

        let g = compute_gains(&ArchShape::decoder_only(1), GainForm::Exact).unwrap();
        assert!(close(g.alpha_dec.unwrap(), 1.18921, 5e-6));
        assert!(close(g.beta_dec.unwrap(), 0.59460, 5e-6));

        let g = compute_gains(&ArchShape::encoder_decoder(18, 18), GainForm::Rounded).unwrap();
        assert!(close(g.alpha_enc.unwrap(), 1.9989, 5e-4));
        assert!(close(g.beta_enc.unwrap(), 0.35257, 5e-5));
        assert!(close(g.alpha_dec.unwrap(), 54f64.powf(0.25), 1e-15));
        assert!(close(g.alpha_dec.unwrap(), 2.71080, 1e-5));
        assert!(close(g.beta_dec.unwrap(), 0.26084, 1e-5));
    }

    #[test]
    fn missing_counts_are_config_errors() {
        let bad = ArchShape { kind: ArchKind::EncoderDecoder, encoder_layers: Some(2), decoder_layers: None };
        assert!(matches!(compute_gains(&bad, GainForm::Exact), Err(Error::Config(_))));
        assert!(compute_gains(&ArchShape::encoder_only(0), GainForm::Exact).is_err());
    }

    #[test]
    fn postln_scales() {
        assert_eq!(postln_init_scale(1, 18).unwrap(), 18.0);
        assert_eq!(postln_init_scale(18, 18).unwrap(), 1.0);
        assert_eq!(postln_init_scale(10, 24).unwrap(), 15.0);
        assert!(matches!(postln_init_scale(0, 4), Err(Error::Index(_))));
        assert!(matches!(postln_init_scale(5, 4), Err(Error::Index(_))));
    }

    fn row(xs: &[f64]) -> Tensor {
        Tensor::new(vec![1, xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn residual_rules() {
        let x = row(&[0.3, -1.2, 2.0, 0.7]);
        let f = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.sin()).collect()).unwrap();
        let post = apply_residual_tensor(NormScheme::PostLn, &x, 1e-5, f).unwrap();
        let deep = apply_residual_tensor(NormScheme::DeepNorm { alpha: 1.0 }, &x, 1e-5, f).unwrap();
        assert_eq!(post.data(), deep.data());

        let zero = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        let same = apply_residual_tensor(NormScheme::NoLn, &x, 1e-5, zero).unwrap();
        assert_eq!(same.data(), x.data());

        let unit = row(&[1.0, -1.0, 1.0, -1.0]);
        let y = apply_residual_tensor(NormScheme::DeepNorm { alpha: 2.0 }, &unit, 1e-5, zero).unwrap();
        for (a, b) in y.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-5);
        }

        let pre = apply_residual_tensor(NormScheme::PreLn, &x, 1e-5, zero).unwrap();
        assert_eq!(pre.data(), x.data());
    }

    #[test]
    fn residual_shape_mismatch() {
        let x = row(&[0.3, -1.2, 2.0]);
        let r = apply_residual_tensor(NormScheme::PostLn, &x, 1e-5, |_| row(&[1.0, 2.0]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
