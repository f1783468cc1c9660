#![allow(dead_code)]

use deepnorm_core::autodiff::{Graph, Var, IGNORE_TARGET};
use deepnorm_core::gradcheck::{finite_diff_grad, max_rel_err};
use deepnorm_core::model::{build_model, ModelConfig, TokenBatch};
use deepnorm_core::rng::rng_for;
use deepnorm_core::{Result, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const FLOOR: f64 = 1e-8;

pub fn randn(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = rng_for(seed, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, inputs, build: Box::new(build) }
}

/// One case per differentiable primitive. Non-scalar outputs are reduced by a
/// fixed random projection so every output element carries weight.
pub fn primitive_cases() -> Vec<Case> {
    let r = |s: &[usize], n: &str| randn(s, 11, n);
    let pe = r(&[3, 4], "pe");
    vec![
        case("matmul", vec![r(&[3, 4], "a"), r(&[4, 5], "b")], |g, v| g.matmul(v[0], v[1])),
        case("batch_matmul", vec![r(&[2, 3, 4], "a"), r(&[2, 4, 5], "b")], |g, v| g.batch_matmul(v[0], v[1], false)),
        case("batch_matmul_trans_b", vec![r(&[2, 3, 4], "a"), r(&[2, 5, 4], "b")], |g, v| g.batch_matmul(v[0], v[1], true)),
        case("add", vec![r(&[3, 4], "a"), r(&[3, 4], "b")], |g, v| g.add(v[0], v[1])),
        case("mul", vec![r(&[3, 4], "a"), r(&[3, 4], "b")], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![r(&[3, 4], "a")], |g, v| Ok(g.scale(v[0], -1.7))),
        case("add_const", vec![r(&[6, 4], "a")], move |g, v| g.add_const(v[0], &pe)),
        case("relu", vec![r(&[4, 5], "a")], |g, v| Ok(g.relu(v[0]))),
        case("softmax_rows", vec![r(&[3, 5], "a")], |g, v| Ok(g.softmax_rows(v[0]))),
        case("causal_softmax", vec![r(&[2, 4, 4], "a")], |g, v| g.causal_softmax(v[0])),
        case("layer_norm", vec![r(&[3, 6], "a")], |g, v| g.layer_norm(v[0], 1e-5)),
        case("row_scale", vec![r(&[3, 4], "a"), r(&[4], "b")], |g, v| g.row_scale(v[0], v[1])),
        case("row_shift", vec![r(&[3, 4], "a"), r(&[4], "b")], |g, v| g.row_shift(v[0], v[1])),
        case("split_heads", vec![r(&[6, 4], "a")], |g, v| g.split_heads(v[0], 2, 3, 2)),
        case("merge_heads", vec![r(&[4, 3, 2], "a")], |g, v| g.merge_heads(v[0], 2, 3, 2)),
        case("gather_rows", vec![r(&[5, 3], "a")], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        case("cross_entropy", vec![r(&[4, 5], "a")], |g, v| g.cross_entropy(v[0], &[1, IGNORE_TARGET, 4, 0], 0.1)),
        case("sum", vec![r(&[3, 4], "a")], |g, v| Ok(g.sum(v[0]))),
        case("mean", vec![r(&[3, 4], "a")], |g, v| Ok(g.mean(v[0]))),
        case("dropout", vec![r(&[4, 5], "a")], |g, v| Ok(g.dropout(v[0], 0.3, &mut rng_for(5, "mask")))),
    ]
}

/// Loss `Σ out ⊙ R` (or the scalar output itself) for a recorded case.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let weights = randn(g.shape(out), 99, "projection");
    let w = g.constant(weights);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval(case: &Case, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    Ok(g.value(loss).data()[0])
}

/// Worst elementwise relative error over every input of the case.
pub fn check_case(case: &Case) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let numeric = finite_diff_grad(
            |t| {
                let mut ins = case.inputs.clone();
                ins[i] = t.clone();
                eval(case, &ins)
            },
            &case.inputs[i],
            H,
        )?;
        worst = worst.max(max_rel_err(&analytic, numeric.data(), FLOOR));
    }
    Ok(worst)
}

/// Loss of a full model on a fixed source/target pair.
pub struct ModelCheck {
    pub worst: f64,
    pub checked: usize,
    pub total: usize,
}

/// Finite-difference check of every parameter of the model built from `cfg`.
pub fn check_model(cfg: &ModelConfig) -> Result<ModelCheck> {
    let mut model = build_model(cfg)?;
    let kind = cfg.arch.kind;
    let v = cfg.vocab_size;
    let src = TokenBatch::new(2, 3, vec![1, 2, 3, 4 % v, 0, 2]).unwrap();
    let tgt = TokenBatch::new(2, 3, vec![0, 1, 2, 3, 2, 1]).unwrap();
    let targets = vec![2, 1, 0, 3, 1, 4 % v];
    let (s, t) = match kind {
        deepnorm_core::ArchKind::EncoderOnly => (Some(&src), None),
        deepnorm_core::ArchKind::DecoderOnly => (None, Some(&tgt)),
        deepnorm_core::ArchKind::EncoderDecoder => (Some(&src), Some(&tgt)),
    };
    let loss_of = |m: &deepnorm_core::TransformerModel| -> Result<f64> {
        let mut g = Graph::new();
        let vars = m.bind_frozen(&mut g);
        let out = m.forward_graph(&mut g, &vars, s, t, None)?;
        let l = g.cross_entropy(out.logits, &targets, 0.0)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = model.forward_graph(&mut g, &vars, s, t, None)?;
    let loss = g.cross_entropy(out.logits, &targets, 0.0)?;
    let mut grads = g.backward(loss)?;
    model.store_grads(&vars, &mut grads);

    let (mut worst, mut checked, mut total) = (0.0f64, 0usize, 0usize);
    for i in 0..model.params().len() {
        let analytic = model.params()[i].grad.clone().unwrap();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.params_mut()[i] = x.clone();
                loss_of(&probe)
            },
            &model.params()[i],
            H,
        )?;
        worst = worst.max(max_rel_err(&analytic, numeric.data(), FLOOR));
        checked += analytic.iter().zip(numeric.data()).filter(|(a, b)| a.abs().max(b.abs()) >= FLOOR).count();
        total += analytic.len();
    }
    Ok(ModelCheck { worst, checked, total })
}

/// Rows with zero mean and unit variance, scaled by `scale`.
pub fn centered_row(d: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "centered_row");
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mean = x.iter().sum::<f64>() / d as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
    x.iter_mut().for_each(|v| *v = scale * (*v - mean) / sd);
    x
}

pub fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn random_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
