//! Reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a Wengert tape: every primitive appends one node holding its
//! value and the parents it read. Recording order is a topological order, so
//! [`Graph::backward`] walks the nodes in exact reverse recording order and
//! accumulates each parent gradient in place. Nothing depends on hashing or
//! thread scheduling, which makes gradients bit-reproducible.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

/// Target id that cross-entropy skips.
pub const IGNORE_TARGET: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowScale { x: Var, gain: Var },
    RowShift { x: Var, bias: Var },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64>, count: usize },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Row-wise softmax kernel; `causal_rows` masks columns past the row index
/// within each trailing square matrix.
fn softmax_rows_into(x: &[f64], cols: usize, causal_rows: Option<usize>, out: &mut [f64]) {
    for (r, (xr, yr)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let live = match causal_rows {
            Some(rows) => (r % rows) + 1,
            None => cols,
        };
        let max = xr[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (y, &v) in yr[..live].iter_mut().zip(&xr[..live]) {
            *y = (v - max).exp();
            z += *y;
        }
        for y in &mut yr[..live] {
            *y /= z;
        }
        for y in &mut yr[live..] {
            *y = 0.0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, parents: &[Var]) -> Var {
        value.requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a parameter tensor as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter shape already validated")
            .with_requires_grad(true);
        self.leaf(leaf)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("batch_matmul: {sa:?} x {sb:?}"));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!("batch_matmul: inner {k} vs {kb}"));
        }
        let mut out = vec![0.0; bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds a constant tensor whose shape matches `a`, or whose shape matches
    /// the trailing rows of `a` (broadcast over leading blocks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.len() % c.len() != 0 || av.last_dim() != c.last_dim() {
            return dim_err(format!("add_const: {:?} vs {:?}", av.shape(), c.shape()));
        }
        let data = av
            .data()
            .chunks_exact(c.len())
            .flat_map(|blk| blk.iter().zip(c.data()).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false).expect("unmasked softmax has no shape precondition")
    }

    /// Softmax over the last axis where, inside each trailing `L×L` block,
    /// row `i` only sees columns `0..=i` (strictly-upper entries masked to −∞).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let av = self.value(a);
        let cols = av.last_dim();
        let causal_rows = if causal {
            let s = av.shape();
            if s.len() < 2 || s[s.len() - 2] != cols {
                return dim_err(format!("causal_softmax needs square trailing blocks, got {s:?}"));
            }
            Some(cols)
        } else {
            None
        };
        let mut out = vec![0.0; av.len()];
        softmax_rows_into(av.data(), cols, causal_rows, &mut out);
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis with population variance and no
    /// affine parameters: `(x − mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if d < 2 {
            return dim_err(format!("layer_norm needs a last axis of at least 2, got {d}"));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let mut out = vec![0.0; av.len()];
        let mut inv_std = Vec::with_capacity(av.rows());
        for (xr, yr) in av.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x: a, inv_std }, &[a]))
    }

    /// `x ⊙ gain` with `gain` of length `last_dim(x)` broadcast over rows.
    pub fn row_scale(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.last_dim() {
            return dim_err("row_scale: gain length must equal last axis");
        }
        let data = xv
            .data()
            .chunks_exact(gv.len())
            .flat_map(|r| r.iter().zip(gv.data()).map(|(a, b)| a * b))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::RowScale { x, gain }, &[x, gain]))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn row_shift(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.last_dim() {
            return dim_err("row_shift: bias length must equal last axis");
        }
        let data = xv
            .data()
            .chunks_exact(bv.len())
            .flat_map(|r| r.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::RowShift { x, bias }, &[x, bias]))
    }

    /// `[batch·seq × heads·dk]` → `[batch·heads × seq × dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return dim_err(format!("split_heads: {s:?} with batch={batch} seq={seq} heads={heads}"));
        }
        let dk = s[1] / heads;
        let d = s[1];
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * d + h * dk;
                    let to = ((b * heads + h) * seq + t) * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dk], out)?;
        Ok(self.push(t, Op::SplitHeads { x, batch, seq, heads }, &[x]))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return dim_err(format!("merge_heads: {s:?} with batch={batch} seq={seq} heads={heads}"));
        }
        let dk = s[2];
        let d = dk * heads;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * d + h * dk;
                    let from = ((b * heads + h) * seq + t) * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        Ok(self.push(t, Op::MergeHeads { x, batch, seq, heads }, &[x]))
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let s = tv.shape();
        if s.len() != 2 {
            return dim_err("gather_rows: table must be 2-D");
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} out of range for vocab {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean token cross-entropy of `[rows × vocab]` logits with optional label
    /// smoothing; rows whose target is [`IGNORE_TARGET`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return dim_err(format!("cross_entropy: logits {s:?} vs {} targets", targets.len()));
        }
        let v = s[1];
        let mut probs = vec![0.0; lv.len()];
        softmax_rows_into(lv.data(), v, None, &mut probs);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            if t >= v {
                return Err(Error::Input(format!("target {t} out of range for vocab {v}")));
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let nll = lse - row[t];
            let uniform = lse - row.iter().sum::<f64>() / v as f64;
            total += (1.0 - smoothing) * nll + smoothing * uniform;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("cross_entropy: every target is ignored".into()));
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Inverted dropout with keep-probability `1 − p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x: a, mask }, &[a])
    }

    /// Backpropagates from the scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err("backward: loss must be a scalar");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gi, true, ai, false, out, 1.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, 1.0);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((gr, yr), xr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let inv_d = 1.0 / d as f64;
                self.accumulate(grads, *x, |gx| {
                    for (((gr, yr), xr), r) in g
                        .chunks_exact(d)
                        .zip(y.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() * inv_d;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                        for ((o, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *o += r * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::RowScale { x, gain } => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gain).data());
                let d = gv.len();
                self.accumulate(grads, *x, |gx| {
                    for (xr, gr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for ((o, gi), w) in xr.iter_mut().zip(gr).zip(gv) {
                            *o += gi * w;
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (xr, gr) in xv.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for ((o, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gi * xi;
                        }
                    }
                });
            }
            Op::RowShift { x, bias } => {
                let d = self.value(*bias).len();
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let dk = node.value.shape()[2];
                let d = dk * heads;
                self.accumulate(grads, *x, |gx| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let to = (b * seq + t) * d + h * dk;
                                let from = ((b * heads + h) * seq + t) * dk;
                                gx[to..to + dk].iter_mut().zip(&g[from..from + dk]).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dk = self.shape(*x)[2];
                let d = dk * heads;
                self.accumulate(grads, *x, |gx| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let from = (b * seq + t) * d + h * dk;
                                let to = ((b * heads + h) * seq + t) * dk;
                                gx[to..to + dk].iter_mut().zip(&g[from..from + dk]).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let off = smoothing / v as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (k, o) in row.iter_mut().enumerate() {
                            let q = if k == t { 1.0 - smoothing + off } else { off };
                            *o += scale * (probs[r * v + k] - q);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
        }
    }
}

/// Standalone row softmax on a tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = vec![0.0; x.len()];
    softmax_rows_into(x.data(), x.last_dim(), None, &mut out);
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Standalone matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}

/// Standalone layer normalization.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.layer_norm(v, eps)?;
    Ok(g.value(y).clone())
}

/// Jacobian of layer normalization at the vector `x`, built row by row from
/// one backward pass per output coordinate. Row-major `d×d`.
pub fn layer_norm_jacobian(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let d = x.len();
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(vec![1, d], x.to_vec())?.with_requires_grad(true));
    let y = g.layer_norm(xv, eps)?;
    let mut jac = Vec::with_capacity(d * d);
    for i in 0..d {
        let mut basis = vec![0.0; d];
        basis[i] = 1.0;
        let mask = g.constant(Tensor::new(vec![1, d], basis)?);
        let picked = g.mul(y, mask)?;
        let yi = g.sum(picked);
        let grads = g.backward(yi)?;
        jac.extend_from_slice(grads.get(xv).expect("x requires grad"));
    }
    Ok(jac)
}
