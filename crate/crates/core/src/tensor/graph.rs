use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::float::{matmul_into, Float};
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Additive logit used for masked attention positions.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout { a: Var, mask: Vec<F> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { a: Var, ids: Vec<usize> },
    Pick { a: Var, ids: Vec<usize> },
    GroupLogSumExp { a: Var, groups: Vec<(usize, usize)> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is a
/// topological order by construction and backward is a single reverse sweep.
pub struct Graph<F: Float> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
    param_nodes: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<F: Float> Graph<F> {
    /// New tape. `training` enables dropout; `seed` drives dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Attention weights `[B, heads, Lq, Lk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter from the store (memoized per graph; a graph must only
    /// ever be used with one store).
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(v) = self.param_nodes[idx] {
            return Ok(v);
        }
        let v = self.push(store.value_at(idx).clone(), Op::Leaf, true);
        self.param_nodes[idx] = Some(v);
        Ok(v)
    }

    /// `a[..., k] · b[k, n]`, or batched `a[B.., m, k] · b[B.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let k = *sa.last().unwrap();
        let mismatch = || Error::Shape(format!("matmul of {sa:?} and {sb:?}"));
        if sb.len() < 2 || sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        let out = if sb.len() == 2 {
            let m = self.values[a.0].len() / k;
            let mut c = vec![F::zero(); m * n];
            matmul_into(self.values[a.0].data(), false, self.values[b.0].data(), false, &mut c, m, k, n, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, c)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut c = vec![F::zero(); batch * m * n];
            let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
            for t in 0..batch {
                matmul_into(
                    &ad[t * m * k..(t + 1) * m * k],
                    false,
                    &bd[t * k * n..(t + 1) * k * n],
                    false,
                    &mut c[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, c)
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b }, ng))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(Error::Shape(format!("add of {sa:?} and {sb:?}")));
        }
        let bd = self.values[b.0].data();
        let w = bd.len();
        let mut out = self.values[a.0].clone();
        for chunk in out.data_mut().chunks_mut(w) {
            add_into(chunk, bd);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(Error::Shape(format!("mul of {sa:?} and {sb:?}")));
        }
        let bd = self.values[b.0].data();
        let w = bd.len();
        let mut out = self.values[a.0].clone();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o *= y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let mut out = self.values[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let mut out = self.values[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = f(*x));
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    /// GELU with the exact erf formulation, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = F::of(0.5);
        let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
        self.map(a, |x| half * x * (F::one() + (x * inv_sqrt2).erf()), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s = t.sum() / F::of(t.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        let w = out.last_dim();
        for row in out.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        let w = out.last_dim();
        for row in out.data_mut().chunks_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// LayerNorm over the last axis with affine `gain`/`bias` of that width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = self.values[x.0].last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::Shape(format!(
                "layer_norm width {w} with gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = F::of(eps);
        let xt = &self.values[x.0];
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let rows = xt.len() / w;
        let mut xhat = vec![F::zero(); xt.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xt.len()];
        let inv_w = F::one() / F::of(w as f64);
        for r in 0..rows {
            let row = &xt.data()[r * w..(r + 1) * w];
            let mu = row.iter().copied().sum::<F>() * inv_w;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_w;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..w {
                let h = (row[c] - mu) * rs;
                xhat[r * w + c] = h;
                out[r * w + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let n = self.values[a.0].len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let mut out = self.values[a.0].clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Dropout { a, mask }, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::Shape(format!("concat of {first:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.values[v.0].data()[o * len..(o + 1) * len]);
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: inputs.to_vec(), axis },
            ng,
        ))
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ax, inner) = split_axis(&s, axis);
        let src = self.values[a.0].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ax + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Select rows along axis 0; embedding lookup when `a` is a table.
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let rows = s[0];
        let w = self.values[a.0].len() / rows;
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        let src = self.values[a.0].data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { id, extent: rows });
            }
            out.extend_from_slice(&src[id * w..(id + 1) * w]);
        }
        let mut shape = s;
        shape[0] = ids.len();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { a, ids: ids.to_vec() }, ng))
    }

    /// `out[r] = a[r, ids[r]]` for `a` viewed as `[rows, last]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.values[a.0];
        let w = t.last_dim();
        let rows = t.len() / w;
        if ids.len() != rows {
            return Err(Error::Shape(format!("pick with {} ids over {rows} rows", ids.len())));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= w {
                return Err(Error::Index { id, extent: w });
            }
            out.push(t.data()[r * w + id]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Pick { a, ids: ids.to_vec() }, ng))
    }

    /// Log-sum-exp over contiguous `(start, len)` groups of a flat tensor.
    pub fn group_log_sum_exp(&mut self, a: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let d = self.values[a.0].data();
        let mut out = Vec::with_capacity(groups.len());
        for &(s, l) in groups {
            if l == 0 || s + l > d.len() {
                return Err(Error::Shape(format!("group {s}+{l} over {} values", d.len())));
            }
            out.push(log_sum_exp(&d[s..s + l]));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![groups.len()], out),
            Op::GroupLogSumExp { a, groups: groups.to_vec() },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on pre-projected inputs.
    ///
    /// `q: [B, Lq, heads·dk]`, `k`/`v: [B, Lk, heads·dk]`; `bias` is an additive
    /// logit term of shape `[1|B, 1|Lq, Lk]`. Returns `[B, Lq, heads·dk]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape(format!("attention over q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible into {heads} heads")));
        }
        let dk = d / heads;
        let bias_dims = match bias {
            Some(bv) => {
                let s = self.shape(bv);
                let ok = s.len() == 3 && (s[0] == 1 || s[0] == b) && (s[1] == 1 || s[1] == lq) && s[2] == lk;
                if !ok {
                    return Err(Error::Shape(format!("attention bias {s:?} for [{b}, {lq}, {lk}]")));
                }
                Some((s[0], s[1]))
            }
            None => None,
        };
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let bd = bias.map(|bv| self.values[bv.0].data());
        let mut probs = vec![F::zero(); b * heads * lq * lk];
        let mut out = vec![F::zero(); b * lq * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * d + h * dk..][..dk];
                    let prow = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(bi * lk + j) * d + h * dk..][..dk];
                        let mut s = F::zero();
                        for t in 0..dk {
                            s += qrow[t] * krow[t];
                        }
                        *p = s * scale;
                    }
                    if let (Some(bd), Some((bb, bq))) = (bd, bias_dims) {
                        let brow = &bd[((if bb == 1 { 0 } else { bi }) * bq + if bq == 1 { 0 } else { i }) * lk..][..lk];
                        add_into(prow, brow);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * lq + i) * d + h * dk..][..dk];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(bi * lk + j) * d + h * dk..][..dk];
                        for t in 0..dk {
                            orow[t] += p * vrow[t];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::from_parts(vec![b, lq, d], out),
            Op::Attention { q, k, v, heads, probs },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients are retained on the tape and
    /// can be read with [`Graph::grad`] or flushed into a store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.values.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.needs_grad[i] {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn buf(&mut self, v: Var) -> Option<&mut Vec<F>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(&mut self, i: usize, g: &[F]) {
        // Ops are moved out temporarily so their saved buffers can be read
        // while input gradient buffers are mutated.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let k = *sa.last().unwrap();
                let n = *sb.last().unwrap();
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                if sb.len() == 2 {
                    let m = av.len() / k;
                    if let Some(da) = self.buf(*a) {
                        matmul_into(g, false, &bv, true, da, m, n, k, true);
                    }
                    if let Some(db) = self.buf(*b) {
                        matmul_into(&av, true, g, false, db, k, m, n, true);
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batch = av.len() / (m * k);
                    if let Some(da) = self.buf(*a) {
                        for t in 0..batch {
                            matmul_into(&g[t * m * n..][..m * n], false, &bv[t * k * n..][..k * n], true, &mut da[t * m * k..][..m * k], m, n, k, true);
                        }
                    }
                    if let Some(db) = self.buf(*b) {
                        for t in 0..batch {
                            matmul_into(&av[t * m * k..][..m * k], true, &g[t * m * n..][..m * n], false, &mut db[t * k * n..][..k * n], k, m, n, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.buf(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.buf(*b) {
                    let w = db.len();
                    for chunk in g.chunks(w) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                let w = bv.len();
                if let Some(da) = self.buf(*a) {
                    for (ci, chunk) in da.chunks_mut(w).enumerate() {
                        for j in 0..w {
                            chunk[j] += g[ci * w + j] * bv[j];
                        }
                    }
                }
                if let Some(db) = self.buf(*b) {
                    for (ci, ga) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            db[j] += ga[j] * av[ci * w + j];
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                if let Some(da) = self.buf(*a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.values[a.0].data().to_vec();
                let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = F::of(0.5);
                if let Some(da) = self.buf(*a) {
                    for ((d, &x), &gi) in da.iter_mut().zip(&xv).zip(g) {
                        let cdf = half * (F::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        *d += gi * (cdf + x * pdf);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.values[i].data().to_vec();
                if let Some(da) = self.buf(*a) {
                    for ((d, &y), &gi) in da.iter_mut().zip(&yv).zip(g) {
                        *d += gi * y * (F::one() - y);
                    }
                }
            }
            Op::Softplus(a) => {
                let xv = self.values[a.0].data().to_vec();
                if let Some(da) = self.buf(*a) {
                    for ((d, &x), &gi) in da.iter_mut().zip(&xv).zip(g) {
                        *d += gi * sigmoid(x);
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.values[a.0].data().to_vec();
                if let Some(da) = self.buf(*a) {
                    for ((d, &x), &gi) in da.iter_mut().zip(&xv).zip(g) {
                        *d += gi / x;
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(da) = self.buf(*a) {
                    da.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(a) => {
                let n = self.values[a.0].len();
                let g0 = g[0] / F::of(n as f64);
                if let Some(da) = self.buf(*a) {
                    da.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Softmax(a) => {
                let yv = self.values[i].data().to_vec();
                let w = self.values[i].last_dim();
                if let Some(da) = self.buf(*a) {
                    for r in 0..yv.len() / w {
                        let y = &yv[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: F = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..w {
                            da[r * w + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let yv = self.values[i].data().to_vec();
                let w = self.values[i].last_dim();
                if let Some(da) = self.buf(*a) {
                    for r in 0..yv.len() / w {
                        let y = &yv[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let total: F = gr.iter().copied().sum();
                        for j in 0..w {
                            da[r * w + j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let w = self.values[x.0].last_dim();
                let rows = rstd.len();
                let gv = self.values[gain.0].data().to_vec();
                if let Some(dg) = self.buf(*gain) {
                    for r in 0..rows {
                        for c in 0..w {
                            dg[c] += g[r * w + c] * xhat[r * w + c];
                        }
                    }
                }
                if let Some(db) = self.buf(*bias) {
                    for r in 0..rows {
                        add_into(db, &g[r * w..(r + 1) * w]);
                    }
                }
                if let Some(dx) = self.buf(*x) {
                    let inv_w = F::one() / F::of(w as f64);
                    for r in 0..rows {
                        let xh = &xhat[r * w..(r + 1) * w];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for c in 0..w {
                            let dxh = g[r * w + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 *= inv_w;
                        m2 *= inv_w;
                        for c in 0..w {
                            let dxh = g[r * w + c] * gv[c];
                            dx[r * w + c] += rstd[r] * (dxh - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = self.buf(*a) {
                    for ((d, &m), &gi) in da.iter_mut().zip(mask).zip(g) {
                        *d += gi * m;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.shape(Var(i)).to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(dv) = self.buf(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            add_into(&mut dv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a).to_vec();
                let len = self.shape(Var(i))[*axis];
                let (outer, ax, inner) = split_axis(&sa, *axis);
                if let Some(da) = self.buf(*a) {
                    for o in 0..outer {
                        let base = (o * ax + start) * inner;
                        add_into(&mut da[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.buf(*a) {
                    add_into(da, g);
                }
            }
            Op::Gather { a, ids } => {
                let rows = self.shape(*a)[0];
                if let Some(da) = self.buf(*a) {
                    let w = da.len() / rows;
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut da[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Pick { a, ids } => {
                let w = self.values[a.0].last_dim();
                if let Some(da) = self.buf(*a) {
                    for (r, &id) in ids.iter().enumerate() {
                        da[r * w + id] += g[r];
                    }
                }
            }
            Op::GroupLogSumExp { a, groups } => {
                let av = self.values[a.0].data().to_vec();
                let outv = self.values[i].data().to_vec();
                if let Some(da) = self.buf(*a) {
                    for (gi, &(s, l)) in groups.iter().enumerate() {
                        for j in s..s + l {
                            da[j] += g[gi] * (av[j] - outv[gi]).exp();
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g);
            }
        }
        self.ops[i] = op;
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[F], g: &[F]) {
        let sq = self.shape(q).to_vec();
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = self.shape(k)[1];
        let dk = d / heads;
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let qd = self.values[q.0].data().to_vec();
        let kd = self.values[k.0].data().to_vec();
        let vd = self.values[v.0].data().to_vec();
        let mut dq = vec![F::zero(); qd.len()];
        let mut dkk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut ds = vec![F::zero(); lk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let p = &probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(bi * lq + i) * d + h * dk..][..dk];
                    let mut dot = F::zero();
                    for j in 0..lk {
                        let vrow = &vd[(bi * lk + j) * d + h * dk..][..dk];
                        let mut dp = F::zero();
                        for t in 0..dk {
                            dp += go[t] * vrow[t];
                        }
                        ds[j] = dp;
                        dot += p[j] * dp;
                        let dvrow = &mut dv[(bi * lk + j) * d + h * dk..][..dk];
                        for t in 0..dk {
                            dvrow[t] += p[j] * go[t];
                        }
                    }
                    let qoff = (bi * lq + i) * d + h * dk;
                    for j in 0..lk {
                        let s = p[j] * (ds[j] - dot) * scale;
                        if s == F::zero() {
                            continue;
                        }
                        let koff = (bi * lk + j) * d + h * dk;
                        for t in 0..dk {
                            dq[qoff + t] += s * kd[koff + t];
                            dkk[koff + t] += s * qd[qoff + t];
                        }
                    }
                }
            }
        }
        if let Some(buf) = self.buf(q) {
            add_into(buf, &dq);
        }
        if let Some(buf) = self.buf(k) {
            add_into(buf, &dkk);
        }
        if let Some(buf) = self.buf(v) {
            add_into(buf, &dv);
        }
    }

    /// Add gradients of bound parameters into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore<F>) {
        for (idx, node) in self.param_nodes.iter().enumerate() {
            let Some(v) = node else { continue };
            if let Some(g) = self.grad(*v) {
                add_into(store.grad_at_mut(idx), g);
            }
        }
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Float>(x: F) -> F {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp<F: Float>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = F::one() / s;
    row.iter_mut().for_each(|x| *x *= inv);
}
