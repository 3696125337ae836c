//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably and records every operation
//! as a node in creation order. Parameters are bound by reference, so a
//! forward pass never copies weights. [`Tape::backward`] walks the nodes in
//! reverse creation order (a valid topological order) and returns a
//! [`Grads`] table; the caller then folds it into the store with
//! [`ParamStore::accumulate`]. Frozen parameters never require grad, so no
//! gradient is ever produced for them and subgraphs that only depend on
//! frozen values are skipped entirely.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether stochastic ops (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a stream keyed by `(seed, step, op id)`.
    Train {
        seed: u64,
        step: u64,
    },
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch*q_len, d]`, keys and values `[batch*k_len, d]`, with
/// heads occupying contiguous `d / heads` column slices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGeometry {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Key `j` is hidden from query `i` when `j > i`.
    pub causal: bool,
    /// `[batch*k_len]`, `true` marks a padded key.
    pub key_pad: Option<Vec<bool>>,
}

impl AttnGeometry {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_pad {
            Some(pad) => !pad[b * self.k_len + j],
            None => true,
        }
    }
}

enum Op<F> {
    Leaf,
    #[allow(dead_code)]
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Dropout {
        input: Var,
        mask: Vec<F>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        smoothing: F,
        pad_id: u32,
        probs: Vec<F>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeometry,
        probs: Vec<F>,
    },
}

struct Node<'p, F: Float> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<'p, F: Float> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    dropout_ops: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the dropout stream for one op.
pub fn dropout_stream_seed(seed: u64, step: u64, op_id: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ op_id)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(store: &'p ParamStore<F>, mode: Mode) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
            mode,
            dropout_ops: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Grads::of`] when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    /// Binds a stored parameter by reference; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(Cow::Borrowed(&p.tensor), Op::Param(id), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Scale(a, c), &[a]))
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&r, &c)| r + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(F::zero())).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Relu(a), &[a]))
    }

    /// Numerically stable softmax along `axis`; `-inf` entries get probability 0.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let x = self.data(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(F::neg_infinity(), F::max);
                if max == F::neg_infinity() {
                    continue;
                }
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = self.value(x).rows_cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(eps);
        let nf = F::from_usize(n).unwrap();
        let (xs, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table: [V×d]`; the result is `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[2]));
        }
        let (v, d) = (s[0], s[1]);
        let tab = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Contract(format!(
                    "token id {id} outside vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout; the identity (same node) in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        let Mode::Train { seed, step } = self.mode else {
            return Ok(a);
        };
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        let op_id = self.dropout_ops;
        self.dropout_ops += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_stream_seed(seed, step, op_id));
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.data(a);
        let mask: Vec<F> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Dropout { input: a, mask }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<F>();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Mean label-smoothed negative log-likelihood over non-pad rows.
    ///
    /// Each row's target distribution puts `1 - smoothing + smoothing / V` on
    /// the gold id and `smoothing / V` on every other id.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        smoothing: f64,
        pad_id: u32,
    ) -> Result<Var> {
        let (rows, vocab) = self.value(logits).rows_cols();
        if rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!(
                "label smoothing {smoothing} not in [0,1)"
            )));
        }
        let eps = F::from_f64_lossy(smoothing);
        let vf = F::from_usize(vocab).unwrap();
        let x = self.data(logits);
        let mut probs = vec![F::zero(); rows * vocab];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::Contract(format!(
                    "target id {t} outside vocabulary of {vocab}"
                )));
            }
            count += 1;
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum_exp = row.iter().map(|&v| (v - max).exp()).sum::<F>();
            let lse = max + sum_exp.ln();
            let nll = lse - row[t as usize];
            let smooth = row.iter().map(|&v| lse - v).sum::<F>() / vf;
            total += (F::one() - eps) * nll + eps * smooth;
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = total / F::from_usize(count).unwrap();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                pad_id,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Batched multi-head scaled dot-product attention over pre-projected
    /// queries, keys and values. Hidden keys are excluded from the softmax,
    /// which is the same as adding `-inf` before it.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeometry) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let d = *sq.last().unwrap_or(&0);
        let shapes_ok = sq == [geom.batch * geom.q_len, d]
            && sk == [geom.batch * geom.k_len, d]
            && sv == sk
            && geom.heads > 0
            && d % geom.heads == 0
            && geom
                .key_pad
                .as_ref()
                .is_none_or(|p| p.len() == geom.batch * geom.k_len);
        if !shapes_ok {
            return Err(Error::shape("attention", sq, sk));
        }
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let (b_n, h_n, tq, tk) = (geom.batch, geom.heads, geom.q_len, geom.k_len);
        let dk = d / h_n;
        let scale = F::one() / F::from_usize(dk).unwrap().sqrt();
        let mut probs = vec![F::zero(); b_n * h_n * tq * tk];
        let mut out = vec![F::zero(); b_n * tq * d];
        let mut scores = vec![F::zero(); tk];
        for b in 0..b_n {
            for h in 0..h_n {
                let off = h * dk;
                for i in 0..tq {
                    let qrow = &qs[(b * tq + i) * d + off..][..dk];
                    let mut max = F::neg_infinity();
                    for j in 0..tk {
                        if geom.visible(b, i, j) {
                            let krow = &ks[(b * tk + j) * d + off..][..dk];
                            let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<F>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = F::neg_infinity();
                        }
                    }
                    if max == F::neg_infinity() {
                        continue;
                    }
                    let prow = &mut probs[((b * h_n + h) * tq + i) * tk..][..tk];
                    let mut sum = F::zero();
                    for j in 0..tk {
                        let e = if scores[j] == F::neg_infinity() {
                            F::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        prow[j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(b * tq + i) * d + off..][..dk];
                    for j in 0..tk {
                        prow[j] /= sum;
                        let p = prow[j];
                        if p != F::zero() {
                            let vrow = &vs[(b * tk + j) * d + off..][..dk];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![b_n * tq, d], out)?;
        Ok(self.push_op(
            t,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Grads {
            node_grads: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates a contribution into the gradient slot of `v`.
        let acc = |grads: &mut [Option<Vec<F>>], v: Var, contrib: &dyn Fn(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &|s| {
                    for ((s, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                });
                acc(grads, *b, &|s| {
                    for ((s, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|s| {
                for (s, &gi) in s.iter_mut().zip(g) {
                    *s += gi * *c;
                }
            }),
            Op::AddRow(x, bias) => {
                acc(grads, *x, &|s| add_into(s, g));
                let n = self.shape(*bias)[0];
                acc(grads, *bias, &|s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &|s| gemm(m, n, k, g, false, bv, true, s, true));
                acc(grads, *b, &|s| gemm(k, m, n, av, true, g, false, s, true));
            }
            Op::Transpose(a) => {
                let s0 = self.shape(*a);
                let (m, n) = (s0[0], s0[1]);
                acc(grads, *a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(grads, *a, &|s| add_into(s, g)),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    acc(grads, v, &|s| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..][..n * inner];
                            add_into(&mut s[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    start += n;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(grads, *a, &|s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > F::zero() {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(grads, *input, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum::<F>();
                            for j in 0..n {
                                s[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gain)[0];
                let rows = rstd.len();
                let gv = self.data(*gain);
                acc(grads, *gain, &|s| {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(grads, *bias, &|s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
                let nf = F::from_usize(n).unwrap();
                acc(grads, *input, &|s| {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_gh = F::zero();
                        let mut mean_ghx = F::zero();
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh /= nf;
                        mean_ghx /= nf;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            s[r * n + j] += rstd[r] * (gh - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(grads, *table, &|s| {
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut s[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Dropout { input, mask } => acc(grads, *input, &|s| {
                for ((s, &gi), &m) in s.iter_mut().zip(g).zip(mask) {
                    *s += gi * m;
                }
            }),
            Op::Sum(a) => acc(grads, *a, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad_id,
                probs,
                count,
            } => {
                let vocab = *self.shape(*logits).last().unwrap();
                let vf = F::from_usize(vocab).unwrap();
                let scale = g[0] / F::from_usize(*count).unwrap();
                let uniform = *smoothing / vf;
                acc(grads, *logits, &|s| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == t as usize {
                                q += F::one() - *smoothing;
                            }
                            s[r * vocab + j] += (probs[r * vocab + j] - q) * scale;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, geom, probs, grads, &wants);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeometry,
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
        wants: &dyn Fn(Var) -> bool,
    ) {
        let d = self.shape(q)[1];
        let (b_n, h_n, tq, tk) = (geom.batch, geom.heads, geom.q_len, geom.k_len);
        let dk = d / h_n;
        let scale = F::one() / F::from_usize(dk).unwrap().sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![F::zero(); qs.len()];
        let mut gk = vec![F::zero(); ks.len()];
        let mut gv = vec![F::zero(); vs.len()];
        let mut dp = vec![F::zero(); tk];
        for b in 0..b_n {
            for h in 0..h_n {
                let off = h * dk;
                for i in 0..tq {
                    let prow = &probs[((b * h_n + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * d + off..][..dk];
                    let mut dot = F::zero();
                    for j in 0..tk {
                        let p = prow[j];
                        if p == F::zero() {
                            dp[j] = F::zero();
                            continue;
                        }
                        let vrow = &vs[(b * tk + j) * d + off..][..dk];
                        dp[j] = grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum::<F>();
                        dot += p * dp[j];
                        let gvrow = &mut gv[(b * tk + j) * d + off..][..dk];
                        for (s, &gg) in gvrow.iter_mut().zip(grow) {
                            *s += p * gg;
                        }
                    }
                    let qrow = &qs[(b * tq + i) * d + off..][..dk];
                    for j in 0..tk {
                        let p = prow[j];
                        if p == F::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let krow = &ks[(b * tk + j) * d + off..][..dk];
                        let gqrow = &mut gq[(b * tq + i) * d + off..][..dk];
                        for (s, &kk) in gqrow.iter_mut().zip(krow) {
                            *s += ds * kk;
                        }
                        let gkrow = &mut gk[(b * tk + j) * d + off..][..dk];
                        for (s, &qq) in gkrow.iter_mut().zip(qrow) {
                            *s += ds * qq;
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
            if !wants(var) {
                continue;
            }
            match grads[var.0].as_mut() {
                Some(slot) => add_into(slot, &contrib),
                None => grads[var.0] = Some(contrib),
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads<F> {
    node_grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Float> Grads<F> {
    /// Gradient of a node, `None` when it does not require grad or is unreachable.
    pub fn of(&self, v: Var) -> Option<&[F]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.of(*v))
    }

    /// Every bound parameter that received a gradient, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.of(*v).map(|g| (*id, g)))
    }
}

/// Row-wise log-softmax of a `[rows×cols]` buffer.
pub fn log_softmax_rows<F: Float>(x: &[F], cols: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
