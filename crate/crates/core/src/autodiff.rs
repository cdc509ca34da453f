//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] borrows the parameter tensors read-only; parameter leaves hold
//! an index instead of a copy. [`Graph::backward`] walks the record in reverse
//! and returns gradients for every parameter that took part in the forward.

use crate::tensor::{
    dot, gelu_grad_scalar, gelu_scalar, layernorm_raw, log_softmax_row, matmul_nt_raw, matmul_raw,
    matmul_tn_acc, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// `[heads, T, T]`, zero above the diagonal.
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        /// Row-wise softmax of the logits.
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    inputs: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of an [`Graph::input`] leaf.
    pub fn input(&self, id: NodeId) -> Option<&[f64]> {
        self.inputs.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `index`; `None` when the parameter was unused.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.params.get(index).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

fn check(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].value {
            Value::Owned(v) => v,
            Value::Param(i) => self.params[*i].data(),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("node shape matches its value")
    }

    /// Attention probabilities `[heads, T, T]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected 2-D operand, got {s:?}"))),
        }
    }

    pub fn input(&mut self, t: &Tensor) -> Result<NodeId, TensorError> {
        check("input", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input))
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        let shape = self.params[index].shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(index),
            op: Op::Param(index),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}x{k} * {k2}x{m}")));
        }
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        check("matmul", &out)?;
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n, k) = self.dims2(a, "matmul_nt")?;
        let (m, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{n}x{k} * ({m}x{k2})^T")));
        }
        let out = matmul_nt_raw(self.value(a), self.value(b), n, k, m);
        check("matmul_nt", &out)?;
        Ok(self.push(vec![n, m], out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        check("add", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// `x[n,m] + bias[m]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (_, m) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != m {
            return Err(shape_err("add_row", format!("bias length differs from {m}")));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        check("add_row", &out)?;
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        check("mul", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        check("scale", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, s)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(a).iter().sum();
        check("sum", &[s])?;
        Ok(self.push(vec![1], vec![s], Op::Sum(a)))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        check("gelu", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Gelu(a)))
    }

    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| shape_err("layernorm", "scalar input".into()))?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape_err("layernorm", "affine parameters differ from last dim".into()));
        }
        let (y, mean, rstd) = layernorm_raw(self.value(x), self.value(gain), self.value(bias), cols, eps);
        check("layernorm", &y)?;
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Selects rows `ids` of a 2-D table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.dims2(table, "gather")?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention on pre-projected `q`, `k`, `v` of shape `[T, d]`.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(shape_err("causal_attention", "q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("causal_attention", format!("{d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in &mut scores[..=i] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                for j in 0..=i {
                    prow[j] = scores[j] / z;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        check("causal_attention", &out)?;
        Ok(self.push(
            vec![t, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Mean token-level cross-entropy; returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if rows != targets.len() || rows == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: tgt,
                    bound: vocab,
                });
            }
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            log_softmax_row(&lv[r * vocab..(r + 1) * vocab], prow);
            total -= prow[tgt];
            for p in prow.iter_mut() {
                *p = p.exp();
            }
        }
        let loss = total / rows as f64;
        check("cross_entropy", &[loss])?;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::State(
                "backward called without a recorded forward graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::State("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<f64>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let g = match &node.op {
                Op::Input => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(p) => {
                    let slot = acc(&mut param_grads[*p], g.len());
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let m = self.shape(*b)[1];
                    // dA = G * B^T, dB = A^T * G
                    let da = matmul_nt_raw(&g, self.value(*b), n, m, k);
                    add_into(acc(&mut grads[a.0], n * k), &da);
                    matmul_tn_acc(self.value(*a), &g, n, k, m, acc(&mut grads[b.0], k * m));
                }
                Op::MatMulNt(a, b) => {
                    let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let m = self.shape(*b)[0];
                    // C = A B^T: dA = G * B, dB = G^T * A
                    let da = matmul_raw(&g, self.value(*b), n, m, k);
                    add_into(acc(&mut grads[a.0], n * k), &da);
                    matmul_tn_acc(&g, self.value(*a), n, m, k, acc(&mut grads[b.0], m * k));
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads[a.0], g.len()), &g);
                    add_into(acc(&mut grads[b.0], g.len()), &g);
                }
                Op::AddRow(x, bias) => {
                    let m = self.shape(*x)[1];
                    add_into(acc(&mut grads[x.0], g.len()), &g);
                    let gb = acc(&mut grads[bias.0], m);
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(acc(&mut grads[a.0], g.len()), &ga);
                    add_into(acc(&mut grads[b.0], g.len()), &gb);
                }
                Op::Scale(a, s) => {
                    let slot = acc(&mut grads[a.0], g.len());
                    for (o, v) in slot.iter_mut().zip(&g) {
                        *o += v * s;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let slot = acc(&mut grads[a.0], n);
                    for o in slot.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let slot = acc(&mut grads[a.0], g.len());
                    for ((o, gv), x) in slot.iter_mut().zip(&g).zip(av) {
                        *o += gv * gelu_grad_scalar(*x);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let cols = *self.shape(*x).last().unwrap();
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = vec![0.0; xv.len()];
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..mean.len() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            xhat[c] = (xr[c] - mean[r]) * rstd[r];
                            dxhat[c] = gr[c] * gv[c];
                            dgain[c] += gr[c] * xhat[c];
                            dbias[c] += gr[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    add_into(acc(&mut grads[x.0], dx.len()), &dx);
                    add_into(acc(&mut grads[gain.0], cols), &dgain);
                    add_into(acc(&mut grads[bias.0], cols), &dbias);
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let slot = acc(&mut grads[table.0], rows * cols);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut slot[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (t, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                            let gi = &g[i * d + off..i * d + off + dh];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let vj = &vv[j * d + off..j * d + off + dh];
                                dp[j] = dot(gi, vj);
                                weighted += prow[j] * dp[j];
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += prow[j] * x;
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[i * d + off + c] += ds * kv[j * d + off + c];
                                    dk[j * d + off + c] += ds * qv[i * d + off + c];
                                }
                            }
                        }
                    }
                    add_into(acc(&mut grads[q.0], t * d), &dq);
                    add_into(acc(&mut grads[k.0], t * d), &dk);
                    add_into(acc(&mut grads[v.0], t * d), &dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let vocab = self.shape(*logits)[1];
                    let rows = targets.len();
                    let s = g[0] / rows as f64;
                    let slot = acc(&mut grads[logits.0], rows * vocab);
                    for (r, &tgt) in targets.iter().enumerate() {
                        for c in 0..vocab {
                            let onehot = if c == tgt { 1.0 } else { 0.0 };
                            slot[r * vocab + c] += s * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
        }

        let inputs = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Input => g,
                _ => None,
            })
            .collect();
        Ok(Gradients {
            inputs,
            params: param_grads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
