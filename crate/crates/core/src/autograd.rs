//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends a node holding its value and enough saved state to
//! run its backward rule. Nodes are appended in evaluation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Leaves may borrow their values (frozen weights, parameters that are only
//! read during a step) or own them. Only leaves created with
//! `requires_grad = true` ever receive a gradient buffer.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{dot, gemm, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Vec<f64>),
    AddConst(usize),
    Sum(usize),
    Mean(usize),
    Silu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: usize,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    L1 {
        pred: usize,
        target: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    Concat(Vec<usize>),
    Slice {
        a: usize,
        offset: usize,
    },
    Reshape(usize),
    Index {
        a: usize,
        idx: Vec<usize>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A gradient tape. Single-threaded; build one per forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf borrowing `t`. The tensor must outlive the tape.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Leaf owning its value.
    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_owned(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Accumulated gradient of a leaf, if a backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(op, s, &[])),
        }
    }

    // ---------------------------------------------------------------------
    // primitives
    // ---------------------------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a.0, b.0), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`; the layout of `x · Wᵀ` for weights stored out×in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMulNt(a.0, b.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// Adds a length-`n` row vector to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.nodes[row.0].value.len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let rg = self.rg(&[a.0, row.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddRow(a.0, row.0), rg))
    }

    /// `x · wᵀ + b` for `x[m,in]`, `w[out,in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a.0]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(a.0, c), rg)
    }

    /// Elementwise product with a constant (dropout masks, per-element scales).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[c.len()]));
        }
        let out: Vec<f64> = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::MulConst(a.0, c), rg))
    }

    /// Elementwise sum with a constant (noise, per-element offsets).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("add_const", self.shape(a), &[c.len()]));
        }
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddConst(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![], Cow::Owned(vec![s]), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a.0]);
        self.push(vec![], Cow::Owned(vec![s]), Op::Mean(a.0), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(&[a.0]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Silu(a.0), rg)
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Causal multi-head self-attention over `batch` sequences of length
    /// `seq`. `q`, `k`, `v` are `[batch·seq, d]` with heads laid out as
    /// contiguous column blocks; scores are scaled by `1/√(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.matrix(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &[n, d], &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = (b * seq + i) * d + col;
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[pbase + i * seq + j] = p;
                        let vj = &vv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        for t in 0..dh {
                            out[orow + t] += p * vj[t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            vec![n, d],
            Cow::Owned(out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a `[rows, w]` table; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, w) = self.matrix(table, "gather_rows")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            vec![idx.len(), w],
            Cow::Owned(out),
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n, vocab]`. `None` targets are masked out of the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vocab) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", &[n, vocab], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: every target is masked".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            total += -(row[t] - max - z.ln());
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![total / count as f64]),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(shape_err("l1_loss", self.shape(pred), &[target.len()]));
        }
        let s = pv.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pv.len() as f64;
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![s]),
            Op::L1 {
                pred: pred.0,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates `[m, w_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = self.matrix(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pw) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![m, total], Cow::Owned(out), Op::ConcatCols(ids), rg))
    }

    /// Flat concatenation in row-major order, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: Vec<usize>) -> Result<Var> {
        let total: usize = parts.iter().map(|p| self.value(*p).len()).sum();
        if shape.iter().product::<usize>() != total {
            return Err(shape_err("concat", &shape, &[total]));
        }
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(shape, Cow::Owned(out), Op::Concat(ids), rg))
    }

    /// Contiguous flat range `[offset, offset + numel(shape))` of `a`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        let av = self.value(a);
        if offset + len > av.len() {
            return Err(shape_err("slice", self.shape(a), &[offset, len]));
        }
        let out = av[offset..offset + len].to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape, Cow::Owned(out), Op::Slice { a: a.0, offset }, rg))
    }

    /// Flat gather: `out[i] = a[idx[i]]`. Indices may repeat.
    pub fn index(&mut self, a: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(shape_err("index", &[idx.len()], &shape));
        }
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.len()) {
            return Err(Error::Index {
                what: "index",
                index: bad,
                bound: av.len(),
            });
        }
        let out: Vec<f64> = idx.iter().map(|&i| av[i]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape, Cow::Owned(out), Op::Index { a: a.0, idx }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape(a.0), rg))
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of `requires_grad`
    /// leaves accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = g[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.grads[id] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gout),
                }
                continue;
            }
            self.propagate(id, &gout, &mut g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_ref();

        fn acc<'g>(g: &'g mut [Option<Vec<f64>>], i: usize, len: usize) -> &'g mut [f64] {
            g[i].get_or_insert_with(|| vec![0.0; len])
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if wants(*a) {
                    gemm_nt(gout, val(*b), acc(g, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn(val(*a), gout, acc(g, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[0];
                if wants(*a) {
                    gemm(gout, val(*b), acc(g, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn(gout, val(*a), acc(g, *b, n * k), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if wants(i) {
                        let dst = acc(g, i, gout.len());
                        dst.iter_mut().zip(gout).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    let dst = acc(g, *a, gout.len());
                    dst.iter_mut().zip(gout).for_each(|(d, s)| *d += s);
                }
                if wants(*b) {
                    let dst = acc(g, *b, gout.len());
                    dst.iter_mut().zip(gout).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let dst = acc(g, *a, gout.len());
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let dst = acc(g, *b, gout.len());
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    let dst = acc(g, *a, gout.len());
                    dst.iter_mut().zip(gout).for_each(|(d, s)| *d += s);
                }
                if wants(*row) {
                    let n = val(*row).len();
                    let dst = acc(g, *row, n);
                    for (i, s) in gout.iter().enumerate() {
                        dst[i % n] += s;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let dst = acc(g, *a, gout.len());
                    dst.iter_mut().zip(gout).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    let dst = acc(g, *a, gout.len());
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * c[i];
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if wants(*a) {
                    let dst = acc(g, *a, gout.len());
                    dst.iter_mut().zip(gout).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    acc(g, *a, n).iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    let s = gout[0] / n as f64;
                    acc(g, *a, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let dst = acc(g, *a, gout.len());
                    for i in 0..gout.len() {
                        let s = sigmoid(av[i]);
                        dst[i] += gout[i] * (s * (1.0 + av[i] * (1.0 - s)));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = val(*gain).len();
                let rows = xhat.len() / n;
                if wants(*gain) {
                    let dst = acc(g, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            dst[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let dst = acc(g, *bias, n);
                    for r in 0..rows {
                        for j in 0..n {
                            dst[j] += gout[r * n + j];
                        }
                    }
                }
                if wants(*x) {
                    let gv = val(*gain);
                    let dst = acc(g, *x, rows * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let d = gout[r * n + j] * gv[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[r * n + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            dst[r * n + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let n = batch * seq;
                let d = nodes[*q].shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gi = &gout[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + seq];
                            let mut rowdot = 0.0;
                            for j in 0..=i {
                                let vj = &vv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                                dp[j] = dot(gi, vj);
                                rowdot += dp[j] * prow[j];
                                let dvj = (b * seq + j) * d + col;
                                for t in 0..dh {
                                    dv[dvj + t] += prow[j] * gi[t];
                                }
                            }
                            let qrow = (b * seq + i) * d + col;
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - rowdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + j) * d + col;
                                for t in 0..dh {
                                    dq[qrow + t] += ds * kv[krow + t];
                                    dk[krow + t] += ds * qv[qrow + t];
                                }
                            }
                        }
                    }
                }
                for (i, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(i) {
                        let dst = acc(g, i, n * d);
                        dst.iter_mut().zip(&buf).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gather { table, idx } => {
                if wants(*table) {
                    let len = val(*table).len();
                    let w = nodes[*table].shape[1];
                    let dst = acc(g, *table, len);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            dst[i * w + j] += gout[r * w + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let vocab = nodes[*logits].shape[1];
                    let s = gout[0] / *count as f64;
                    let dst = acc(g, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            dst[r * vocab + j] += s * probs[r * vocab + j];
                        }
                        dst[r * vocab + t] -= s;
                    }
                }
            }
            Op::L1 { pred, target } => {
                if wants(*pred) {
                    let pv = val(*pred);
                    let s = gout[0] / pv.len() as f64;
                    let dst = acc(g, *pred, pv.len());
                    for i in 0..pv.len() {
                        let d = pv[i] - target[i];
                        if d > 0.0 {
                            dst[i] += s;
                        } else if d < 0.0 {
                            dst[i] -= s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = nodes[id].shape[0];
                let total = nodes[id].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].shape[1];
                    if wants(p) {
                        let dst = acc(g, p, m * w);
                        for r in 0..m {
                            for j in 0..w {
                                dst[r * w + j] += gout[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        let dst = acc(g, p, len);
                        dst.iter_mut()
                            .zip(&gout[off..off + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    off += len;
                }
            }
            Op::Slice { a, offset } => {
                if wants(*a) {
                    let len = val(*a).len();
                    let dst = acc(g, *a, len);
                    dst[*offset..*offset + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Index { a, idx } => {
                if wants(*a) {
                    let len = val(*a).len();
                    let dst = acc(g, *a, len);
                    for (&i, s) in idx.iter().zip(gout) {
                        dst[i] += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x` for every coordinate.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::normal([3, 2], 1.0, &mut rng());
        let mut t = Tape::new();
        let xv = t.leaf(&x, true);
        let l = t.sum(xv);
        t.backward(l).unwrap();
        assert!(t.grad(xv).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_square_gradient_is_x() {
        let x = Tensor::normal([4], 1.0, &mut rng());
        let mut t = Tape::new();
        let xv = t.leaf(&x, true);
        let sq = t.mul(xv, xv).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l).unwrap();
        assert_eq!(t.grad(xv).unwrap().data(), x.data());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::normal([3], 1.0, &mut rng());
        let mut t = Tape::new();
        let xv = t.leaf(&x, true);
        let l = t.sum(xv);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(xv).unwrap().data().iter().all(|&g| g == 2.0));
        t.zero_grad();
        assert!(t.grad(xv).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros([2]);
        let mut t = Tape::new();
        let xv = t.leaf(&x, true);
        assert!(matches!(t.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut r = rng();
        let w = Tensor::normal([3, 3], 1.0, &mut r);
        let x = Tensor::normal([2, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let wv = t.leaf(&w, false);
        let xv = t.leaf(&x, true);
        let y = t.matmul_nt(xv, wv).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(wv).is_none());
        assert!(t.grad(xv).is_some());
    }

    #[test]
    fn unreachable_leaves_are_untouched() {
        let mut r = rng();
        let a = Tensor::normal([3], 1.0, &mut r);
        let b = Tensor::normal([3], 1.0, &mut r);
        let mut t = Tape::new();
        let av = t.leaf(&a, true);
        let bv = t.leaf(&b, true);
        let la = t.sum(av);
        let _lb = t.sum(bv);
        t.backward(la).unwrap();
        assert!(t.grad(bv).is_none());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::normal([3, 4], 1.0, &mut r);
        let b = Tensor::normal([4, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let av = t.leaf(&a, true);
        let bv = t.leaf(&b, true);
        let c = t.matmul(av, bv).unwrap();
        let l = t.sum(c);
        t.backward(l).unwrap();
        let ga = t.grad(av).unwrap();
        let gb = t.grad(bv).unwrap();
        let fa = numeric_grad(&a, &|x| x.matmul(&b).unwrap().data().iter().sum());
        let fb = numeric_grad(&b, &|x| a.matmul(x).unwrap().data().iter().sum());
        for (x, y) in ga.data().iter().zip(&fa).chain(gb.data().iter().zip(&fb)) {
            assert!(rel_err(*x, *y) < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn silu_values() {
        let x = Tensor::new([3], vec![0.0, 1.0, 40.0]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(&x, false);
        let y = t.silu(xv);
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((v[2] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let x = Tensor::new([2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap();
        let g = Tensor::filled([2], 1.0);
        let b = Tensor::zeros([2]);
        let mut t = Tape::new();
        let (xv, gv, bv) = (t.leaf(&x, false), t.leaf(&g, false), t.leaf(&b, false));
        let y = t.layer_norm(xv, gv, bv, 1e-5).unwrap();
        let v = t.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[2] - expect).abs() < 1e-15 && (v[3] + expect).abs() < 1e-15);
        assert!((v[2] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::new();
        let uniform = t.constant(Tensor::zeros([1, 8]));
        let l = t.cross_entropy(uniform, &[Some(3)]).unwrap();
        assert!((t.value(l)[0] - 8f64.ln()).abs() < 1e-14);

        let two = t.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        let l = t.cross_entropy(two, &[Some(0)]).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((t.value(l)[0] - want).abs() < 1e-14);
        assert!((want - 0.126_928).abs() < 1e-6);

        let sat = t.constant(Tensor::new([1, 3], vec![1e3, 0.0, 0.0]).unwrap());
        let l = t.cross_entropy(sat, &[Some(0)]).unwrap();
        assert!(t.value(l)[0] < 1e-300);
    }

    #[test]
    fn cross_entropy_masks_and_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 4]));
        assert!(matches!(
            t.cross_entropy(x, &[Some(4), None]),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            t.cross_entropy(x, &[None, None]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 4]));
        assert!(t.gather_rows(x, &[0, 2]).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"));
        let c = t.constant(Tensor::zeros([3]));
        assert!(t.add(a, c).is_err());
    }
}
