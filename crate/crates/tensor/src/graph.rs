//! Define-by-run reverse-mode differentiation.
//!
//! Each forward pass records its nodes in a [`Graph`]; values are computed
//! eagerly and each node keeps just enough state for its backward rule.
//! Tensors are treated as matrices (`dims2`); a rank-1 tensor is one row.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, AttnSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanPool {
        x: Var,
        weights: Vec<T>,
        batch: usize,
        seq: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Reshape(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. }
        | Op::Add { a, b, .. }
        | Op::Sub { a, b }
        | Op::Mul { a, b, .. } => vec![*a, *b],
        Op::MulScalar { x, s } => vec![*x, *s],
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::AddConst(x)
        | Op::Gelu(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Exp(x)
        | Op::LogSigmoid(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x) => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::MeanPool { x, .. }
        | Op::SliceCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Pick { x, .. }
        | Op::L2Normalize { x, .. } => vec![*x],
        Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Constant input (no gradient flows into the caller's data).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Input whose gradient is tracked; used by gradient checks on raw ops.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Input);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape.to_vec(), data)?))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.input(Tensor::scalar(v))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n, false, false);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
        ))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n, false, true);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = kernels::transpose(self.data(x), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let (r, c) = self.dims(a);
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<T> = if broadcast {
            (0..r * c).map(|i| ad[i] + bd[i % c]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| *x + *y).collect()
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b, broadcast }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }))
    }

    /// Elementwise product; `b` may also be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let (r, c) = self.dims(a);
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<T> = if broadcast {
            (0..r * c).map(|i| ad[i] * bd[i % c]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| *x * *y).collect()
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b, broadcast }))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        if self.shape(a) == self.shape(b) {
            return Ok(false);
        }
        let (_, c) = self.dims(a);
        let (br, bc) = self.dims(b);
        if br == 1 && bc == c {
            Ok(true)
        } else {
            Err(shape_err(op, self.shape(a), self.shape(b)))
        }
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let x = v.as_f64();
            let y = if x >= 0.0 {
                -(-x).exp().ln_1p()
            } else {
                x - x.exp().ln_1p()
            };
            T::from_f64_lossy(y)
        });
        self.push(out, Op::LogSigmoid(x))
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = kernels::softmax_rows(self.data(x), r, c);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = kernels::log_softmax_rows(self.data(x), r, c);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x)))
    }

    /// Row-wise layer norm with affine `gamma`, `beta` (each one row of width `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xhat, _, rstd) = kernels::layer_norm_rows(self.data(x), r, c);
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = (0..r * c).map(|i| xhat[i] * g[i % c] + b[i % c]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = row
                .iter()
                .map(|v| {
                    let f = v.as_f64();
                    f * f
                })
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = T::from_f64_lossy(v.as_f64() / n);
            }
            norms.push(T::from_f64_lossy(n));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, norms }))
    }

    // ---- indexing -------------------------------------------------------

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!(
                "embedding id {bad} out of range {v}"
            )));
        }
        let td = self.data(table);
        let out: Vec<T> = ids
            .iter()
            .flat_map(|&i| td[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows.iter().any(|&i| i >= r) || rows.is_empty() {
            return Err(TensorError::Contract(format!("row index out of range {r}")));
        }
        let xd = self.data(x);
        let out: Vec<T> = rows
            .iter()
            .flat_map(|&i| xd[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `out[i] = x[i, cols[i]]`, shape `[rows, 1]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(shape_err("pick", self.shape(x), &[cols.len()]));
        }
        let xd = self.data(x);
        let out: Vec<T> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| xd[i * c + j])
            .collect();
        Ok(self.push(
            Tensor::new(vec![r, 1], out)?,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let xd = self.data(x);
        let out: Vec<T> = (0..r)
            .flat_map(|i| xd[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.dims(xs[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, cc) = self.dims(x);
            if cc != c {
                return Err(shape_err("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            out.extend_from_slice(self.data(x));
            rows += r;
        }
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(xs.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.dims(xs[0]).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rr, c) = self.dims(x);
            if rr != r {
                return Err(shape_err("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(xs.to_vec()),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: f64 = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(x))
    }

    /// Mean over each sequence of `seq` rows, skipping rows whose mask is
    /// `false`. `x` is `[batch*seq, d]`; returns `[batch, d]`.
    pub fn mean_pool(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (r, d) = self.dims(x);
        if r != batch * seq || mask.is_some_and(|m| m.len() != r) {
            return Err(shape_err("mean_pool", self.shape(x), &[batch, seq]));
        }
        let mut weights = vec![T::zero(); r];
        for b in 0..batch {
            let valid: Vec<usize> = (0..seq)
                .filter(|&t| mask.is_none_or(|m| m[b * seq + t]))
                .collect();
            if valid.is_empty() {
                return Err(TensorError::Contract(
                    "mean_pool over an all-padding sequence".into(),
                ));
            }
            let w = T::from_f64_lossy(1.0 / valid.len() as f64);
            for t in valid {
                weights[b * seq + t] = w;
            }
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            for t in 0..seq {
                let w = weights[b * seq + t];
                if w == T::zero() {
                    continue;
                }
                let row = &xd[(b * seq + t) * d..(b * seq + t + 1) * d];
                for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += w * *v;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, d], out)?,
            Op::MeanPool {
                x,
                weights,
                batch,
                seq,
            },
        ))
    }

    // ---- attention ------------------------------------------------------

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (r, d) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if r != spec.batch * spec.seq || d % spec.heads != 0 {
            return Err(shape_err(
                "attention",
                self.shape(q),
                &[spec.batch, spec.seq, spec.heads],
            ));
        }
        if spec.key_mask.as_ref().is_some_and(|m| m.len() != r) {
            return Err(TensorError::Contract("key mask length".into()));
        }
        let (out, probs) = kernels::attention(self.data(q), self.data(k), self.data(v), d, &spec);
        Ok(self.push(
            Tensor::new(vec![r, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from scalar `loss`, accumulating parameter gradients
    /// into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_inner(loss, Some(store))
    }

    /// Back-propagates without a parameter store (node gradients only).
    pub fn backward_nodes(&mut self, loss: Var) -> Result<()> {
        self.backward_inner(loss, None)
    }

    fn backward_inner(&mut self, loss: Var, mut store: Option<&mut ParamStore<T>>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            if let (Op::Param(id), Some(store)) = (&self.nodes[idx].op, store.as_deref_mut()) {
                for (pg, v) in store.get_mut(*id).grad.iter_mut().zip(&g) {
                    *pg += *v;
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = node.value.dims2().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                // dA = G @ B^T (or G @ B when b is stored transposed)
                acc(*a, &mut |ga| {
                    kernels::matmul_into(g, bd, ga, m, n, k, false, !*trans_b, true)
                });
                if *trans_b {
                    // b stored [n,k]: dB = G^T @ A
                    acc(*b, &mut |gb| {
                        kernels::matmul_into(g, ad, gb, n, m, k, true, false, true)
                    });
                } else {
                    acc(*b, &mut |gb| {
                        kernels::matmul_into(ad, g, gb, k, m, n, true, false, true)
                    });
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                let gt = kernels::transpose(g, c, r);
                acc(*x, &mut |gx| add_into(gx, &gt));
            }
            Op::Add { a, b, broadcast } => {
                acc(*a, &mut |ga| add_into(ga, g));
                let c = self.dims(*b).1;
                acc(*b, &mut |gb| {
                    if *broadcast {
                        for (i, v) in g.iter().enumerate() {
                            gb[i % c] += *v;
                        }
                    } else {
                        add_into(gb, g);
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y)
                });
            }
            Op::Mul { a, b, broadcast } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let c = self.dims(*b).1;
                acc(*a, &mut |ga| {
                    for (i, v) in g.iter().enumerate() {
                        let bv = if *broadcast { bd[i % c] } else { bd[i] };
                        ga[i] += *v * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        let j = if *broadcast { i % c } else { i };
                        gb[j] += *v * ad[i];
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * sv)
                });
                let ds: f64 = g.iter().zip(xd).map(|(a, b)| (*a * *b).as_f64()).sum();
                acc(*s, &mut |gs| gs[0] += T::from_f64_lossy(ds));
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * *c)
            }),
            Op::AddConst(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        *a += *b * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((a, b), t) in gx.iter_mut().zip(g).zip(y) {
                        *a += *b * (T::one() - *t * *t);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        if *v > T::zero() {
                            *a += *b;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((a, b), e) in gx.iter_mut().zip(g).zip(y) {
                        *a += *b * *e;
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        *a += *b * T::from_f64_lossy(sigmoid(-v.as_f64()));
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, c) = self.dims(*x);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| (*a * *b).as_f64())
                            .sum();
                        let dot = T::from_f64_lossy(dot);
                        for j in row {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.dims(*x);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let gs = T::from_f64_lossy(g[row.clone()].iter().map(|v| v.as_f64()).sum());
                        for j in row {
                            gx[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.dims(*x);
                let gam = self.data(*gamma);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xhat = 0.0f64;
                        for j in row.clone() {
                            let dy = (g[j] * gam[j - i * c]).as_f64();
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[j].as_f64();
                        }
                        let rs = rstd[i].as_f64();
                        let n = c as f64;
                        for j in row {
                            let dy = (g[j] * gam[j - i * c]).as_f64();
                            let v = rs * (dy - sum_dy / n - xhat[j].as_f64() * sum_dy_xhat / n);
                            gx[j] += T::from_f64_lossy(v);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += *v * xhat[i];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += *v;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table).1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = self.dims(*x).1;
                acc(*x, &mut |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Pick { x, cols } => {
                let c = self.dims(*x).1;
                acc(*x, &mut |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.dims(*x).1;
                let (r, len) = node.value.dims2();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &mut |gx| add_into(gx, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = node.value.dims2();
                let mut col = 0;
                for &x in xs {
                    let w = self.dims(x).1;
                    acc(x, &mut |gx| {
                        for i in 0..r {
                            add_into(
                                &mut gx[i * w..(i + 1) * w],
                                &g[i * total + col..i * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = T::from_f64_lossy(1.0 / self.value(*x).len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] * n));
            }
            Op::MeanPool {
                x,
                weights,
                batch,
                seq,
            } => {
                let d = self.dims(*x).1;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let w = weights[b * seq + t];
                            if w == T::zero() {
                                continue;
                            }
                            let row = (b * seq + t) * d;
                            for j in 0..d {
                                gx[row + j] += w * g[b * d + j];
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let (r, c) = self.dims(*x);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| (*a * *b).as_f64())
                            .sum();
                        let inv = 1.0 / norms[i].as_f64();
                        for j in row {
                            gx[j] += T::from_f64_lossy((g[j].as_f64() - y[j].as_f64() * dot) * inv);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, g);
                acc(*q, &mut |gq| add_into(gq, &dq));
                acc(*k, &mut |gk| add_into(gk, &dk));
                acc(*v, &mut |gv| add_into(gv, &dv));
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let d = self.dims(q).1;
        let AttnSpec {
            batch, seq, heads, ..
        } = *spec;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let prow = &probs
                        [((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let gi = &g[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut dot = 0.0f64;
                    for j in 0..seq {
                        if prow[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = (b * seq + j) * d + off;
                        let s: T = gi.iter().zip(&vd[vj..vj + dh]).map(|(a, c)| *a * *c).sum();
                        dp[j] = s;
                        dot += (prow[j] * s).as_f64();
                        for (t, gv) in gi.iter().enumerate() {
                            dv[vj + t] += prow[j] * *gv;
                        }
                    }
                    let dot = T::from_f64_lossy(dot);
                    let qi = (b * seq + i) * d + off;
                    for j in 0..seq {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let kj = (b * seq + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] += ds * kd[kj + t];
                            dk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}
