//! Parameterized layers. Layers hold only [`ParamId`]s; values live in a
//! [`ParamStore`], so one layer definition runs at any [`Scalar`] precision.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::{self, AttnSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(
            store,
            name,
            fan_in,
            fan_out,
            1.0 / (fan_in as f64).sqrt(),
            rng,
        )
    }

    /// Uniform(-bound, bound) weights, zero bias.
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound, rng);
        let bias = store.add_full(&format!("{name}.bias"), &[fan_out], 0.0);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Graph-free forward over `rows` rows of `x`.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let mut out = kernels::matmul(x, w, rows, self.fan_in, self.fan_out, false, false);
        for r in 0..rows {
            for (o, bv) in out[r * self.fan_out..(r + 1) * self.fan_out]
                .iter_mut()
                .zip(b)
            {
                *o += *bv;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(&format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_full(&format!("{name}.beta"), &[dim], 0.0),
            dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let (mut y, _, _) = kernels::layer_norm_rows(x, rows, self.dim);
        let gm = store.value(self.gamma).data();
        let bt = store.value(self.beta).data();
        for (i, v) in y.iter_mut().enumerate() {
            *v = *v * gm[i % self.dim] + bt[i % self.dim];
        }
        y
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            dim.is_multiple_of(heads),
            "model dim {dim} not divisible by {heads} heads"
        );
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `x` is `[batch*seq, dim]`; masking is carried by `spec`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        spec: &AttnSpec,
    ) -> Result<Var> {
        let mut spec = spec.clone();
        spec.heads = self.heads;
        let h = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let q = g.slice_cols(qkv, 0, self.dim)?;
        let k = g.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = g.attention(q, k, v, spec)?;
        let a = self.proj.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }

    /// Graph-free forward, identical arithmetic to [`Self::forward`].
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], spec: &AttnSpec) -> Vec<T> {
        let rows = spec.batch * spec.seq;
        let mut spec = spec.clone();
        spec.heads = self.heads;
        let d = self.dim;
        let h = self.ln1.apply(store, x, rows);
        let qkv = self.qkv.apply(store, &h, rows);
        let split = |off: usize| -> Vec<T> {
            (0..rows)
                .flat_map(|r| qkv[r * 3 * d + off..r * 3 * d + off + d].iter().copied())
                .collect()
        };
        let (q, k, v) = (split(0), split(d), split(2 * d));
        let (a, _) = kernels::attention(&q, &k, &v, d, &spec);
        let a = self.proj.apply(store, &a, rows);
        let x: Vec<T> = x.iter().zip(&a).map(|(p, q)| *p + *q).collect();
        let h = self.ln2.apply(store, &x, rows);
        let h: Vec<T> = self
            .fc1
            .apply(store, &h, rows)
            .into_iter()
            .map(kernels::gelu)
            .collect();
        let h = self.fc2.apply(store, &h, rows);
        x.iter().zip(&h).map(|(p, q)| *p + *q).collect()
    }
}
