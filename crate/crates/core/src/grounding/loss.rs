//! Symmetric InfoNCE and the off-diagonal diversity penalty, both as plain
//! f64 reference functions over an [`EmbeddingBatch`] and as graph ops for
//! training.

use gpla_tensor::{Graph, Scalar, Var};

use crate::error::{CoreError, Result};

/// `n` paired rows of unit-norm embeddings; row `i` of `va` pairs with row
/// `i` of `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub n: usize,
    pub d: usize,
    pub va: Vec<f64>,
    pub t: Vec<f64>,
}

impl EmbeddingBatch {
    /// Validates shapes and unit norms (±1e-5).
    pub fn new(va: &[Vec<f64>], t: &[Vec<f64>]) -> Result<Self> {
        if va.len() != t.len() || va.is_empty() {
            return Err(CoreError::Contract(format!(
                "{} VA rows vs {} text rows",
                va.len(),
                t.len()
            )));
        }
        let d = va[0].len();
        for (i, r) in va.iter().chain(t).enumerate() {
            if r.len() != d {
                return Err(CoreError::Contract(format!(
                    "row {i} has width {} (expected {d})",
                    r.len()
                )));
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(CoreError::Contract(format!(
                    "row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            n: va.len(),
            d,
            va: va.concat(),
            t: t.concat(),
        })
    }

    pub fn from_f32(va: &[Vec<f32>], t: &[Vec<f32>]) -> Result<Self> {
        let up = |rows: &[Vec<f32>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|v| *v as f64).collect())
                .collect()
        };
        Self::new(&up(va), &up(t))
    }

    pub fn swapped(&self) -> Self {
        Self {
            n: self.n,
            d: self.d,
            va: self.t.clone(),
            t: self.va.clone(),
        }
    }

    fn row(m: &[f64], d: usize, i: usize) -> &[f64] {
        &m[i * d..(i + 1) * d]
    }

    /// `a_i · b_j` over all pairs, row-major `[n, n]`.
    pub fn sim(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = Self::row(a, d, i)
                    .iter()
                    .zip(Self::row(b, d, j))
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        s
    }
}

fn row_nll(logits: &[f64], n: usize, transpose: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let at = |j: usize| {
            if transpose {
                logits[j * n + i]
            } else {
                logits[i * n + j]
            }
        };
        let max = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..n).map(|j| (at(j) - max).exp()).sum::<f64>().ln();
        total += lse - at(i);
    }
    total / n as f64
}

/// `½ (L_VA→T + L_T→VA)` with logits `sim / τ`, each direction averaged
/// over the batch rows.
pub fn contrastive_loss(batch: &EmbeddingBatch, tau: f64) -> Result<f64> {
    if batch.n < 2 {
        return Err(CoreError::Contract(
            "contrastive loss needs at least two pairs".into(),
        ));
    }
    contrastive_loss_sim(&batch.sim(&batch.va, &batch.t), batch.n, tau)
}

/// [`contrastive_loss`] from a precomputed `[n, n]` similarity matrix
/// (`sim[i][j] = va_i · t_j`).
pub fn contrastive_loss_sim(sim: &[f64], n: usize, tau: f64) -> Result<f64> {
    if n < 2 || sim.len() != n * n {
        return Err(CoreError::Contract(format!(
            "need an n×n similarity matrix with n ≥ 2, got {} entries",
            sim.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(CoreError::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits: Vec<f64> = sim.iter().map(|s| s / tau).collect();
    Ok(0.5 * (row_nll(&logits, n, false) + row_nll(&logits, n, true)))
}

/// Mean of positive off-diagonal similarities, summed over both modalities.
pub fn diversity_loss(batch: &EmbeddingBatch) -> Result<f64> {
    let n = batch.n;
    if n < 2 {
        return Err(CoreError::Contract(
            "diversity loss needs at least two rows".into(),
        ));
    }
    let off = |s: Vec<f64>| -> f64 {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| s[i * n + j].max(0.0))
            .sum()
    };
    let total = off(batch.sim(&batch.va, &batch.va)) + off(batch.sim(&batch.t, &batch.t));
    Ok(total / (n * (n - 1)) as f64)
}

/// Mean positive off-diagonal cosine similarity within one modality.
pub fn mean_positive_offdiag(rows: &[Vec<f32>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let s: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum();
                total += s.max(0.0);
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Fraction of text queries whose highest-similarity VA row is their own pair.
pub fn text_to_va_top1(batch: &EmbeddingBatch) -> f64 {
    let n = batch.n;
    let s = batch.sim(&batch.t, &batch.va);
    let hits = (0..n)
        .filter(|&i| {
            let row = &s[i * n..(i + 1) * n];
            // ties resolve to the lowest index, which only counts when it is i
            let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    hits as f64 / n as f64
}

/// Graph InfoNCE. `va`, `t` are `[n, d]` unit rows; `scale` is `[1,1]` (1/τ).
pub fn contrastive_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    va: Var,
    t: Var,
    scale: Var,
) -> Result<Var> {
    let n = g.shape(va)[0];
    if n < 2 {
        return Err(CoreError::Contract(
            "contrastive loss needs at least two pairs".into(),
        ));
    }
    let s = g.matmul_nt(va, t)?;
    let logits = g.mul_scalar(s, scale)?;
    let diag: Vec<usize> = (0..n).collect();
    let lp_rows = g.log_softmax(logits)?;
    let pos_rows = g.pick(lp_rows, &diag)?;
    let l_va = g.mean(pos_rows);
    let lt = g.transpose(logits)?;
    let lp_cols = g.log_softmax(lt)?;
    let pos_cols = g.pick(lp_cols, &diag)?;
    let l_t = g.mean(pos_cols);
    let both = g.add(l_va, l_t)?;
    Ok(g.scale(both, T::from_f64_lossy(-0.5)))
}

fn offdiag_relu_sum<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let n = g.shape(e)[0];
    let s = g.matmul_nt(e, e)?;
    let r = g.relu(s);
    let total = g.sum(r);
    let diag: Vec<usize> = (0..n).collect();
    let d = g.pick(r, &diag)?;
    let dsum = g.sum(d);
    Ok(g.sub(total, dsum)?)
}

pub fn diversity_loss_graph<T: Scalar>(g: &mut Graph<T>, va: Var, t: Var) -> Result<Var> {
    let n = g.shape(va)[0];
    if n < 2 {
        return Err(CoreError::Contract(
            "diversity loss needs at least two rows".into(),
        ));
    }
    let a = offdiag_relu_sum(g, va)?;
    let b = offdiag_relu_sum(g, t)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / (n * (n - 1)) as f64)))
}

/// `L_C + γ_div · L_div`, returning `(total, l_c, l_div)`.
pub fn grounding_objective<T: Scalar>(
    g: &mut Graph<T>,
    va: Var,
    t: Var,
    scale: Var,
    gamma_div: f64,
) -> Result<(Var, Var, Var)> {
    let lc = contrastive_loss_graph(g, va, t, scale)?;
    let ld = diversity_loss_graph(g, va, t)?;
    let weighted = g.scale(ld, T::from_f64_lossy(gamma_div));
    let total = g.add(lc, weighted)?;
    Ok((total, lc, ld))
}
