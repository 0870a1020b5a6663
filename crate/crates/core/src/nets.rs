//! Encoder building blocks shared by the grounding model and the policy.
//! Everything is generic over the scalar type so gradient checks can run
//! the exact same definitions in f64.

use gpla_tensor::nn::{LayerNorm, Linear, TransformerBlock};
use gpla_tensor::{AttnSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synthenv::world::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

pub fn to_scalar<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|x| T::from_f64_lossy(*x as f64)).collect()
}

/// `blocks` pre-norm transformer blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: EncoderDims,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..dims.blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    dims.d_model,
                    dims.heads,
                    dims.mlp_ratio,
                    rng,
                )
            })
            .collect();
        Self {
            blocks,
            ln: LayerNorm::new(store, &format!("{name}.ln_f"), dims.d_model),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        spec: &AttnSpec,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x, spec)?;
        }
        Ok(self.ln.forward(g, store, x)?)
    }
}

/// Splits images into non-overlapping `patch x patch` tiles, row-major,
/// centred around zero. Output is `[batch * n_patches, patch*patch*3]`.
pub fn patchify(images: &[&Image], patch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for img in images {
        if img.height % patch != 0 || img.width % patch != 0 {
            return Err(CoreError::Contract(format!(
                "patch size {patch} does not divide image {}x{}",
                img.height, img.width
            )));
        }
        for pr in 0..img.height / patch {
            for pc in 0..img.width / patch {
                for r in 0..patch {
                    let row = pr * patch + r;
                    let start = (row * img.width + pc * patch) * 3;
                    out.extend(img.data[start..start + patch * 3].iter().map(|v| v - 0.5));
                }
            }
        }
    }
    Ok(out)
}

/// Linear patch embedding plus learned positions.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
    pub n_patches: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        image_size: usize,
        patch: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n_patches = (image_size / patch).pow(2);
        Self {
            proj: Linear::new(store, &format!("{name}.patch"), patch * patch * 3, d, rng),
            pos: store.add_normal(&format!("{name}.pos"), &[n_patches, d], 0.02, rng),
            patch,
            n_patches,
        }
    }

    /// Returns `[batch * n_patches, d]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[&Image],
    ) -> Result<Var> {
        let b = images.len();
        let px = patchify(images, self.patch)?;
        let cols = self.patch * self.patch * 3;
        if px.len() != b * self.n_patches * cols {
            return Err(CoreError::Contract(format!(
                "image yields {} patches, model expects {}",
                px.len() / cols.max(1) / b.max(1),
                self.n_patches
            )));
        }
        let x = g.constant(&[b * self.n_patches, cols], to_scalar(&px))?;
        let x = self.proj.forward(g, store, x)?;
        let table = g.param(store, self.pos);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..self.n_patches).collect();
        let pos = g.embedding(table, &ids)?;
        Ok(g.add(x, pos)?)
    }
}

/// Token plus learned absolute position embeddings.
#[derive(Clone, Debug)]
pub struct TokenEmbed {
    pub table: ParamId,
    pub pos: ParamId,
    pub max_len: usize,
}

impl TokenEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        max_len: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            table: store.add_normal(&format!("{name}.tok"), &[vocab, d], 0.1, rng),
            pos: store.add_normal(&format!("{name}.pos"), &[max_len, d], 0.02, rng),
            max_len,
        }
    }

    /// `ids` is `[batch * seq]`; positions restart every `seq` tokens and
    /// are offset by `pos_offset`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[u32],
        seq: usize,
        pos_offset: usize,
    ) -> Result<Var> {
        if seq + pos_offset > self.max_len {
            return Err(CoreError::Contract(format!(
                "sequence of {} positions exceeds the {} learned positions",
                seq + pos_offset,
                self.max_len
            )));
        }
        let table = g.param(store, self.table);
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.embedding(table, &tok_ids)?;
        let pos_table = g.param(store, self.pos);
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| pos_offset + i % seq).collect();
        let p = g.embedding(pos_table, &pos_ids)?;
        Ok(g.add(x, p)?)
    }
}

/// Graph-free row lookup of a `[rows, d]` parameter.
pub fn table_row<T: Scalar>(store: &ParamStore<T>, id: ParamId, row: usize) -> &[T] {
    store.value(id).row(row)
}

/// A `[1,1]`-shaped scalar tensor; convenience for graph constants.
pub fn scalar_tensor<T: Scalar>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::from_f64_lossy(v))
}
