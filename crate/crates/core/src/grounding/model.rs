//! Action-conditioned dual encoder.
//!
//! ```text
//! effector + deltas ─ transformer ─ mean-pool ─ a
//! image ─ patches ─ [block ─ FiLM(a)] x N ─ norm ─ mean-pool ─ proj ─ l2 ─ VA
//! caption ─ tokens ─ transformer (masked) ─ mean-pool ─ proj ─ l2 ─ T
//! ```

use std::path::Path;

use gpla_tensor::checkpoint;
use gpla_tensor::nn::Linear;
use gpla_tensor::{AttnSpec, Graph, ParamId, ParamStore, Scalar, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nets::{to_scalar, Encoder, EncoderDims, PatchEmbed, TokenEmbed};
use crate::rng;
use crate::synthenv::world::{ActionChunk, Image, Observation, DELTA_MAX};
use crate::text::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingConfig {
    pub d_model: usize,
    pub heads: usize,
    pub vision_blocks: usize,
    pub text_blocks: usize,
    pub action_blocks: usize,
    pub mlp_ratio: usize,
    pub n_film_layers: usize,
    /// Initial multiplier applied to cosine logits (`1 / τ₀`).
    pub initial_logit_scale: f64,
    pub gamma_div: f64,
    pub horizon: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_text_len: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            vision_blocks: 4,
            text_blocks: 2,
            action_blocks: 2,
            mlp_ratio: 4,
            n_film_layers: 4,
            initial_logit_scale: 0.1,
            gamma_div: 0.01,
            horizon: 8,
            patch_size: 8,
            image_size: 64,
            max_text_len: 24,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("horizon", self.horizon),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("max_text_len", self.max_text_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!(
                    "grounding.{name} must be positive"
                )));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(
                "grounding.d_model must be divisible by grounding.heads".into(),
            ));
        }
        if self.n_film_layers > self.vision_blocks {
            return Err(CoreError::Config(format!(
                "grounding.n_film_layers ({}) cannot exceed grounding.vision_blocks ({})",
                self.n_film_layers, self.vision_blocks
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CoreError::Config(
                "grounding.patch_size must divide grounding.image_size".into(),
            ));
        }
        if !(self.initial_logit_scale > 0.0 && self.initial_logit_scale.is_finite()) {
            return Err(CoreError::Config(
                "grounding.initial_logit_scale must be positive".into(),
            ));
        }
        if !(self.gamma_div >= 0.0 && self.gamma_div.is_finite()) {
            return Err(CoreError::Config(format!(
                "grounding.gamma_div must be non-negative, got {}",
                self.gamma_div
            )));
        }
        Ok(())
    }

    fn dims(&self, blocks: usize) -> EncoderDims {
        EncoderDims {
            d_model: self.d_model,
            heads: self.heads,
            blocks,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// One FiLM layer: `x ← γ(a) ⊙ x + β(a)` channel-wise on every visual
/// token, with `γ(a) = W_γ a + b_γ` (`b_γ` initialized to 1) and
/// `β(a) = W_β a + b_β` (`b_β` initialized to 0).
#[derive(Clone, Debug)]
pub struct FilmLayer {
    pub gamma: Linear,
    pub beta: Linear,
}

impl FilmLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let gamma = Linear::with_init(
            store,
            &format!("{name}.gamma"),
            d,
            d,
            0.1 / (d as f64).sqrt(),
            rng,
        );
        store
            .value_mut(gamma.bias)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one());
        let beta = Linear::with_init(
            store,
            &format!("{name}.beta"),
            d,
            d,
            0.1 / (d as f64).sqrt(),
            rng,
        );
        Self { gamma, beta }
    }
}

/// Layer definitions; parameter values live in a separate store.
#[derive(Clone, Debug)]
pub struct GroundingNet {
    pub cfg: GroundingConfig,
    pub patches: PatchEmbed,
    pub vision: Encoder,
    /// One FiLM layer after each of the first `n_film_layers` vision blocks.
    pub film: Vec<FilmLayer>,
    pub vision_proj: Linear,
    pub action_in: Linear,
    pub action_pos: ParamId,
    pub action: Encoder,
    pub text_embed: TokenEmbed,
    pub text: Encoder,
    pub text_proj: Linear,
    pub log_tau: ParamId,
}

/// Conditioning switch for [`GroundingNet::va_features`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Film {
    Conditioned,
    /// The plain visual pathway: FiLM layers skipped (`γ = 1`, `β = 0`).
    Unconditioned,
}

impl GroundingNet {
    pub fn new<T: Scalar>(
        cfg: &GroundingConfig,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            cfg: cfg.clone(),
            patches: PatchEmbed::new(store, "vision", cfg.image_size, cfg.patch_size, d, rng),
            vision: Encoder::new(store, "vision", cfg.dims(cfg.vision_blocks), rng),
            film: (0..cfg.n_film_layers)
                .map(|i| FilmLayer::new(store, &format!("film{i}"), d, rng))
                .collect(),
            vision_proj: Linear::new(store, "vision_proj", d, d, rng),
            action_in: Linear::new(store, "action.in", 3, d, rng),
            action_pos: store.add_normal("action.pos", &[cfg.horizon + 1, d], 0.02, rng),
            action: Encoder::new(store, "action", cfg.dims(cfg.action_blocks), rng),
            text_embed: TokenEmbed::new(store, "text", vocab, cfg.max_text_len, d, rng),
            text: Encoder::new(store, "text", cfg.dims(cfg.text_blocks), rng),
            text_proj: Linear::new(store, "text_proj", d, d, rng),
            log_tau: store.add_full("log_tau", &[1, 1], (1.0 / cfg.initial_logit_scale).ln()),
        })
    }

    /// Pooled action code `[B, d]` over an effector token and the deltas.
    pub fn action_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        effectors: &[[f32; 2]],
        chunks: &[&ActionChunk],
    ) -> Result<Var> {
        let h = self.cfg.horizon;
        let b = chunks.len();
        let mut rows = Vec::with_capacity(b * (h + 1) * 3);
        for (e, c) in effectors.iter().zip(chunks) {
            if c.horizon() != h {
                return Err(CoreError::Tensor(TensorError::Shape {
                    op: "action chunk",
                    lhs: vec![c.horizon(), 2],
                    rhs: vec![h, 2],
                }));
            }
            rows.extend([e[0], e[1], 1.0]);
            for d in &c.deltas {
                rows.extend([d[0] / DELTA_MAX, d[1] / DELTA_MAX, 0.0]);
            }
        }
        let x = g.constant(&[b * (h + 1), 3], to_scalar(&rows))?;
        let x = self.action_in.forward(g, store, x)?;
        let table = g.param(store, self.action_pos);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..h + 1).collect();
        let p = g.embedding(table, &ids)?;
        let x = g.add(x, p)?;
        let x = self
            .action
            .forward(g, store, x, &AttnSpec::new(b, h + 1, self.cfg.heads))?;
        Ok(g.mean_pool(x, b, h + 1, None)?)
    }

    /// Pre-normalization VA features `[B, d]`.
    pub fn va_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        observations: &[&Observation],
        chunks: &[&ActionChunk],
        film: Film,
    ) -> Result<Var> {
        if observations.len() != chunks.len() || observations.is_empty() {
            return Err(CoreError::Contract(format!(
                "{} observations vs {} chunks",
                observations.len(),
                chunks.len()
            )));
        }
        let b = observations.len();
        let n = self.patches.n_patches;
        let images: Vec<&Image> = observations.iter().map(|o| &o.image).collect();
        let effectors: Vec<[f32; 2]> = observations.iter().map(|o| o.effector_state).collect();
        let a = self.action_features(g, store, &effectors, chunks)?;
        // broadcast each sample's modulation over its patch tokens
        let spread: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let spec = AttnSpec::new(b, n, self.cfg.heads);
        let mut x = self.patches.forward(g, store, &images)?;
        for (i, block) in self.vision.blocks.iter().enumerate() {
            x = block.forward(g, store, x, &spec)?;
            if let (Some(layer), Film::Conditioned) = (self.film.get(i), film) {
                let gamma = layer.gamma.forward(g, store, a)?;
                let beta = layer.beta.forward(g, store, a)?;
                let gamma = g.gather_rows(gamma, &spread)?;
                let beta = g.gather_rows(beta, &spread)?;
                x = g.mul(x, gamma)?;
                x = g.add(x, beta)?;
            }
        }
        let x = self.vision.ln.forward(g, store, x)?;
        let h = g.mean_pool(x, b, n, None)?;
        Ok(self.vision_proj.forward(g, store, h)?)
    }

    pub fn encode_va<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        observations: &[&Observation],
        chunks: &[&ActionChunk],
    ) -> Result<Var> {
        let f = self.va_features(g, store, observations, chunks, Film::Conditioned)?;
        Ok(g.l2_normalize(f)?)
    }

    /// `ids` are padded to a common length; `mask` marks real tokens.
    pub fn encode_text_ids<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[u32],
        mask: &[bool],
        seq: usize,
    ) -> Result<Var> {
        let b = ids.len() / seq;
        let x = self.text_embed.forward(g, store, ids, seq, 0)?;
        let spec = AttnSpec::new(b, seq, self.cfg.heads).with_key_mask(mask.to_vec());
        let x = self.text.forward(g, store, x, &spec)?;
        let x = g.mean_pool(x, b, seq, Some(mask))?;
        let x = self.text_proj.forward(g, store, x)?;
        Ok(g.l2_normalize(x)?)
    }

    /// `1/τ` as a `[1,1]` node.
    pub fn logit_scale<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Var {
        let lt = g.param(store, self.log_tau);
        let neg = g.scale(lt, -T::one());
        g.exp(neg)
    }
}

/// Tokenizes captions into a padded id matrix (`seq` = longest caption).
pub fn tokenize_batch(
    tok: &Tokenizer,
    texts: &[&str],
    max_len: usize,
) -> Result<(Vec<u32>, Vec<bool>, usize)> {
    let mut rows = Vec::with_capacity(texts.len());
    for t in texts {
        let ids = tok.encode(t);
        if ids.is_empty() {
            return Err(CoreError::Contract("cannot encode an empty caption".into()));
        }
        rows.push(ids);
    }
    let seq = rows.iter().map(Vec::len).max().unwrap_or(1).min(max_len);
    let mut ids = Vec::with_capacity(rows.len() * seq);
    let mut mask = Vec::with_capacity(rows.len() * seq);
    for r in &rows {
        let (i, m) = tok.pad_to(r, seq);
        ids.extend(i);
        mask.extend(m);
    }
    Ok((ids, mask, seq))
}

/// Trained (or freshly initialized) grounding model with its weights.
#[derive(Clone, Debug)]
pub struct GroundingModel {
    pub net: GroundingNet,
    pub store: ParamStore<f32>,
    pub tokenizer: Tokenizer,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: GroundingConfig,
}

impl GroundingModel {
    pub fn new(cfg: &GroundingConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::new();
        let mut store = ParamStore::new();
        let net = GroundingNet::new(
            cfg,
            tokenizer.vocab_size(),
            &mut store,
            &mut rng::stream(seed, "grounding.init"),
        )?;
        Ok(Self {
            net,
            store,
            tokenizer,
        })
    }

    pub fn config(&self) -> &GroundingConfig {
        &self.net.cfg
    }

    pub fn tau(&self) -> f64 {
        (self.store.value(self.net.log_tau).item() as f64).exp()
    }

    fn rows(g: &Graph<f32>, v: Var) -> Vec<Vec<f32>> {
        let t = g.value(v);
        let (r, _) = t.dims2();
        (0..r).map(|i| t.row(i).to_vec()).collect()
    }

    pub fn embed_va(
        &self,
        observations: &[&Observation],
        chunks: &[&ActionChunk],
    ) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let v = self
            .net
            .encode_va(&mut g, &self.store, observations, chunks)?;
        Ok(Self::rows(&g, v))
    }

    pub fn embed_text(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let (ids, mask, seq) = tokenize_batch(&self.tokenizer, texts, self.net.cfg.max_text_len)?;
        let mut g = Graph::new();
        let v = self
            .net
            .encode_text_ids(&mut g, &self.store, &ids, &mask, seq)?;
        Ok(Self::rows(&g, v))
    }

    /// Cosine similarity between the VA and text embeddings of each triple.
    pub fn score_batch(
        &self,
        observations: &[&Observation],
        chunks: &[&ActionChunk],
        texts: &[&str],
    ) -> Result<Vec<f32>> {
        if texts.len() != chunks.len() {
            return Err(CoreError::Contract(format!(
                "{} captions vs {} chunks",
                texts.len(),
                chunks.len()
            )));
        }
        let va = self.embed_va(observations, chunks)?;
        let t = self.embed_text(texts)?;
        Ok(va
            .iter()
            .zip(&t)
            .map(|(a, b)| {
                let s: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (*x as f64) * (*y as f64))
                    .sum();
                s.clamp(-1.0, 1.0) as f32
            })
            .collect())
    }

    pub fn grounding_score(
        &self,
        observation: &Observation,
        chunk: &ActionChunk,
        low_level: &str,
    ) -> Result<f32> {
        Ok(self.score_batch(&[observation], &[chunk], &[low_level])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            kind: "grounding".into(),
            config: self.net.cfg.clone(),
        })?;
        Ok(checkpoint::save(path, &meta, &self.store, None)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        if meta.kind != "grounding" {
            return Err(CoreError::Config(format!(
                "{} holds a `{}` checkpoint, expected a grounding model",
                path.display(),
                meta.kind
            )));
        }
        let mut model = Self::new(&meta.config, 0)?;
        model.store.load_values(&ckpt.params)?;
        Ok(model)
    }
}
