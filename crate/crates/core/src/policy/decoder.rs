//! Low-level action decoder: observation, effector state and both
//! instructions in, an 8-step chunk of clamped deltas out.

use std::path::Path;

use gpla_tensor::checkpoint;
use gpla_tensor::nn::Linear;
use gpla_tensor::{AttnSpec, Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nets::{to_scalar, Encoder, EncoderDims, PatchEmbed, TokenEmbed};
use crate::rng;
use crate::synthenv::world::{ActionChunk, Image, Observation, DELTA_MAX};
use crate::text::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Token budget for `high_level <eos> low_level`.
    pub max_text_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            horizon: 8,
            image_size: 64,
            patch_size: 8,
            max_text_len: 48,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(
                "decoder.d_model must be a positive multiple of decoder.heads".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(CoreError::Config("decoder.horizon must be positive".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CoreError::Config(
                "decoder.patch_size must divide decoder.image_size".into(),
            ));
        }
        if self.max_text_len < 2 {
            return Err(CoreError::Config(
                "decoder.max_text_len must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// One decoder input.
#[derive(Clone, Copy, Debug)]
pub struct DecodeInput<'a> {
    pub observation: &'a Observation,
    pub high_level: &'a str,
    pub low_level: &'a str,
}

#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub cfg: DecoderConfig,
    pub patches: PatchEmbed,
    pub effector: Linear,
    pub text: TokenEmbed,
    pub body: Encoder,
    pub head: Linear,
}

impl DecoderNet {
    pub fn new<T: Scalar>(
        cfg: &DecoderConfig,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dims = EncoderDims {
            d_model: d,
            heads: cfg.heads,
            blocks: cfg.blocks,
            mlp_ratio: cfg.mlp_ratio,
        };
        Ok(Self {
            cfg: cfg.clone(),
            patches: PatchEmbed::new(store, "dec.vision", cfg.image_size, cfg.patch_size, d, rng),
            effector: Linear::new(store, "dec.effector", 2, d, rng),
            text: TokenEmbed::new(store, "dec.text", vocab, cfg.max_text_len, d, rng),
            body: Encoder::new(store, "dec", dims, rng),
            head: Linear::new(store, "dec.head", d, 2 * cfg.horizon, rng),
        })
    }

    /// `high_level <eos> low_level`, truncated to the token budget.
    pub fn instruction_ids(
        &self,
        tok: &Tokenizer,
        high_level: &str,
        low_level: &str,
    ) -> Result<Vec<u32>> {
        if high_level.trim().is_empty() {
            return Err(CoreError::Contract("empty high-level instruction".into()));
        }
        let mut ids = tok.encode(high_level);
        ids.push(tok.eos_id());
        ids.extend(tok.encode(low_level));
        ids.truncate(self.cfg.max_text_len);
        Ok(ids)
    }

    /// Predicted chunks as `[B, 2*horizon]`, already squashed into
    /// `[-DELTA_MAX, DELTA_MAX]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tok: &Tokenizer,
        batch: &[DecodeInput],
    ) -> Result<Var> {
        let b = batch.len();
        if b == 0 {
            return Err(CoreError::Contract("empty decoder batch".into()));
        }
        let texts = batch
            .iter()
            .map(|x| self.instruction_ids(tok, x.high_level, x.low_level))
            .collect::<Result<Vec<_>>>()?;
        let seq = texts.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(b * seq);
        let mut text_mask = Vec::with_capacity(b * seq);
        for t in &texts {
            let (p, m) = tok.pad_to(t, seq);
            ids.extend(p);
            text_mask.extend(m);
        }
        let images: Vec<&Image> = batch.iter().map(|x| &x.observation.image).collect();
        let patches = self.patches.forward(g, store, &images)?;
        let eff: Vec<f32> = batch
            .iter()
            .flat_map(|x| x.observation.effector_state)
            .collect();
        let eff = g.constant(&[b, 2], to_scalar(&eff))?;
        let eff = self.effector.forward(g, store, eff)?;
        let text = self.text.forward(g, store, &ids, seq, 0)?;
        let n = self.patches.n_patches;
        let s = n + 1 + seq;
        let mut parts = Vec::with_capacity(3 * b);
        let mut mask = Vec::with_capacity(b * s);
        for i in 0..b {
            parts.push(g.slice_rows(patches, i * n, n)?);
            parts.push(g.slice_rows(eff, i, 1)?);
            parts.push(g.slice_rows(text, i * seq, seq)?);
            mask.extend(std::iter::repeat_n(true, n + 1));
            mask.extend_from_slice(&text_mask[i * seq..(i + 1) * seq]);
        }
        let x = g.concat_rows(&parts)?;
        let spec = AttnSpec::new(b, s, self.cfg.heads).with_key_mask(mask.clone());
        let h = self.body.forward(g, store, x, &spec)?;
        let pooled = g.mean_pool(h, b, s, Some(&mask))?;
        let out = self.head.forward(g, store, pooled)?;
        let out = g.tanh(out);
        Ok(g.scale(out, T::from_f64_lossy(DELTA_MAX as f64)))
    }

    /// Mean squared error against target chunks over all `B*horizon*2`
    /// elements.
    pub fn mse_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pred: Var,
        targets: &[&ActionChunk],
    ) -> Result<Var> {
        let b = targets.len();
        let w = 2 * self.cfg.horizon;
        let mut flat = Vec::with_capacity(b * w);
        for c in targets {
            if c.horizon() != self.cfg.horizon {
                return Err(gpla_tensor::TensorError::Shape {
                    op: "decoder target",
                    lhs: vec![c.horizon(), 2],
                    rhs: vec![self.cfg.horizon, 2],
                }
                .into());
            }
            flat.extend(c.flat());
        }
        let t = g.constant(&[b, w], to_scalar(&flat))?;
        let diff = g.sub(pred, t)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.mean(sq))
    }
}

#[derive(Clone, Debug)]
pub struct LowLevelDecoder {
    pub net: DecoderNet,
    pub store: ParamStore<f32>,
    pub tokenizer: Tokenizer,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: DecoderConfig,
}

impl LowLevelDecoder {
    pub fn new(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::new();
        let mut store = ParamStore::new();
        let net = DecoderNet::new(
            cfg,
            tokenizer.vocab_size(),
            &mut store,
            &mut rng::stream(seed, "decoder.init"),
        )?;
        Ok(Self {
            net,
            store,
            tokenizer,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.net.cfg
    }

    /// Batched, deterministic chunk prediction.
    pub fn decode_batch(&self, batch: &[DecodeInput]) -> Result<Vec<ActionChunk>> {
        let mut g = Graph::new();
        let out = self
            .net
            .forward(&mut g, &self.store, &self.tokenizer, batch)?;
        let v = g.value(out);
        Ok((0..batch.len())
            .map(|i| ActionChunk::from_flat(v.row(i)))
            .collect())
    }

    pub fn decode_chunk(
        &self,
        observation: &Observation,
        high_level: &str,
        low_level: &str,
    ) -> Result<ActionChunk> {
        let mut out = self.decode_batch(&[DecodeInput {
            observation,
            high_level,
            low_level,
        }])?;
        Ok(out.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            kind: "decoder".into(),
            config: self.net.cfg.clone(),
        })?;
        Ok(checkpoint::save(path, &meta, &self.store, None)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        if meta.kind != "decoder" {
            return Err(CoreError::Config(format!(
                "{} holds a `{}` checkpoint, expected a decoder",
                path.display(),
                meta.kind
            )));
        }
        let mut m = Self::new(&meta.config, 0)?;
        m.store.load_values(&ckpt.params)?;
        Ok(m)
    }
}
