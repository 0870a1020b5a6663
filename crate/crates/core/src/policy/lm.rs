//! Decoder-only instruction rewriter: prompt (and optionally the current
//! observation) in, low-level instruction out.
//!
//! Two execution paths share one set of weights:
//! * a graph path for teacher-forced scoring and training, and
//! * a graph-free key/value-cached path for sampling, which mirrors the
//!   graph arithmetic so sampled log-probabilities match re-scoring.

use std::path::Path;

use gpla_tensor::checkpoint;
use gpla_tensor::kernels;
use gpla_tensor::nn::{Linear, TransformerBlock};
use gpla_tensor::{AttnSpec, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nets::{patchify, to_scalar, Encoder, EncoderDims, PatchEmbed, TokenEmbed};
use crate::rng;
use crate::synthenv::world::{Image, Observation};
use crate::text::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Learned text positions (prompt plus instruction).
    pub max_positions: usize,
    /// Longest generated instruction, `<eos>` included.
    pub max_len: usize,
    /// Prepend patch tokens of the observation and an effector token.
    pub vision_prefix: bool,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            max_positions: 64,
            max_len: 24,
            vision_prefix: false,
            image_size: 64,
            patch_size: 8,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(
                "lm.d_model must be a positive multiple of lm.heads".into(),
            ));
        }
        if self.max_len == 0 || self.max_positions <= self.max_len {
            return Err(CoreError::Config(
                "lm.max_positions must exceed lm.max_len > 0".into(),
            ));
        }
        if self.vision_prefix
            && (self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size))
        {
            return Err(CoreError::Config(
                "lm.patch_size must divide lm.image_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VisionPrefix {
    pub patches: PatchEmbed,
    pub effector: Linear,
}

#[derive(Clone, Debug)]
pub struct LmNet {
    pub cfg: LmConfig,
    pub embed: TokenEmbed,
    pub vision: Option<VisionPrefix>,
    /// Decoder blocks (causal) and the final norm.
    pub body: Encoder,
    pub head: Linear,
    pub vocab: usize,
}

/// One teacher-forced sequence: prompt ids (starting with `<bos>`) and the
/// response ids (ending with `<eos>` unless truncated).
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub observation: &'a Observation,
    pub prompt: &'a [u32],
    pub response: &'a [u32],
}

impl LmNet {
    pub fn new<T: Scalar>(
        cfg: &LmConfig,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let vision = cfg.vision_prefix.then(|| VisionPrefix {
            patches: PatchEmbed::new(store, "lm.vision", cfg.image_size, cfg.patch_size, d, rng),
            effector: Linear::new(store, "lm.effector", 2, d, rng),
        });
        let dims = EncoderDims {
            d_model: d,
            heads: cfg.heads,
            blocks: cfg.blocks,
            mlp_ratio: cfg.mlp_ratio,
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed: TokenEmbed::new(store, "lm.text", vocab, cfg.max_positions, d, rng),
            vision,
            body: Encoder::new(store, "lm", dims, rng),
            head: Linear::new(store, "lm.head", d, vocab, rng),
            vocab,
        })
    }

    /// Number of non-text rows ahead of the prompt.
    pub fn prefix_len(&self) -> usize {
        self.vision.as_ref().map_or(0, |v| v.patches.n_patches + 1)
    }

    /// Hidden states `[B*S, d]` for right-padded text rows (`seq` tokens
    /// each) behind the optional observation prefix. `S = prefix + seq`.
    fn hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        observations: &[&Observation],
        ids: &[u32],
        seq: usize,
    ) -> Result<Var> {
        let b = ids.len() / seq;
        let text = self.embed.forward(g, store, ids, seq, 0)?;
        let x = match &self.vision {
            None => text,
            Some(v) => {
                let images: Vec<&Image> = observations.iter().map(|o| &o.image).collect();
                let patches = v.patches.forward(g, store, &images)?;
                let eff: Vec<f32> = observations.iter().flat_map(|o| o.effector_state).collect();
                let eff = g.constant(&[b, 2], to_scalar(&eff))?;
                let eff = v.effector.forward(g, store, eff)?;
                let n = v.patches.n_patches;
                let mut parts = Vec::with_capacity(3 * b);
                for i in 0..b {
                    parts.push(g.slice_rows(patches, i * n, n)?);
                    parts.push(g.slice_rows(eff, i, 1)?);
                    parts.push(g.slice_rows(text, i * seq, seq)?);
                }
                g.concat_rows(&parts)?
            }
        };
        let s = self.prefix_len() + seq;
        let spec = AttnSpec::new(b, s, self.cfg.heads).causal();
        self.body.forward(g, store, x, &spec)
    }

    /// Summed response log-probabilities per sequence, `[B, 1]`, plus the
    /// number of response tokens per sequence.
    pub fn sequence_logprobs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[Scored],
    ) -> Result<(Var, Vec<usize>)> {
        let (picked, lens) = self.response_token_logprobs(g, store, batch)?;
        let m: usize = lens.iter().sum();
        let b = batch.len();
        let mut seg = vec![T::zero(); b * m];
        let mut off = 0;
        for (i, &l) in lens.iter().enumerate() {
            for j in off..off + l {
                seg[i * m + j] = T::one();
            }
            off += l;
        }
        let seg = g.constant(&[b, m], seg)?;
        Ok((g.matmul(seg, picked)?, lens))
    }

    /// Per-token response log-probabilities `[M, 1]` in batch order.
    pub fn response_token_logprobs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[Scored],
    ) -> Result<(Var, Vec<usize>)> {
        if batch.is_empty() {
            return Err(CoreError::Contract("empty scoring batch".into()));
        }
        let seq = batch
            .iter()
            .map(|s| s.prompt.len() + s.response.len())
            .max()
            .unwrap_or(0);
        if seq > self.cfg.max_positions {
            return Err(CoreError::Contract(format!(
                "sequence of {seq} tokens exceeds {} positions",
                self.cfg.max_positions
            )));
        }
        let mut ids = Vec::with_capacity(batch.len() * seq);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut lens = Vec::with_capacity(batch.len());
        let s_full = self.prefix_len() + seq;
        for (i, s) in batch.iter().enumerate() {
            if s.prompt.is_empty() || s.response.is_empty() {
                return Err(CoreError::Contract(
                    "teacher forcing needs a prompt and a non-empty response".into(),
                ));
            }
            let mut row: Vec<u32> = s.prompt.iter().chain(s.response).copied().collect();
            row.resize(seq, 0);
            ids.extend(row);
            for (k, &t) in s.response.iter().enumerate() {
                // text position p predicts token p+1
                let p = s.prompt.len() + k - 1;
                rows.push(i * s_full + self.prefix_len() + p);
                targets.push(t as usize);
            }
            lens.push(s.response.len());
        }
        let obs: Vec<&Observation> = batch.iter().map(|s| s.observation).collect();
        let h = self.hidden(g, store, &obs, &ids, seq)?;
        let h = g.gather_rows(h, &rows)?;
        let logits = self.head.forward(g, store, h)?;
        let lp = g.log_softmax(logits)?;
        Ok((g.pick(lp, &targets)?, lens))
    }
}

/// Per-layer key/value rows of everything processed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    text_len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Mirrors [`TransformerBlock::apply`] for `n` new rows attending to the
/// cached rows plus themselves (causally).
fn block_step(
    block: &TransformerBlock,
    store: &ParamStore<f32>,
    x: &[f32],
    n: usize,
    keys: &mut Vec<f32>,
    values: &mut Vec<f32>,
) -> Vec<f32> {
    let d = block.dim;
    let heads = block.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = block.ln1.apply(store, x, n);
    let qkv = block.qkv.apply(store, &h, n);
    let past = keys.len() / d;
    for r in 0..n {
        keys.extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
        values.extend_from_slice(&qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
    }
    let total = past + n;
    let mut att = vec![0.0f32; n * d];
    let mut scores = vec![0.0f64; total];
    let mut probs = vec![0.0f32; total];
    for r in 0..n {
        let i = past + r;
        for hd in 0..heads {
            let off = hd * dh;
            let q = &qkv[r * 3 * d + off..r * 3 * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let k = &keys[j * d + off..j * d + off + dh];
                let s: f64 = q
                    .iter()
                    .zip(k)
                    .map(|(a, c)| (*a * *c).as_f64())
                    .sum::<f64>()
                    * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in scores[..=i].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for j in 0..=i {
                probs[j] = f32::from_f64_lossy(scores[j] / sum);
            }
            let orow = &mut att[r * d + off..r * d + off + dh];
            for j in 0..=i {
                let p = probs[j];
                if p == 0.0 {
                    continue;
                }
                let v = &values[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
    }
    let a = block.proj.apply(store, &att, n);
    let x: Vec<f32> = x.iter().zip(&a).map(|(p, q)| *p + *q).collect();
    let h = block.ln2.apply(store, &x, n);
    let h: Vec<f32> = block
        .fc1
        .apply(store, &h, n)
        .into_iter()
        .map(kernels::gelu)
        .collect();
    let h = block.fc2.apply(store, &h, n);
    x.iter().zip(&h).map(|(p, q)| *p + *q).collect()
}

/// Draws one token id from `softmax(logits / temperature)`; `None`
/// temperature means greedy (lowest index among ties).
pub fn sample_token(logits: &[f32], temperature: Option<f64>, rng: &mut impl Rng) -> usize {
    match temperature {
        None => logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best }),
        Some(t) => {
            let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
            let w: Vec<f64> = logits
                .iter()
                .map(|v| ((*v as f64 - max) / t).exp())
                .collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i;
                }
                u -= wi;
            }
            w.iter().rposition(|x| *x > 0.0).unwrap_or(0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    /// Generated ids, `<eos>` included when emitted.
    pub ids: Vec<u32>,
    /// Log-probability of `ids` under the untempered model.
    pub sum_logprob: f64,
    pub token_count: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct HighLevelLm {
    pub net: LmNet,
    pub store: ParamStore<f32>,
    pub tokenizer: Tokenizer,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: LmConfig,
}

impl HighLevelLm {
    pub fn new(cfg: &LmConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::new();
        let mut store = ParamStore::new();
        let net = LmNet::new(
            cfg,
            tokenizer.vocab_size(),
            &mut store,
            &mut rng::stream(seed, "lm.init"),
        )?;
        Ok(Self {
            net,
            store,
            tokenizer,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.net.cfg
    }

    fn text_rows(&self, ids: &[u32], start: usize) -> Result<Vec<f32>> {
        let d = self.net.cfg.d_model;
        if start + ids.len() > self.net.cfg.max_positions {
            return Err(CoreError::Contract(
                "prompt exceeds the learned positions".into(),
            ));
        }
        let table = self.store.value(self.net.embed.table);
        let pos = self.store.value(self.net.embed.pos);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (k, &id) in ids.iter().enumerate() {
            out.extend(
                table
                    .row(id as usize)
                    .iter()
                    .zip(pos.row(start + k))
                    .map(|(a, b)| *a + *b),
            );
        }
        Ok(out)
    }

    fn run(&self, cache: &mut KvCache, mut x: Vec<f32>, n: usize) -> Vec<f32> {
        for (l, block) in self.net.body.blocks.iter().enumerate() {
            x = block_step(
                block,
                &self.store,
                &x,
                n,
                &mut cache.keys[l],
                &mut cache.values[l],
            );
        }
        cache.len += n;
        x
    }

    fn last_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.net.cfg.d_model;
        let last = &hidden[hidden.len() - d..];
        let h = self.net.body.ln.apply(&self.store, last, 1);
        self.net.head.apply(&self.store, &h, 1)
    }

    /// Runs the observation prefix and prompt through the cache; returns
    /// the cache and the next-token logits.
    pub fn prefill(
        &self,
        observation: &Observation,
        prompt: &[u32],
    ) -> Result<(KvCache, Vec<f32>)> {
        if prompt.is_empty() {
            return Err(CoreError::Contract("empty prompt".into()));
        }
        let d = self.net.cfg.d_model;
        let mut rows = Vec::new();
        if let Some(v) = &self.net.vision {
            let px = patchify(&[&observation.image], v.patches.patch)?;
            let n = v.patches.n_patches;
            let emb = v.patches.proj.apply(&self.store, &px, n);
            let pos = self.store.value(v.patches.pos).data();
            rows.extend(emb.iter().zip(pos).map(|(a, b)| *a + *b));
            rows.extend(
                v.effector
                    .apply(&self.store, &observation.effector_state, 1),
            );
        }
        rows.extend(self.text_rows(prompt, 0)?);
        let n = rows.len() / d;
        let blocks = self.net.body.blocks.len();
        let mut cache = KvCache {
            keys: vec![Vec::new(); blocks],
            values: vec![Vec::new(); blocks],
            len: 0,
            text_len: prompt.len(),
        };
        let hidden = self.run(&mut cache, rows, n);
        let logits = self.last_logits(&hidden);
        Ok((cache, logits))
    }

    /// Continues generation from a prefilled cache.
    pub fn continue_from(
        &self,
        mut cache: KvCache,
        mut logits: Vec<f32>,
        temperature: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        let eos = self.tokenizer.eos_id();
        let mut ids = Vec::new();
        let mut sum_logprob = 0.0f64;
        loop {
            let tok = sample_token(&logits, temperature, rng);
            let lp = kernels::log_softmax_rows(&logits, 1, logits.len());
            sum_logprob += lp[tok] as f64;
            ids.push(tok as u32);
            if tok as u32 == eos {
                break;
            }
            if ids.len() >= self.net.cfg.max_len || cache.text_len >= self.net.cfg.max_positions {
                let text = self.tokenizer.decode(&ids);
                return Ok(Generation {
                    text,
                    token_count: ids.len(),
                    ids,
                    sum_logprob,
                    truncated: true,
                });
            }
            let row = self.text_rows(&[tok as u32], cache.text_len)?;
            cache.text_len += 1;
            let hidden = self.run(&mut cache, row, 1);
            logits = self.last_logits(&hidden);
        }
        let body = &ids[..ids.len() - 1];
        Ok(Generation {
            text: self.tokenizer.decode(body),
            token_count: ids.len(),
            ids,
            sum_logprob,
            truncated: false,
        })
    }

    /// Samples one instruction; `temperature = None` decodes greedily.
    pub fn sample(
        &self,
        observation: &Observation,
        high_level: &str,
        temperature: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        if let Some(t) = temperature {
            if !(t > 0.0) {
                return Err(CoreError::Contract(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        let prompt = self.tokenizer.encode_prompt(high_level)?;
        let (cache, logits) = self.prefill(observation, &prompt)?;
        self.continue_from(cache, logits, temperature, rng)
    }

    /// Teacher-forced log-probability of `response` ids after the prompt.
    pub fn score(
        &self,
        observation: &Observation,
        high_level: &str,
        response: &[u32],
    ) -> Result<f64> {
        let prompt = self.tokenizer.encode_prompt(high_level)?;
        let mut g = Graph::new();
        let (lp, _) = self.net.sequence_logprobs(
            &mut g,
            &self.store,
            &[Scored {
                observation,
                prompt: &prompt,
                response,
            }],
        )?;
        Ok(g.value(lp).item() as f64)
    }

    /// Per-token teacher-forced log-probabilities (f64 sums are exact).
    pub fn token_logprobs(
        &self,
        observation: &Observation,
        high_level: &str,
        response: &[u32],
    ) -> Result<Vec<f64>> {
        let prompt = self.tokenizer.encode_prompt(high_level)?;
        let mut g = Graph::new();
        let (lp, _) = self.net.response_token_logprobs(
            &mut g,
            &self.store,
            &[Scored {
                observation,
                prompt: &prompt,
                response,
            }],
        )?;
        Ok(g.value(lp).data().iter().map(|v| *v as f64).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            kind: "lm".into(),
            config: self.net.cfg.clone(),
        })?;
        Ok(checkpoint::save(path, &meta, &self.store, None)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        if meta.kind != "lm" {
            return Err(CoreError::Config(format!(
                "{} holds a `{}` checkpoint, expected an lm",
                path.display(),
                meta.kind
            )));
        }
        let mut m = Self::new(&meta.config, 0)?;
        m.store.load_values(&ckpt.params)?;
        Ok(m)
    }
}

/// Overwrites the output bias; used to hand-set token distributions.
pub fn set_head_bias(lm: &mut HighLevelLm, bias: &[f32]) -> Result<()> {
    let b = lm.store.value_mut(lm.net.head.bias);
    if b.len() != bias.len() {
        return Err(CoreError::Contract(
            "bias length must equal the vocabulary size".into(),
        ));
    }
    *b = Tensor::new(vec![bias.len()], bias.to_vec())?;
    Ok(())
}
