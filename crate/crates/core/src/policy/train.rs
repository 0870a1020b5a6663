//! Supervised training of both policy levels: next-token cross-entropy for
//! the instruction LM and mean-squared error for the action decoder.

use gpla_tensor::{Graph, Optimizer, ParamStore, Scalar, Var};
use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecodeInput, DecoderNet, LowLevelDecoder};
use super::lm::{HighLevelLm, LmNet, Scored};
use crate::error::{CoreError, Result};
use crate::rng;
use crate::synthenv::dataset::Sample;
use crate::synthenv::world::ActionChunk;
use crate::text::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub lm_steps: usize,
    pub decoder_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            lm_steps: 1_500,
            decoder_steps: 15_000,
            batch: 64,
            lr: 1e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            log_every: 50,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(CoreError::Config("sup.batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(
                "sup.lr and sup.weight_decay must be ≥ 0 and sup.clip_norm > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLog {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
}

/// Prompt and target ids for one sample.
pub fn lm_example(
    tok: &Tokenizer,
    sample: &Sample,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let prompt = tok.encode_prompt(&sample.high_level)?;
    let mut target = tok.encode_instruction(&sample.low_level)?;
    target.truncate(max_len);
    Ok((prompt, target))
}

/// Mean per-token next-token cross-entropy over the response tokens.
pub fn lm_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    net: &LmNet,
    store: &ParamStore<T>,
    batch: &[Scored],
) -> Result<Var> {
    let (picked, lens) = net.response_token_logprobs(g, store, batch)?;
    let m: usize = lens.iter().sum();
    let total = g.sum(picked);
    Ok(g.scale(total, T::from_f64_lossy(-1.0 / m as f64)))
}

/// Decoder mean-squared error on a batch of samples with their
/// ground-truth instructions.
pub fn decoder_mse<T: Scalar>(
    g: &mut Graph<T>,
    net: &DecoderNet,
    store: &ParamStore<T>,
    tok: &Tokenizer,
    batch: &[&Sample],
) -> Result<Var> {
    let inputs: Vec<DecodeInput> = batch
        .iter()
        .map(|s| DecodeInput {
            observation: &s.observation,
            high_level: &s.high_level,
            low_level: &s.low_level,
        })
        .collect();
    let pred = net.forward(g, store, tok, &inputs)?;
    let targets: Vec<&ActionChunk> = batch.iter().map(|s| &s.chunk).collect();
    net.mse_loss(g, pred, &targets)
}

fn draw<'a>(data: &'a [Sample], n: usize, rng: &mut impl Rng) -> Vec<&'a Sample> {
    (0..n)
        .map(|_| &data[rng.random_range(0..data.len())])
        .collect()
}

/// Shared loop: minibatch, loss, AdamW step with clipping, rollback on a
/// non-finite loss.
fn fit(
    stage: &str,
    store: &mut ParamStore<f32>,
    steps: usize,
    cfg: &SupervisedConfig,
    mut rng: ChaCha8Rng,
    mut loss_fn: impl FnMut(&mut Graph<f32>, &ParamStore<f32>, &mut ChaCha8Rng) -> Result<Var>,
    on_log: &mut impl FnMut(&SupervisedLog),
) -> Result<Vec<SupervisedLog>> {
    let mut opt = Optimizer::adamw(cfg.lr as f32, cfg.weight_decay as f32, store);
    let mut last_good = store.clone();
    let mut logs = Vec::with_capacity(steps);
    for step in 0..steps {
        store.zero_grad();
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store, &mut rng)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            *store = last_good;
            return Err(CoreError::NonFiniteLoss { step });
        }
        g.backward(loss, store)?;
        if let Err(e) = opt.step(store, Some(cfg.clip_norm as f32)) {
            *store = last_good;
            return Err(e.into());
        }
        last_good.load_values(store)?;
        let rec = SupervisedLog {
            stage: stage.to_string(),
            step,
            loss: value,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == steps) {
            info!("{stage} step {step}: loss {value:.5}");
            on_log(&rec);
        }
        logs.push(rec);
    }
    store.zero_grad();
    Ok(logs)
}

pub fn train_lm(
    lm: &mut HighLevelLm,
    data: &[Sample],
    cfg: &SupervisedConfig,
    seed: u64,
    mut on_log: impl FnMut(&SupervisedLog),
) -> Result<Vec<SupervisedLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("supervised training set is empty".into()));
    }
    let examples = data
        .iter()
        .map(|s| lm_example(&lm.tokenizer, s, lm.net.cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let net = lm.net.clone();
    let n = cfg.batch;
    fit(
        "lm",
        &mut lm.store,
        cfg.lm_steps,
        cfg,
        rng::stream(seed, "sup.lm.batches"),
        |g, store, rng| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
            let batch: Vec<Scored> = idx
                .iter()
                .map(|&i| Scored {
                    observation: &data[i].observation,
                    prompt: &examples[i].0,
                    response: &examples[i].1,
                })
                .collect();
            lm_cross_entropy(g, &net, store, &batch)
        },
        &mut on_log,
    )
}

pub fn train_decoder(
    dec: &mut LowLevelDecoder,
    data: &[Sample],
    cfg: &SupervisedConfig,
    seed: u64,
    mut on_log: impl FnMut(&SupervisedLog),
) -> Result<Vec<SupervisedLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("supervised training set is empty".into()));
    }
    let net = dec.net.clone();
    let tok = dec.tokenizer.clone();
    fit(
        "decoder",
        &mut dec.store,
        cfg.decoder_steps,
        cfg,
        rng::stream(seed, "sup.decoder.batches"),
        |g, store, rng| {
            let batch = draw(data, cfg.batch, rng);
            decoder_mse(g, &net, store, &tok, &batch)
        },
        &mut on_log,
    )
}

/// Trains the LM, then the decoder, each on ground-truth instructions.
pub fn train_supervised(
    lm: &mut HighLevelLm,
    dec: &mut LowLevelDecoder,
    data: &[Sample],
    cfg: &SupervisedConfig,
    seed: u64,
    mut on_log: impl FnMut(&SupervisedLog),
) -> Result<Vec<SupervisedLog>> {
    let mut logs = train_lm(lm, data, cfg, seed, &mut on_log)?;
    logs.extend(train_decoder(dec, data, cfg, seed, &mut on_log)?);
    Ok(logs)
}
