//! Contrastive training loop with gradient accumulation.

use std::collections::HashSet;

use gpla_tensor::{GradAccumulator, Graph, Optimizer, ParamStore};
use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{grounding_objective, text_to_va_top1, EmbeddingBatch};
use super::model::{tokenize_batch, GroundingModel};
use crate::error::{CoreError, Result};
use crate::rng;
use crate::synthenv::augment::{augment_with, AugmentConfig};
use crate::synthenv::dataset::Sample;
use crate::synthenv::world::{ActionChunk, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingTrainConfig {
    /// Optimizer steps (each accumulating `n_micro` micro-batches).
    pub steps: usize,
    pub micro_batch: usize,
    pub n_micro: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub augment: bool,
    pub log_every: usize,
}

impl Default for GroundingTrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            micro_batch: 64,
            n_micro: 4,
            lr: 1e-4,
            clip_norm: 1.0,
            augment: true,
            log_every: 50,
        }
    }
}

impl GroundingTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch < 2 {
            return Err(CoreError::Config(format!(
                "grounding_train.micro_batch must be at least 2 for in-batch negatives, got {}",
                self.micro_batch
            )));
        }
        if self.n_micro == 0 {
            return Err(CoreError::Config(
                "grounding_train.n_micro must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!(
                "grounding_train.lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(format!(
                "grounding_train.clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingLog {
    pub step: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub retrieval_top1: f64,
    pub tau: f64,
}

/// Indices of `n` samples with pairwise-distinct captions, so every
/// in-batch negative is a true negative.
pub fn distinct_caption_batch(
    samples: &[Sample],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 200 * n.max(1) {
            return Err(CoreError::Config(format!(
                "cannot draw {n} samples with distinct captions from {} samples",
                samples.len()
            )));
        }
        let i = rng.random_range(0..samples.len());
        if seen.insert(samples[i].low_level.as_str()) {
            out.push(i);
        }
    }
    Ok(out)
}

/// One forward/backward of the grounding objective on a batch; gradients
/// are accumulated into `store`. Returns `(total, l_c, l_div, top1)`.
pub fn objective_step(
    model: &GroundingModel,
    store: &mut ParamStore<f32>,
    obs: &[&Observation],
    chunks: &[&ActionChunk],
    captions: &[&str],
    backward: bool,
) -> Result<(f64, f64, f64, f64)> {
    let net = &model.net;
    let mut g = Graph::new();
    let va = net.encode_va(&mut g, store, obs, chunks)?;
    let (ids, mask, seq) = tokenize_batch(&model.tokenizer, captions, net.cfg.max_text_len)?;
    let t = net.encode_text_ids(&mut g, store, &ids, &mask, seq)?;
    let scale = net.logit_scale(&mut g, store);
    let (total, lc, ld) = grounding_objective(&mut g, va, t, scale, net.cfg.gamma_div)?;
    let rows = |v| {
        let x = g.value(v);
        (0..x.dims2().0)
            .map(|i| x.row(i).iter().map(|f| *f as f64).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let top1 = EmbeddingBatch::new(&rows(va), &rows(t))
        .map(|b| text_to_va_top1(&b))
        .unwrap_or(0.0);
    let vals = (
        g.value(total).item() as f64,
        g.value(lc).item() as f64,
        g.value(ld).item() as f64,
        top1,
    );
    if backward {
        g.backward(total, store)?;
    }
    Ok(vals)
}

/// Trains in place. On a non-finite loss the parameters are rolled back to
/// the last good step and an error is returned.
pub fn train_grounding(
    model: &mut GroundingModel,
    data: &[Sample],
    cfg: &GroundingTrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&GroundingLog),
) -> Result<Vec<GroundingLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("grounding training set is empty".into()));
    }
    let mut opt = Optimizer::adam(cfg.lr as f32, &model.store);
    let mut acc = GradAccumulator::new(cfg.n_micro)?;
    let mut batch_rng: ChaCha8Rng = rng::stream(seed, "grounding.batches");
    let mut aug_rng: ChaCha8Rng = rng::stream(seed, "grounding.augment");
    let aug_cfg = if cfg.augment {
        AugmentConfig::default()
    } else {
        AugmentConfig::disabled()
    };
    let mut logs = Vec::new();
    let mut last_good = model.store.clone();
    model.store.zero_grad();
    for step in 0..cfg.steps {
        let mut sums = [0.0f64; 4];
        for _ in 0..cfg.n_micro {
            let idx =
                distinct_caption_batch(data, cfg.micro_batch.min(data.len()), &mut batch_rng)?;
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| augment_with(&data[i], &aug_cfg, &mut aug_rng).0)
                .collect();
            let obs: Vec<&Observation> = batch.iter().map(|s| &s.observation).collect();
            let chunks: Vec<&ActionChunk> = batch.iter().map(|s| &s.chunk).collect();
            let caps: Vec<&str> = batch.iter().map(|s| s.low_level.as_str()).collect();
            let mut store = std::mem::take(&mut model.store);
            let res = objective_step(model, &mut store, &obs, &chunks, &caps, true);
            model.store = store;
            let (l, c, d, a) = res?;
            if !l.is_finite() {
                model.store = last_good;
                return Err(CoreError::NonFiniteLoss { step });
            }
            for (s, v) in sums.iter_mut().zip([l, c, d, a]) {
                *s += v / cfg.n_micro as f64;
            }
            match acc.micro_step(&mut opt, &mut model.store, Some(cfg.clip_norm as f32)) {
                Ok(_) => {}
                Err(e) => {
                    model.store = last_good;
                    return Err(e.into());
                }
            }
        }
        last_good.load_values(&model.store)?;
        let rec = GroundingLog {
            step,
            loss: sums[0],
            contrastive: sums[1],
            diversity: sums[2],
            retrieval_top1: sums[3],
            tau: model.tau(),
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            info!(
                "grounding step {step}: loss {:.4} (L_C {:.4}, L_div {:.4}) top1 {:.3} tau {:.4}",
                rec.loss, rec.contrastive, rec.diversity, rec.retrieval_top1, rec.tau
            );
            on_log(&rec);
        }
        logs.push(rec);
    }
    Ok(logs)
}
