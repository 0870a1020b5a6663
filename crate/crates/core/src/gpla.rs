//! Grounded preference alignment: sample instruction candidates, score each
//! candidate's (observation, chunk, instruction) triple with the grounding
//! model, turn the best/worst into a preference pair and update the
//! instruction LM with SimPO.

use gpla_tensor::{Graph, Optimizer, ParamStore, Scalar, Var};
use log::{info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grounding::GroundingModel;
use crate::policy::lm::LmNet;
use crate::policy::train::{lm_cross_entropy, lm_example};
use crate::policy::{Candidate, Policy, Scored};
use crate::rng;
use crate::synthenv::dataset::Sample;
use crate::synthenv::world::{ActionChunk, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GplaConfig {
    /// Candidates per prompt.
    pub n_s: usize,
    /// Iteration limit.
    pub n_i: usize,
    /// Prompts per iteration.
    pub batch: usize,
    pub lr: f64,
    pub beta_simpo: f64,
    pub gamma_simpo: f64,
    /// 0 trains on SimPO alone; a positive weight trains on
    /// `cross_entropy + mix_weight * simpo`.
    pub mix_weight: f64,
    pub temperature: f64,
    pub clip_norm: f64,
}

impl Default for GplaConfig {
    fn default() -> Self {
        Self {
            n_s: 5,
            n_i: 100,
            batch: 64,
            lr: 1e-7,
            beta_simpo: 2.0,
            gamma_simpo: 0.5,
            mix_weight: 0.0,
            temperature: 1.0,
            clip_norm: 1.0,
        }
    }
}

impl GplaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 2 {
            return Err(CoreError::Config(format!(
                "gpla.n_s must be at least 2, got {}",
                self.n_s
            )));
        }
        if self.batch == 0 {
            return Err(CoreError::Config("gpla.batch must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(CoreError::Config(format!(
                "gpla.lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.beta_simpo > 0.0) {
            return Err(CoreError::Config(format!(
                "gpla.beta_simpo must be positive, got {}",
                self.beta_simpo
            )));
        }
        if !(self.gamma_simpo >= 0.0) {
            return Err(CoreError::Config(format!(
                "gpla.gamma_simpo must be non-negative, got {}",
                self.gamma_simpo
            )));
        }
        if !(self.mix_weight >= 0.0) {
            return Err(CoreError::Config(format!(
                "gpla.mix_weight must be non-negative, got {}",
                self.mix_weight
            )));
        }
        if !(self.temperature > 0.0) || !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(
                "gpla.temperature and gpla.clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub high_level: String,
    pub prompt: Vec<u32>,
    pub chosen: Candidate,
    pub rejected: Candidate,
    pub g_chosen: f64,
    pub g_rejected: f64,
}

/// `(chosen, rejected)` indices: argmax and argmin of `scores`, ties to the
/// lowest index; `None` when both name the same instruction text.
pub fn select_pair(candidates: &[Candidate], scores: &[f64]) -> Result<Option<(usize, usize)>> {
    if candidates.len() != scores.len() || candidates.len() < 2 {
        return Err(CoreError::Contract(format!(
            "select_pair needs matching lists of at least 2, got {} candidates and {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    let chosen = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
    let rejected = (0..scores.len()).fold(0, |b, j| if scores[j] < scores[b] { j } else { b });
    if candidates[chosen].low_level == candidates[rejected].low_level {
        return Ok(None);
    }
    Ok(Some((chosen, rejected)))
}

/// `-log σ(x)`, stable for large |x|.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Reference SimPO loss from summed log-probabilities and lengths:
/// `-log σ(β/|y_c| log π(y_c) - β/|y_r| log π(y_r) - γ)`.
pub fn simpo_loss_scalar(
    logp_c: f64,
    len_c: usize,
    logp_r: f64,
    len_r: usize,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    if len_c == 0 || len_r == 0 {
        return Err(CoreError::Contract(
            "SimPO needs non-empty responses".into(),
        ));
    }
    if !(beta > 0.0) || !(gamma >= 0.0) {
        return Err(CoreError::Contract(format!(
            "SimPO needs beta > 0 and gamma ≥ 0, got {beta}, {gamma}"
        )));
    }
    let margin = beta * logp_c / len_c as f64 - beta * logp_r / len_r as f64 - gamma;
    Ok(neg_log_sigmoid(margin))
}

/// Mean SimPO loss over `pairs`, with log-probabilities from teacher-forced
/// re-scoring under the current weights.
pub fn simpo_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &LmNet,
    store: &ParamStore<T>,
    pairs: &[(&Observation, &PreferencePair)],
    beta: f64,
    gamma: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(CoreError::Contract("SimPO needs at least one pair".into()));
    }
    if !(beta > 0.0) || !(gamma >= 0.0) {
        return Err(CoreError::Contract(format!(
            "SimPO needs beta > 0 and gamma ≥ 0, got {beta}, {gamma}"
        )));
    }
    let p = pairs.len();
    let mut batch = Vec::with_capacity(2 * p);
    for side in 0..2 {
        for (obs, pair) in pairs {
            let c = if side == 0 {
                &pair.chosen
            } else {
                &pair.rejected
            };
            if c.token_count == 0 || c.ids.len() != c.token_count {
                return Err(CoreError::Contract(
                    "candidate token_count must equal its id count and be ≥ 1".into(),
                ));
            }
            batch.push(Scored {
                observation: obs,
                prompt: &pair.prompt,
                response: &c.ids,
            });
        }
    }
    let (logp, lens) = net.sequence_logprobs(g, store, &batch)?;
    let weights: Vec<T> = lens
        .iter()
        .map(|&l| T::from_f64_lossy(beta / l as f64))
        .collect();
    let w = g.constant(&[2 * p, 1], weights)?;
    let r = g.mul(logp, w)?;
    let rc = g.slice_rows(r, 0, p)?;
    let rr = g.slice_rows(r, p, p)?;
    let diff = g.sub(rc, rr)?;
    let margin = g.add_const(diff, T::from_f64_lossy(-gamma));
    let ls = g.log_sigmoid(margin);
    let mean = g.mean(ls);
    Ok(g.scale(mean, T::from_f64_lossy(-1.0)))
}

/// The per-step objective: `(total, simpo, cross_entropy)`. With
/// `mix_weight = 0` the cross-entropy term is absent.
pub fn gpla_objective<T: Scalar>(
    g: &mut Graph<T>,
    net: &LmNet,
    store: &ParamStore<T>,
    pairs: &[(&Observation, &PreferencePair)],
    supervised: &[Scored],
    cfg: &GplaConfig,
) -> Result<(Var, Var, Option<Var>)> {
    let simpo = simpo_loss_graph(g, net, store, pairs, cfg.beta_simpo, cfg.gamma_simpo)?;
    if cfg.mix_weight == 0.0 {
        return Ok((simpo, simpo, None));
    }
    let ce = lm_cross_entropy(g, net, store, supervised)?;
    let weighted = g.scale(simpo, T::from_f64_lossy(cfg.mix_weight));
    let total = g.add(ce, weighted)?;
    Ok((total, simpo, Some(ce)))
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GplaStepLog {
    pub step: usize,
    pub mean_g_chosen: f64,
    pub mean_g_rejected: f64,
    pub pairs_used: usize,
    pub simpo_loss: f64,
    pub ce_loss: Option<f64>,
}

/// One audit line of the pair dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub step: usize,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub g_chosen: f64,
    pub g_rejected: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GplaReport {
    pub steps: Vec<GplaStepLog>,
    pub pairs: Vec<PairRecord>,
    pub skipped_steps: usize,
}

/// Candidates for one sample, their grounding scores and the selected pair.
pub fn build_pair(
    policy: &Policy,
    grounding: &GroundingModel,
    sample: &Sample,
    cfg: &GplaConfig,
    rng: &mut impl Rng,
) -> Result<Option<PreferencePair>> {
    let cands = policy.generate_candidates(
        &sample.high_level,
        &sample.observation,
        cfg.n_s,
        Some(cfg.temperature),
        rng,
    )?;
    let obs: Vec<&Observation> = vec![&sample.observation; cands.len()];
    let chunks: Vec<&ActionChunk> = cands.iter().map(|c| &c.chunk).collect();
    let texts: Vec<&str> = cands.iter().map(|c| c.low_level.as_str()).collect();
    let scores: Vec<f64> = grounding_scores(grounding, &obs, &chunks, &texts)?;
    let Some((c, r)) = select_pair(&cands, &scores)? else {
        return Ok(None);
    };
    Ok(Some(PreferencePair {
        high_level: sample.high_level.clone(),
        prompt: policy.lm.tokenizer.encode_prompt(&sample.high_level)?,
        g_chosen: scores[c],
        g_rejected: scores[r],
        chosen: cands[c].clone(),
        rejected: cands[r].clone(),
    }))
}

/// Grounding scores; an instruction the text encoder cannot embed (an
/// empty generation) scores the minimum, -1.
fn grounding_scores(
    grounding: &GroundingModel,
    obs: &[&Observation],
    chunks: &[&ActionChunk],
    texts: &[&str],
) -> Result<Vec<f64>> {
    let valid: Vec<usize> = (0..texts.len())
        .filter(|&i| !texts[i].trim().is_empty())
        .collect();
    let mut out = vec![-1.0; texts.len()];
    if valid.is_empty() {
        return Ok(out);
    }
    let o: Vec<&Observation> = valid.iter().map(|&i| obs[i]).collect();
    let c: Vec<&ActionChunk> = valid.iter().map(|&i| chunks[i]).collect();
    let t: Vec<&str> = valid.iter().map(|&i| texts[i]).collect();
    for (k, s) in grounding.score_batch(&o, &c, &t)?.into_iter().enumerate() {
        out[valid[k]] = s as f64;
    }
    Ok(out)
}

/// Runs the alignment loop in place on `policy.lm`; the decoder and the
/// grounding model are only read.
pub fn gpla_train(
    policy: &mut Policy,
    grounding: &GroundingModel,
    data: &[Sample],
    cfg: &GplaConfig,
    seed: u64,
    on_step: impl FnMut(&GplaStepLog),
) -> Result<GplaReport> {
    gpla_train_threaded(policy, grounding, data, cfg, seed, 1, on_step)
}

#[allow(clippy::too_many_arguments)]
/// Builds the preference pairs of one iteration on `threads` workers. Each
/// prompt draws from its own RNG stream, so results do not depend on the
/// worker count.
fn build_pairs(
    policy: &Policy,
    grounding: &GroundingModel,
    data: &[Sample],
    idx: &[usize],
    cfg: &GplaConfig,
    seed: u64,
    step: usize,
    threads: usize,
) -> Result<Vec<(usize, PreferencePair)>> {
    let one = |k: usize| -> Result<Option<(usize, PreferencePair)>> {
        let mut r: ChaCha8Rng = rng::stream(seed, &format!("gpla.sampling.{step}.{k}"));
        Ok(build_pair(policy, grounding, &data[idx[k]], cfg, &mut r)?.map(|p| (idx[k], p)))
    };
    let threads = threads.clamp(1, idx.len().max(1));
    let results: Vec<Result<Option<(usize, PreferencePair)>>> = if threads == 1 {
        (0..idx.len()).map(one).collect()
    } else {
        let chunk = idx.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let one = &one;
                    s.spawn(move || {
                        (t * chunk..((t + 1) * chunk).min(idx.len()))
                            .map(one)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("pair worker panicked"))
                .collect()
        })
    };
    let mut pairs = Vec::new();
    for r in results {
        if let Some(p) = r? {
            pairs.push(p);
        }
    }
    Ok(pairs)
}

/// [`gpla_train`] with candidate generation spread over `threads` workers.
pub fn gpla_train_threaded(
    policy: &mut Policy,
    grounding: &GroundingModel,
    data: &[Sample],
    cfg: &GplaConfig,
    seed: u64,
    threads: usize,
    mut on_step: impl FnMut(&GplaStepLog),
) -> Result<GplaReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("GPLA prompt set is empty".into()));
    }
    let mut opt = Optimizer::adam(cfg.lr as f32, &policy.lm.store);
    let mut batch_rng: ChaCha8Rng = rng::stream(seed, "gpla.batches");
    let mut report = GplaReport::default();
    for step in 0..cfg.n_i {
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.random_range(0..data.len()))
            .collect();
        let pairs = build_pairs(policy, grounding, data, &idx, cfg, seed, step, threads)?;
        if pairs.is_empty() {
            warn!("gpla step {step}: every candidate set was degenerate, skipping the update");
            report.skipped_steps += 1;
            let rec = GplaStepLog {
                step,
                mean_g_chosen: f64::NAN,
                mean_g_rejected: f64::NAN,
                pairs_used: 0,
                simpo_loss: f64::NAN,
                ce_loss: None,
            };
            on_step(&rec);
            report.steps.push(rec);
            continue;
        }
        let examples = idx
            .iter()
            .map(|&i| lm_example(&policy.lm.tokenizer, &data[i], policy.lm.net.cfg.max_len))
            .collect::<Result<Vec<_>>>()?;
        let supervised: Vec<Scored> = idx
            .iter()
            .zip(&examples)
            .map(|(&i, (p, r))| Scored {
                observation: &data[i].observation,
                prompt: p,
                response: r,
            })
            .collect();
        let refs: Vec<(&Observation, &PreferencePair)> = pairs
            .iter()
            .map(|(i, p)| (&data[*i].observation, p))
            .collect();
        let lm = &mut policy.lm;
        lm.store.zero_grad();
        let mut g = Graph::new();
        let (total, simpo, ce) =
            gpla_objective(&mut g, &lm.net, &lm.store, &refs, &supervised, cfg)?;
        let simpo_v = g.value(simpo).item() as f64;
        let ce_v = ce.map(|c| g.value(c).item() as f64);
        if !(g.value(total).item() as f64).is_finite() {
            return Err(CoreError::NonFiniteLoss { step });
        }
        g.backward(total, &mut lm.store)?;
        opt.step(&mut lm.store, Some(cfg.clip_norm as f32))?;
        lm.store.zero_grad();
        let n = pairs.len() as f64;
        let rec = GplaStepLog {
            step,
            mean_g_chosen: pairs.iter().map(|(_, p)| p.g_chosen).sum::<f64>() / n,
            mean_g_rejected: pairs.iter().map(|(_, p)| p.g_rejected).sum::<f64>() / n,
            pairs_used: pairs.len(),
            simpo_loss: simpo_v,
            ce_loss: ce_v,
        };
        info!(
            "gpla step {step}: {} pairs, g_c {:.4} g_r {:.4} simpo {:.5}",
            rec.pairs_used, rec.mean_g_chosen, rec.mean_g_rejected, rec.simpo_loss
        );
        on_step(&rec);
        report.steps.push(rec);
        report
            .pairs
            .extend(pairs.into_iter().map(|(_, p)| PairRecord {
                step,
                prompt: p.high_level,
                chosen: p.chosen.low_level,
                rejected: p.rejected.low_level,
                g_chosen: p.g_chosen,
                g_rejected: p.g_rejected,
            }));
    }
    Ok(report)
}

/// Grounding score of each sample's greedy instruction and its decoded
/// chunk — the quantity alignment is meant to raise.
pub fn greedy_grounding_scores(
    policy: &Policy,
    grounding: &GroundingModel,
    samples: &[Sample],
) -> Result<Vec<f64>> {
    let mut obs = Vec::with_capacity(samples.len());
    let mut chunks = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for s in samples {
        let (gen, chunk) = policy.act(&s.high_level, &s.observation)?;
        obs.push(&s.observation);
        chunks.push(chunk);
        texts.push(gen.text);
    }
    let chunk_refs: Vec<&ActionChunk> = chunks.iter().collect();
    let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let mut out = Vec::with_capacity(samples.len());
    for start in (0..samples.len()).step_by(64) {
        let end = (start + 64).min(samples.len());
        out.extend(grounding_scores(
            grounding,
            &obs[start..end],
            &chunk_refs[start..end],
            &text_refs[start..end],
        )?);
    }
    Ok(out)
}
