//! Acceptance suite. Prints one `PASS` / `FAIL` line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset: `cargo test --release --test acceptance -- 3 4`.

use std::cell::OnceCell;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, ensure, Result};
use gpla_cli::{run, Cli, Command};
use gpla_core::evalkit::*;
use gpla_core::gpla::*;
use gpla_core::grounding::loss::{grounding_objective, mean_positive_offdiag, text_to_va_top1};
use gpla_core::grounding::model::tokenize_batch;
use gpla_core::grounding::train::distinct_caption_batch;
use gpla_core::grounding::*;
use gpla_core::nets::{Encoder, EncoderDims, PatchEmbed, TokenEmbed};
use gpla_core::policy::train::{decoder_mse, lm_cross_entropy, lm_example};
use gpla_core::policy::*;
use gpla_core::rng;
use gpla_core::synthenv::augment::{augment_with, AugmentConfig};
use gpla_core::synthenv::dataset::{
    filter_idle_with, split_episode_indices, window_is_active, WindowConfig,
};
use gpla_core::synthenv::*;
use gpla_core::CoreError;
use gpla_tensor::gradcheck::{check_f32_against_f64, GradCheckReport};
use gpla_tensor::nn::{LayerNorm, Linear, TransformerBlock};
use gpla_tensor::{AttnSpec, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::Rng;

// Desk-scale data: many short-lived scenes, thinned so the training set
// stays within memory while covering many layouts.
const EPISODES: usize = 4000;
const TRAIN_STRIDE: usize = 12;
const HELD_EPISODES: usize = 80;

const GROUNDING_STEPS: usize = 6000;
const RETRIEVAL_BATCHES: usize = 10;
const RETRIEVAL_N: usize = 64;

const DIVERSITY_STEPS: usize = 1000;

const GPLA_STEPS: usize = 100;
const GPLA_LRS: [f64; 2] = [1e-6, 1e-5];
// Few greedy outputs change within 100 small steps, so the paired test
// needs a large prompt set to resolve the effect.
const HELD_PROMPTS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct DeskData {
    train: Vec<Sample>,
    /// Windows of validation episodes: model selection only.
    val: Vec<Sample>,
    /// Windows of test episodes: every reported held-out number.
    test: Vec<Sample>,
}

fn desk_data() -> DeskData {
    let wc = WindowConfig::default();
    let split = split_episode_indices(EPISODES, (0.8, 0.1, 0.1), rng::derive_seed(0, "split"))
        .expect("valid split");
    let episode = |i: usize| {
        generate_episode(
            rng::derive_seed(0, &format!("episode.{i}")),
            TaskFamily::ALL[i % 5],
        )
    };
    let train = split
        .train
        .iter()
        .flat_map(|&i| filter_idle_with(&episode(i), &wc))
        .step_by(TRAIN_STRIDE)
        .collect();
    let windows = |ids: &[usize]| {
        ids.iter()
            .take(HELD_EPISODES)
            .flat_map(|&i| filter_idle_with(&episode(i), &wc))
            .collect()
    };
    DeskData {
        train,
        val: windows(&split.val),
        test: windows(&split.test),
    }
}

fn desk_grounding_cfg() -> GroundingConfig {
    GroundingConfig {
        patch_size: 16,
        mlp_ratio: 2,
        initial_logit_scale: 10.0,
        ..Default::default()
    }
}

fn desk_train_cfg(steps: usize) -> GroundingTrainConfig {
    GroundingTrainConfig {
        steps,
        n_micro: 1,
        lr: 1e-3,
        // Within the step budget, augmentation noise on the action chunks
        // slows held-out convergence far more than it regularizes.
        augment: false,
        log_every: 500,
        ..Default::default()
    }
}

fn train_desk_grounding(
    data: &[Sample],
    cfg: &GroundingConfig,
    steps: usize,
) -> Result<GroundingModel> {
    let mut m = GroundingModel::new(cfg, 0)?;
    let t0 = Instant::now();
    train_grounding(&mut m, data, &desk_train_cfg(steps), 0, |l| {
        eprintln!(
            "    grounding step {:>5}: loss {:.3} top1 {:.3} tau {:.4} ({:.0}s)",
            l.step,
            l.loss,
            l.retrieval_top1,
            l.tau,
            t0.elapsed().as_secs_f64()
        )
    })?;
    Ok(m)
}

/// Evenly spaced subset of `n` samples.
fn spread(samples: &[Sample], n: usize) -> Vec<Sample> {
    let n = n.min(samples.len());
    (0..n)
        .map(|j| samples[j * samples.len() / n].clone())
        .collect()
}

struct Shared {
    data: OnceCell<DeskData>,
    grounding: OnceCell<GroundingModel>,
}

impl Shared {
    fn data(&self) -> &DeskData {
        self.data.get_or_init(desk_data)
    }

    fn grounding(&self) -> Result<&GroundingModel> {
        if let Some(m) = self.grounding.get() {
            return Ok(m);
        }
        let m = train_desk_grounding(&self.data().train, &desk_grounding_cfg(), GROUNDING_STEPS)?;
        Ok(self.grounding.get_or_init(|| m))
    }
}

// ---------------------------------------------------------------- 1

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn loss_oracles(_: &Shared) -> Result<Outcome> {
    let ln2 = 2f64.ln();
    let mut worst = 0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    // SimPO
    check(simpo_loss_scalar(-3.0, 3, -3.0, 3, 2.0, 0.0)?, ln2);
    let margin_gamma = 2.0 * (-1.0 / 4.0) - 2.0 * (-9.0 / 6.0);
    check(simpo_loss_scalar(-1.0, 4, -9.0, 6, 2.0, margin_gamma)?, ln2);
    check(
        simpo_loss_scalar(-2.0, 4, -10.0, 5, 2.0, 0.5)?,
        (1.0 + (-2.5f64).exp()).ln(),
    );
    let simpo_third = simpo_loss_scalar(-2.0, 4, -10.0, 5, 2.0, 0.5)?;
    // InfoNCE
    let e = [vec![1.0, 0.0], vec![0.0, 1.0]];
    check(
        contrastive_loss(&EmbeddingBatch::new(&e, &e)?, 1.0)?,
        -(1f64.exp() / (1f64.exp() + 1.0)).ln(),
    );
    let same = [vec![0.6, 0.8], vec![0.6, 0.8]];
    for tau in [0.07, 1.0, 5.0] {
        check(
            contrastive_loss(&EmbeddingBatch::new(&same, &same)?, tau)?,
            ln2,
        );
    }
    let identity_case = contrastive_loss(&EmbeddingBatch::new(&e, &e)?, 1.0)?;
    let simpo_contrastive_worst = worst;
    // diversity
    let mut div_worst = 0f64;
    let orth = [
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    div_worst = div_worst.max(diversity_loss(&EmbeddingBatch::new(&orth, &orth)?)?.abs());
    let ident = [vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]];
    div_worst = div_worst.max((diversity_loss(&EmbeddingBatch::new(&ident, &ident)?)? - 2.0).abs());
    let va = [vec![1.0, 0.0], unit(&[-0.5, 0.75f64.sqrt()])];
    let t = [vec![1.0, 0.0], unit(&[0.3, 0.91f64.sqrt()])];
    div_worst = div_worst.max((diversity_loss(&EmbeddingBatch::new(&va, &t)?)? - 0.3).abs());
    outcome(
        simpo_contrastive_worst < 1e-6 && (simpo_third - 0.07889).abs() < 1e-5 && (identity_case - 0.31326).abs() < 1e-5 && div_worst < 1e-9,
        format!(
            "SimPO/InfoNCE max |err| {simpo_contrastive_worst:.1e}, SimPO example {simpo_third:.5}, identity InfoNCE {identity_case:.5}, diversity max |err| {div_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 2

const GRAD_COORDS: usize = 24;
const GRAD_TOL: f64 = 1e-3;

fn contract(e: CoreError) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn rand_tensor<T: Scalar>(r: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::from_f64_lossy(r.random_range(-1.0..1.0)))
            .collect(),
    )
    .expect("shape matches data")
}

/// Reduces `out` against fixed random weights so every element matters.
fn project<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> gpla_tensor::Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.input(rand_tensor(&mut rng::stream(seed, "project"), &shape));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

const OPS: &[(&str, &[&[usize]])] = &[
    ("matmul", &[&[4, 6], &[6, 5]]),
    ("matmul_nt", &[&[4, 6], &[5, 6]]),
    ("transpose", &[&[6, 5]]),
    ("add_broadcast", &[&[5, 6], &[6]]),
    ("sub", &[&[5, 6], &[5, 6]]),
    ("mul", &[&[5, 6], &[5, 6]]),
    ("mul_scalar", &[&[5, 6], &[1, 1]]),
    ("scale", &[&[5, 6]]),
    ("softmax", &[&[4, 7]]),
    ("log_softmax", &[&[4, 7]]),
    ("layer_norm", &[&[4, 8], &[8], &[8]]),
    ("gelu", &[&[5, 6]]),
    ("tanh", &[&[5, 6]]),
    ("exp", &[&[5, 6]]),
    ("log_sigmoid", &[&[5, 6]]),
    ("embedding", &[&[8, 4]]),
    ("gather_rows", &[&[8, 4]]),
    ("pick", &[&[5, 6]]),
    ("slice_cols", &[&[5, 8]]),
    ("concat_rows", &[&[4, 5], &[2, 5]]),
    ("concat_cols", &[&[4, 5], &[4, 3]]),
    ("mean", &[&[5, 6]]),
    ("mean_pool_masked", &[&[6, 5]]),
    ("l2_normalize", &[&[4, 6]]),
    ("attention_causal_masked", &[&[8, 4], &[8, 4], &[8, 4]]),
    ("attention_bidirectional", &[&[6, 4], &[6, 4], &[6, 4]]),
];

fn apply_op<T: Scalar>(name: &str, g: &mut Graph<T>, v: &[Var]) -> gpla_tensor::Result<Var> {
    match name {
        "matmul" => g.matmul(v[0], v[1]),
        "matmul_nt" => g.matmul_nt(v[0], v[1]),
        "transpose" => g.transpose(v[0]),
        "add_broadcast" => g.add(v[0], v[1]),
        "sub" => g.sub(v[0], v[1]),
        "mul" => g.mul(v[0], v[1]),
        "mul_scalar" => g.mul_scalar(v[0], v[1]),
        "scale" => Ok(g.scale(v[0], T::from_f64_lossy(-1.7))),
        "softmax" => g.softmax(v[0]),
        "log_softmax" => g.log_softmax(v[0]),
        "layer_norm" => g.layer_norm(v[0], v[1], v[2]),
        "gelu" => Ok(g.gelu(v[0])),
        "tanh" => Ok(g.tanh(v[0])),
        "exp" => Ok(g.exp(v[0])),
        "log_sigmoid" => Ok(g.log_sigmoid(v[0])),
        "embedding" => g.embedding(v[0], &[1, 4, 1, 0, 7]),
        "gather_rows" => g.gather_rows(v[0], &[7, 0, 7, 3]),
        "pick" => g.pick(v[0], &[3, 0, 2, 5, 5]),
        "slice_cols" => g.slice_cols(v[0], 2, 4),
        "concat_rows" => g.concat_rows(&[v[0], v[1]]),
        "concat_cols" => g.concat_cols(&[v[0], v[1]]),
        "mean" => Ok(g.mean(v[0])),
        "mean_pool_masked" => {
            g.mean_pool(v[0], 2, 3, Some(&[true, true, false, true, false, true]))
        }
        "l2_normalize" => g.l2_normalize(v[0]),
        "attention_causal_masked" => {
            let spec = AttnSpec::new(2, 4, 2)
                .causal()
                .with_key_mask(vec![true, true, true, false, true, true, true, true]);
            g.attention(v[0], v[1], v[2], spec)
        }
        "attention_bidirectional" => g.attention(v[0], v[1], v[2], AttnSpec::new(2, 3, 1)),
        other => unreachable!("unknown op {other}"),
    }
}

fn check_both<F32, F64>(
    store: &ParamStore<f32>,
    f32_loss: F32,
    f64_loss: F64,
    seed: u64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport>
where
    F32: Fn(&mut Graph<f32>, &ParamStore<f32>) -> gpla_tensor::Result<Var>,
    F64: Fn(&mut Graph<f64>, &ParamStore<f64>) -> gpla_tensor::Result<Var>,
{
    let r = check_f32_against_f64(
        store,
        f32_loss,
        f64_loss,
        GRAD_COORDS,
        1e-4,
        1e-6,
        seed,
        only,
    )?;
    ensure!(
        r.coords.len() >= 20,
        "only {} coordinates checked",
        r.coords.len()
    );
    Ok(r)
}

/// Builds an f32 loss and its f64 twin from one generic body.
macro_rules! twin {
    (|$g:ident, $s:ident| $body:expr) => {
        (
            |$g: &mut Graph<f32>, $s: &ParamStore<f32>| -> gpla_tensor::Result<Var> { $body },
            |$g: &mut Graph<f64>, $s: &ParamStore<f64>| -> gpla_tensor::Result<Var> { $body },
        )
    };
}

fn gradient_checks(_: &Shared) -> Result<Outcome> {
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut r = rng::stream(2, "acceptance.gradcheck");

    for (ci, (name, shapes)) in OPS.iter().enumerate() {
        let mut store = ParamStore::<f32>::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("in{i}"), rand_tensor(&mut r, s)))
            .collect();
        let seed = 100 + ci as u64;
        let (a, b) = twin!(|g, s| {
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = apply_op(name, g, &v)?;
            project(g, out, seed)
        });
        results.push((
            format!("op {name}"),
            check_both(&store, a, b, seed, None)?.max_rel_err(),
        ));
    }

    // layers
    {
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "lin", 6, 5, &mut r);
        let x: Tensor<f32> = rand_tensor(&mut r, &[4, 6]);
        let (a, b) = twin!(|g, s| {
            let xin = g.input(x.cast());
            let y = lin.forward(g, s, xin)?;
            project(g, y, 1)
        });
        results.push((
            "layer Linear".into(),
            check_both(&store, a, b, 1, None)?.max_rel_err(),
        ));
    }
    {
        let mut store = ParamStore::<f32>::new();
        let ln = LayerNorm::new(&mut store, "ln", 12);
        let x: Tensor<f32> = rand_tensor(&mut r, &[4, 12]);
        let (a, b) = twin!(|g, s| {
            let xin = g.input(x.cast());
            let y = ln.forward(g, s, xin)?;
            project(g, y, 2)
        });
        results.push((
            "layer LayerNorm".into(),
            check_both(&store, a, b, 2, None)?.max_rel_err(),
        ));
    }
    {
        let mut store = ParamStore::<f32>::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 2, &mut r);
        let x: Tensor<f32> = rand_tensor(&mut r, &[10, 8]);
        let mask = vec![true, true, true, true, false, true, true, true, true, true];
        let (a, b) = twin!(|g, s| {
            let xin = g.input(x.cast());
            let y = block.forward(
                g,
                s,
                xin,
                &AttnSpec::new(2, 5, 2).with_key_mask(mask.clone()),
            )?;
            project(g, y, 3)
        });
        results.push((
            "layer TransformerBlock".into(),
            check_both(&store, a, b, 3, None)?.max_rel_err(),
        ));
    }
    {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(
            &mut store,
            "enc",
            EncoderDims {
                d_model: 8,
                heads: 2,
                blocks: 2,
                mlp_ratio: 2,
            },
            &mut r,
        );
        let x: Tensor<f32> = rand_tensor(&mut r, &[6, 8]);
        let (a, b) = twin!(|g, s| {
            let xin = g.input(x.cast());
            let y = enc
                .forward(g, s, xin, &AttnSpec::new(2, 3, 2).causal())
                .map_err(contract)?;
            project(g, y, 4)
        });
        results.push((
            "layer Encoder".into(),
            check_both(&store, a, b, 4, None)?.max_rel_err(),
        ));
    }
    {
        let mut store = ParamStore::<f32>::new();
        let pe = PatchEmbed::new(&mut store, "pe", 16, 8, 6, &mut r);
        let img = Image::from_u8(
            16,
            16,
            &(0..16 * 16 * 3)
                .map(|_| r.random::<u8>())
                .collect::<Vec<_>>(),
        );
        let (a, b) = twin!(|g, s| {
            let y = pe.forward(g, s, &[&img]).map_err(contract)?;
            project(g, y, 5)
        });
        results.push((
            "layer PatchEmbed".into(),
            check_both(&store, a, b, 5, None)?.max_rel_err(),
        ));
    }
    {
        let mut store = ParamStore::<f32>::new();
        let te = TokenEmbed::new(&mut store, "te", 7, 6, 5, &mut r);
        let (a, b) = twin!(|g, s| {
            let y = te
                .forward(g, s, &[1, 6, 3, 3, 0, 2], 3, 1)
                .map_err(contract)?;
            project(g, y, 6)
        });
        results.push((
            "layer TokenEmbed".into(),
            check_both(&store, a, b, 6, None)?.max_rel_err(),
        ));
    }

    // composite losses
    let data: Vec<Sample> = (0..2u64)
        .flat_map(|s| {
            filter_idle_with(
                &generate_episode(s, TaskFamily::ALL[s as usize]),
                &WindowConfig::default(),
            )
        })
        .collect();
    {
        let batch: Vec<Sample> = data.iter().step_by(7).take(4).cloned().collect();
        let cfg = GroundingConfig {
            d_model: 32,
            vision_blocks: 2,
            n_film_layers: 2,
            text_blocks: 1,
            action_blocks: 1,
            mlp_ratio: 2,
            patch_size: 16,
            initial_logit_scale: 5.0,
            gamma_div: 0.5,
            ..Default::default()
        };
        let m = GroundingModel::new(&cfg, 6)?;
        let (net, tok) = (&m.net, &m.tokenizer);
        let obs: Vec<_> = batch.iter().map(|s| &s.observation).collect();
        let chunks: Vec<_> = batch.iter().map(|s| &s.chunk).collect();
        let caps: Vec<&str> = batch.iter().map(|s| s.low_level.as_str()).collect();
        let (ids, mask, seq) = tokenize_batch(tok, &caps, net.cfg.max_text_len)?;
        let (a, b) = twin!(|g, s| {
            let va = net.encode_va(g, s, &obs, &chunks).map_err(contract)?;
            let t = net
                .encode_text_ids(g, s, &ids, &mask, seq)
                .map_err(contract)?;
            let scale = net.logit_scale(g, s);
            Ok(grounding_objective(g, va, t, scale, net.cfg.gamma_div)
                .map_err(contract)?
                .0)
        });
        results.push((
            "L_C + γ·L_div".into(),
            check_both(&m.store, a, b, 13, None)?.max_rel_err(),
        ));
        let mut only = vec![net.log_tau];
        for l in &net.film {
            only.extend([l.gamma.weight, l.gamma.bias, l.beta.weight, l.beta.bias]);
        }
        let (a, b) = twin!(|g, s| {
            let va = net.encode_va(g, s, &obs, &chunks).map_err(contract)?;
            let t = net
                .encode_text_ids(g, s, &ids, &mask, seq)
                .map_err(contract)?;
            let scale = net.logit_scale(g, s);
            Ok(grounding_objective(g, va, t, scale, net.cfg.gamma_div)
                .map_err(contract)?
                .0)
        });
        results.push((
            "FiLM layers and temperature".into(),
            check_both(&m.store, a, b, 14, Some(&only))?.max_rel_err(),
        ));
    }
    let small_policy = || -> Result<Policy> {
        Ok(Policy {
            lm: HighLevelLm::new(
                &LmConfig {
                    d_model: 32,
                    mlp_ratio: 2,
                    vision_prefix: true,
                    patch_size: 16,
                    ..Default::default()
                },
                1,
            )?,
            decoder: LowLevelDecoder::new(
                &DecoderConfig {
                    d_model: 32,
                    mlp_ratio: 2,
                    patch_size: 16,
                    ..Default::default()
                },
                2,
            )?,
        })
    };
    {
        let p = small_policy()?;
        let g = GroundingModel::new(
            &GroundingConfig {
                d_model: 32,
                vision_blocks: 1,
                n_film_layers: 1,
                text_blocks: 1,
                action_blocks: 1,
                mlp_ratio: 2,
                patch_size: 16,
                ..Default::default()
            },
            3,
        )?;
        let mut pr = rng::stream(0, "acceptance.pairs");
        let mut pairs = Vec::new();
        for s in &data {
            if let Some(pair) = build_pair(&p, &g, s, &GplaConfig::default(), &mut pr)? {
                pairs.push((&s.observation, pair));
            }
            if pairs.len() == 2 {
                break;
            }
        }
        ensure!(pairs.len() == 2, "could not form two preference pairs");
        let refs: Vec<_> = pairs.iter().map(|(o, pr)| (*o, pr)).collect();
        let net = &p.lm.net;
        let (a, b) = twin!(|g, s| simpo_loss_graph(g, net, s, &refs, 2.0, 0.5).map_err(contract));
        results.push((
            "SimPO via teacher-forced re-scoring".into(),
            check_both(&p.lm.store, a, b, 5, None)?.max_rel_err(),
        ));
        let ex: Vec<_> = data
            .iter()
            .take(3)
            .map(|s| lm_example(&p.lm.tokenizer, s, 24))
            .collect::<gpla_core::Result<_>>()?;
        let scored: Vec<Scored> = ex
            .iter()
            .zip(&data)
            .map(|((pr, r), s)| Scored {
                observation: &s.observation,
                prompt: pr,
                response: r,
            })
            .collect();
        let (a, b) = twin!(|g, s| lm_cross_entropy(g, net, s, &scored).map_err(contract));
        results.push((
            "LM cross-entropy".into(),
            check_both(&p.lm.store, a, b, 11, None)?.max_rel_err(),
        ));
        let batch: Vec<&Sample> = data.iter().take(3).collect();
        let (dnet, tok) = (&p.decoder.net, &p.decoder.tokenizer);
        let (a, b) = twin!(|g, s| decoder_mse(g, dnet, s, tok, &batch).map_err(contract));
        results.push((
            "decoder MSE".into(),
            check_both(&p.decoder.store, a, b, 7, None)?.max_rel_err(),
        ));
    }

    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .collect();
    let (worst_name, worst) =
        results.iter().fold(
            ("", 0.0),
            |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc },
        );
    outcome(
        failing.is_empty(),
        if failing.is_empty() {
            format!(
                "{} checks x {GRAD_COORDS} coords, worst rel err {worst:.2e} ({worst_name})",
                results.len()
            )
        } else {
            format!("over {GRAD_TOL:e}: {}", failing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 3

fn retrieval(shared: &Shared) -> Result<Outcome> {
    let data = shared.data();
    ensure!(
        data.train.len() >= 5000,
        "only {} training samples",
        data.train.len()
    );
    let m = shared.grounding()?;
    let mut r = rng::stream(3, "acceptance.retrieval");
    let (mut hits, mut queries) = (0u64, 0u64);
    for _ in 0..RETRIEVAL_BATCHES {
        let idx = distinct_caption_batch(&data.test, RETRIEVAL_N, &mut r)?;
        let obs: Vec<_> = idx.iter().map(|&i| &data.test[i].observation).collect();
        let chunks: Vec<_> = idx.iter().map(|&i| &data.test[i].chunk).collect();
        let caps: Vec<_> = idx
            .iter()
            .map(|&i| data.test[i].low_level.as_str())
            .collect();
        let batch = EmbeddingBatch::from_f32(&m.embed_va(&obs, &chunks)?, &m.embed_text(&caps)?)?;
        hits += (text_to_va_top1(&batch) * RETRIEVAL_N as f64).round() as u64;
        queries += RETRIEVAL_N as u64;
    }
    let chance = 1.0 / RETRIEVAL_N as f64;
    let acc = hits as f64 / queries as f64;
    let p = binomial_upper_tail(hits, queries, chance)?;
    outcome(
        acc >= 10.0 * chance && p < 0.01 && queries >= 500,
        format!(
            "top-1 {acc:.4} ({hits}/{queries}) = {:.1}x chance, p = {p:.2e}; {} train samples, {GROUNDING_STEPS} steps",
            acc / chance,
            data.train.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn ranking_validity(shared: &Shared) -> Result<Outcome> {
    let m = shared.grounding()?;
    let held = spread(&shared.data().test, 640);
    let mut perm: Vec<usize> = (0..held.len()).collect();
    perm.shuffle(&mut rng::stream(4, "acceptance.shuffle"));
    // each triple gets some other window's caption, never its own text
    let shuffled: Vec<&str> = (0..held.len())
        .map(|i| {
            let mut j = perm[i];
            while held[j].low_level == held[i].low_level {
                j = (j + 1) % held.len();
            }
            held[j].low_level.as_str()
        })
        .collect();
    let mut diffs = Vec::with_capacity(held.len());
    for (batch, shuf) in held.chunks(64).zip(shuffled.chunks(64)) {
        let obs: Vec<_> = batch.iter().map(|s| &s.observation).collect();
        let chunks: Vec<_> = batch.iter().map(|s| &s.chunk).collect();
        let gt: Vec<_> = batch.iter().map(|s| s.low_level.as_str()).collect();
        let a = m.score_batch(&obs, &chunks, &gt)?;
        let b = m.score_batch(&obs, &chunks, shuf)?;
        diffs.extend(a.iter().zip(&b).map(|(x, y)| (*x - *y) as f64));
    }
    let st = sign_test(&diffs)?;
    let mean = mean_std(&diffs).0;
    outcome(
        mean > 0.0 && st.p_value < 0.01 && diffs.len() >= 500,
        format!(
            "{} triples, mean gt - shuffled {mean:.4}, sign test {}+/{}-/{}= p = {:.2e}",
            diffs.len(),
            st.positive,
            st.negative,
            st.ties,
            st.p_value
        ),
    )
}

// ---------------------------------------------------------------- 5

fn desk_policy(train: &[Sample]) -> Result<Policy> {
    let mut lm = HighLevelLm::new(
        &LmConfig {
            vision_prefix: true,
            patch_size: 16,
            mlp_ratio: 2,
            ..Default::default()
        },
        1,
    )?;
    let mut dec = LowLevelDecoder::new(
        &DecoderConfig {
            patch_size: 16,
            mlp_ratio: 2,
            ..Default::default()
        },
        2,
    )?;
    let cfg = SupervisedConfig {
        lm_steps: 1500,
        decoder_steps: 1500,
        batch: 32,
        lr: 1e-3,
        log_every: 500,
        ..Default::default()
    };
    train_supervised(&mut lm, &mut dec, train, &cfg, 3, |l| {
        eprintln!("    {} step {:>5}: loss {:.4}", l.stage, l.step, l.loss)
    })?;
    Ok(Policy { lm, decoder: dec })
}

fn pipeline_mse(policy: &Policy, samples: &[Sample]) -> Result<f64> {
    Ok(mean_std(&row_metrics(&rollout_rows(policy, samples)?)?.mse).0)
}

fn gpla_improvement(shared: &Shared) -> Result<Outcome> {
    let g = shared.grounding()?;
    let data = shared.data();
    let base = desk_policy(&data.train)?;
    let val = spread(&data.val, HELD_PROMPTS);
    let test = spread(&data.test, HELD_PROMPTS);
    let val_before = mean_std(&greedy_grounding_scores(&base, g, &val)?).0;
    // the learning rate is chosen on validation prompts; test prompts are
    // only scored for the selected run
    let mut best: Option<(f64, f64, Policy)> = None;
    for lr in GPLA_LRS {
        let mut p = base.clone();
        let cfg = GplaConfig {
            n_i: GPLA_STEPS,
            lr,
            ..Default::default()
        };
        let report = gpla_train(&mut p, g, &data.train, &cfg, 5, |_| {})?;
        let val_after = mean_std(&greedy_grounding_scores(&p, g, &val)?).0;
        eprintln!("    lr {lr:e}: validation grounding {val_before:.4} -> {val_after:.4}, {} skipped steps", report.skipped_steps);
        if best.as_ref().is_none_or(|b| val_after > b.1) {
            best = Some((lr, val_after, p));
        }
    }
    let (lr, _, tuned) = best.ok_or_else(|| anyhow!("empty learning-rate sweep"))?;
    let before = greedy_grounding_scores(&base, g, &test)?;
    let after = greedy_grounding_scores(&tuned, g, &test)?;
    let diffs: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let st = sign_test(&diffs)?;
    let (mb, ma) = (mean_std(&before).0, mean_std(&after).0);
    let (mse_b, mse_a) = (pipeline_mse(&base, &test)?, pipeline_mse(&tuned, &test)?);
    let ratio = mse_a / mse_b;
    outcome(
        ma > mb && st.p_value < 0.05 && ratio <= 1.10,
        format!(
            "lr {lr:e}: grounding {mb:.4} -> {ma:.4} (sign test {}+/{}-/{}= p = {:.3e}); pipeline MSE {mse_b:.6} -> {mse_a:.6} ({:+.1}%)",
            st.positive,
            st.negative,
            st.ties,
            st.p_value,
            (ratio - 1.0) * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 6

fn regularizer_variant(_: &Shared) -> Result<Outcome> {
    let data: Vec<Sample> = (0..40u64)
        .flat_map(|s| {
            filter_idle_with(
                &generate_episode(s, TaskFamily::ALL[s as usize % 5]),
                &WindowConfig::default(),
            )
        })
        .collect();
    let mut lm = HighLevelLm::new(
        &LmConfig {
            d_model: 32,
            mlp_ratio: 2,
            vision_prefix: true,
            patch_size: 16,
            ..Default::default()
        },
        1,
    )?;
    let mut dec = LowLevelDecoder::new(
        &DecoderConfig {
            d_model: 32,
            mlp_ratio: 2,
            patch_size: 16,
            ..Default::default()
        },
        2,
    )?;
    // the variant replaces supervised fine-tuning of the LM, so the LM starts
    // from initialization; only the decoder that executes candidates is fitted
    let sup = SupervisedConfig {
        lm_steps: 0,
        decoder_steps: 100,
        batch: 16,
        lr: 1e-3,
        log_every: 0,
        ..Default::default()
    };
    train_supervised(&mut lm, &mut dec, &data, &sup, 1, |_| {})?;
    let mut policy = Policy { lm, decoder: dec };
    let grounding = GroundingModel::new(
        &GroundingConfig {
            d_model: 32,
            vision_blocks: 1,
            n_film_layers: 1,
            text_blocks: 1,
            action_blocks: 1,
            mlp_ratio: 2,
            patch_size: 16,
            ..Default::default()
        },
        3,
    )?;
    let cfg = GplaConfig {
        n_i: 50,
        batch: 16,
        lr: 1e-3,
        mix_weight: 0.1,
        ..Default::default()
    };

    // exact decomposition on one batch
    let mut pr = rng::stream(6, "acceptance.pairs");
    let mut pairs = Vec::new();
    for s in &data {
        if let Some(p) = build_pair(&policy, &grounding, s, &cfg, &mut pr)? {
            pairs.push((&s.observation, p));
        }
        if pairs.len() == 4 {
            break;
        }
    }
    ensure!(!pairs.is_empty(), "no preference pair could be formed");
    let refs: Vec<_> = pairs.iter().map(|(o, p)| (*o, p)).collect();
    let ex: Vec<_> = data
        .iter()
        .take(8)
        .map(|s| lm_example(&policy.lm.tokenizer, s, 24))
        .collect::<gpla_core::Result<_>>()?;
    let scored: Vec<Scored> = ex
        .iter()
        .zip(&data)
        .map(|((p, r), s)| Scored {
            observation: &s.observation,
            prompt: p,
            response: r,
        })
        .collect();
    let mut g = Graph::new();
    let (total, _, _) = gpla_objective(
        &mut g,
        &policy.lm.net,
        &policy.lm.store,
        &refs,
        &scored,
        &cfg,
    )?;
    let total = g.value(total).item() as f64;
    let mut g = Graph::new();
    let ce = lm_cross_entropy(&mut g, &policy.lm.net, &policy.lm.store, &scored)?;
    let ce = g.value(ce).item() as f64;
    let mut g = Graph::new();
    let simpo = simpo_loss_graph(
        &mut g,
        &policy.lm.net,
        &policy.lm.store,
        &refs,
        cfg.beta_simpo,
        cfg.gamma_simpo,
    )?;
    let simpo = g.value(simpo).item() as f64;
    let decomposition_err = (total - (ce + 0.1 * simpo)).abs();

    // a 50-step run: block means of the logged total must not increase
    let report = gpla_train(&mut policy, &grounding, &data, &cfg, 6, |_| {})?;
    let totals: Vec<f64> = report
        .steps
        .iter()
        .filter_map(|s| s.ce_loss.map(|ce| ce + cfg.mix_weight * s.simpo_loss))
        .collect();
    ensure!(
        totals.len() == 50,
        "{} of 50 steps produced a loss",
        totals.len()
    );
    let smoothed: Vec<f64> = totals
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let monotone = smoothed.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        decomposition_err < 1e-6 && monotone,
        format!(
            "|total - (ce + 0.1 simpo)| = {decomposition_err:.1e}; 10-step means of total loss {}",
            smoothed
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" > ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn diversity_effect(shared: &Shared) -> Result<Outcome> {
    let data = shared.data();
    let mut offdiag = Vec::new();
    for gamma in [0.01, 0.0] {
        let m = train_desk_grounding(
            &data.train,
            &GroundingConfig {
                gamma_div: gamma,
                ..desk_grounding_cfg()
            },
            DIVERSITY_STEPS,
        )?;
        let mut r = rng::stream(7, "acceptance.diversity");
        let mut total = 0.0;
        for _ in 0..RETRIEVAL_BATCHES {
            let idx = distinct_caption_batch(&data.test, RETRIEVAL_N, &mut r)?;
            let obs: Vec<_> = idx.iter().map(|&i| &data.test[i].observation).collect();
            let chunks: Vec<_> = idx.iter().map(|&i| &data.test[i].chunk).collect();
            let caps: Vec<_> = idx
                .iter()
                .map(|&i| data.test[i].low_level.as_str())
                .collect();
            total += (mean_positive_offdiag(&m.embed_va(&obs, &chunks)?)
                + mean_positive_offdiag(&m.embed_text(&caps)?))
                / 2.0;
        }
        offdiag.push(total / RETRIEVAL_BATCHES as f64);
    }
    outcome(
        offdiag[0] < offdiag[1],
        format!(
            "mean positive off-diagonal cosine after {DIVERSITY_STEPS} steps: {:.4} with gamma_div 0.01, {:.4} without",
            offdiag[0], offdiag[1]
        ),
    )
}

// ---------------------------------------------------------------- 8

fn words(s: &str) -> Vec<String> {
    normalize(s)
}

fn metric_suite(_: &Shared) -> Result<Outcome> {
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;

    // BLEU
    let h = words("push the red star to the left");
    check("bleu identity", bleu(&h, &h, 4) == 1.0);
    check(
        "bleu zero unigram overlap",
        bleu(&words("a b c"), &words("x y z"), 4) == 0.0,
    );
    check(
        "bleu brevity example",
        close(
            bleu(&words("the cat sat"), &words("the cat sat down"), 4),
            (1.0f64 - 4.0 / 3.0).exp(),
            1e-12,
        ),
    );
    // ROUGE-1
    check("rouge identity", rouge1_f1(&h, &h) == 1.0);
    check(
        "rouge disjoint",
        rouge1_f1(&words("a b"), &words("c d")) == 0.0,
    );
    check(
        "rouge example",
        close(
            rouge1_f1(&words("move red block"), &words("push red block")),
            2.0 / 3.0,
            1e-12,
        ),
    );
    // METEOR
    check(
        "meteor zero overlap",
        meteor(&words("a b"), &words("c d")) == 0.0,
    );
    check(
        "meteor five words",
        close(
            meteor(&words("a b c d e"), &words("a b c d e")),
            0.996,
            1e-12,
        ),
    );
    check(
        "meteor single match",
        close(meteor(&words("a b"), &words("a c")), 0.25, 1e-12),
    );
    // trajectories
    let t: Vec<[f32; 2]> = (0..8).map(|i| [0.01 * (i + 1) as f32, -0.02]).collect();
    let m = traj_metrics(&t, &t)?;
    check(
        "traj identity",
        m.mse == 0.0 && m.mae == 0.0 && close(m.cos_sim, 1.0, 1e-12),
    );
    let neg: Vec<[f32; 2]> = t.iter().map(|d| [-d[0], -d[1]]).collect();
    let m = traj_metrics(&neg, &t)?;
    let mean_sq = t
        .iter()
        .flat_map(|d| d.iter())
        .map(|v| (*v as f64).powi(2))
        .sum::<f64>()
        / 16.0;
    check(
        "traj antipodal",
        close(m.cos_sim, -1.0, 1e-12) && close(m.mse, 4.0 * mean_sq, 1e-9),
    );
    let m = traj_metrics(&[[1.0, 0.0]; 8], &[[0.0, 1.0]; 8])?;
    check(
        "traj orthogonal",
        m.mse == 1.0 && m.mae == 1.0 && m.cos_sim == 0.0,
    );
    // PCA
    let mut r = rng::stream(8, "acceptance.pca");
    let (u, v): (Vec<f64>, Vec<f64>) = (
        (0..16).map(|_| r.random_range(-1.0..1.0)).collect(),
        (0..16).map(|_| r.random_range(-1.0..1.0)).collect(),
    );
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let (a, b): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-0.5..0.5));
            (0..16).map(|k| 0.3 + a * u[k] + b * v[k]).collect()
        })
        .collect();
    let p = pca_project(&rows, 2, 1)?;
    let recon_err = rows
        .iter()
        .zip(&p.coords)
        .map(|(row, c)| {
            (0..16)
                .map(|k| (p.mean[k] + c[0] * p.axes[0][k] + c[1] * p.axes[1][k] - row[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    check("pca plane reconstruction", recon_err < 1e-4);
    let centred = (0..2)
        .all(|a| (p.coords.iter().map(|c| c[a]).sum::<f64>() / p.coords.len() as f64).abs() < 1e-5);
    check("pca centring", centred);
    check("pca ordering", p.variances[0] >= p.variances[1]);
    // report
    let row = |gen: &str, gt: &str, c: Vec<[f32; 2]>, gc: Vec<[f32; 2]>, id: u64| RolloutRow {
        episode_id: id,
        step: 0,
        high_level: "put all the blocks in the center".into(),
        generated_low_level: gen.into(),
        chunk: c,
        gt_low_level: gt.into(),
        gt_chunk: gc,
    };
    let perfect: Vec<RolloutRow> = (0..5)
        .map(|i| {
            row(
                "push the red star to the left",
                "push the red star to the left",
                t.clone(),
                t.clone(),
                i,
            )
        })
        .collect();
    let rep = evaluate_run("m", &perfect, None)?;
    check(
        "report perfect rollouts",
        rep.bleu == 1.0 && rep.rouge1 == 1.0 && rep.mse == 0.0,
    );
    check(
        "report empty file",
        matches!(parse_rollouts(""), Err(CoreError::Schema { .. })),
    );
    let mixed: Vec<RolloutRow> = (0..31)
        .map(|i| {
            let a = (i as f32 * 0.37).sin() * 0.2;
            row(
                ["push the red star", "move the blue moon left", "push"][i % 3],
                "push the red star left",
                vec![[a, -a]; 8],
                vec![[-a, a * 0.5]; 8],
                i as u64,
            )
        })
        .collect();
    let rep = evaluate_run("m", &mixed, None)?;
    let rm = row_metrics(&mixed)?;
    let two_pass = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    check(
        "report population std",
        [
            (rep.bleu_std, &rm.bleu),
            (rep.rouge1_std, &rm.rouge1),
            (rep.meteor_std, &rm.meteor),
            (rep.mse_std, &rm.mse),
            (rep.mae_std, &rm.mae),
            (rep.cossim_std, &rm.cossim),
        ]
        .iter()
        .all(|(s, v)| close(*s, two_pass(v), 1e-9)),
    );
    // identities over random sentences
    let vocab = [
        "push", "move", "the", "red", "blue", "star", "moon", "left", "of", "near", "to",
    ];
    for _ in 0..500 {
        let mut sentence = || -> Vec<String> {
            (0..r.random_range(1..10))
                .map(|_| vocab[r.random_range(0..vocab.len())].to_string())
                .collect()
        };
        let (a, b) = (sentence(), sentence());
        let len = a.len() as f64;
        let ok = bleu(&a, &a, 4) == 1.0
            && rouge1_f1(&a, &a) == 1.0
            && close(rouge1_f1(&a, &b), rouge1_f1(&b, &a), 1e-12)
            && meteor(&a, &a) >= 1.0 - 0.5 / len.powi(3) - 1e-12
            && [bleu(&a, &b, 4), rouge1_f1(&a, &b), meteor(&a, &b)]
                .iter()
                .all(|v| (0.0..=1.0).contains(v));
        if !ok {
            check(&format!("text identities on {a:?} / {b:?}"), false);
            break;
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "all metric examples and identities hold".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 9

fn idle_filter_and_augmentation(_: &Shared) -> Result<Outcome> {
    let spread_over =
        |total: [f32; 2]| -> Vec<[f32; 2]> { vec![[total[0] / 8.0, total[1] / 8.0]; 8] };
    let filter_ok = !window_is_active(&spread_over([0.0, 0.0]), 0.1)
        && window_is_active(&spread_over([0.11, 0.0]), 0.1)
        && !window_is_active(&spread_over([0.05, 0.05]), 0.1)
        && window_is_active(&spread_over([0.0, -0.11]), 0.1);

    let sample = filter_idle_with(
        &generate_episode(9, TaskFamily::CornerGather),
        &WindowConfig::default(),
    )
    .into_iter()
    .next()
    .ok_or_else(|| anyhow!("episode produced no windows"))?;
    let cfg = AugmentConfig::default();
    let mut r = rng::stream(9, "acceptance.augment");
    const TRIALS: usize = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..TRIALS {
        let (_, t) = augment_with(&sample, &cfg, &mut r);
        for (c, hit) in counts.iter_mut().zip([
            t.brightness,
            t.contrast,
            t.saturation,
            t.crop,
            t.translate_v,
            t.translate_h,
            t.scale,
            t.action_noise,
        ]) {
            *c += hit as usize;
        }
    }
    let table = [
        ("brightness", 0.5),
        ("contrast", 0.5),
        ("saturation", 0.5),
        ("crop", 0.6),
        ("translate_v", 0.4),
        ("translate_h", 0.4),
        ("scale", 0.3),
        ("action_noise", 0.7),
    ];
    let mut worst = (String::new(), 0.0f64);
    for ((name, p), c) in table.iter().zip(counts) {
        let dev = (c as f64 / TRIALS as f64 - p).abs();
        if dev > worst.1 {
            worst = (name.to_string(), dev);
        }
    }
    outcome(
        filter_ok && worst.1 <= 0.02,
        format!(
            "idle-filter examples {}; largest augmentation frequency deviation {:.4} ({}) over {TRIALS} trials",
            if filter_ok { "pass" } else { "FAIL" },
            worst.1,
            worst.0
        ),
    )
}

// ---------------------------------------------------------------- 10

fn pipeline(out: &std::path::Path, config: &std::path::Path) -> Result<()> {
    let commands = [
        Command::Gen,
        Command::TrainGrounding,
        Command::TrainSup,
        Command::GplaTrain,
        Command::Rollout {
            policy: gpla_cli::stages::PolicyKind::Sup,
        },
        Command::Rollout {
            policy: gpla_cli::stages::PolicyKind::Gpla,
        },
        Command::Eval,
    ];
    for command in commands {
        run(&Cli {
            config: Some(config.to_path_buf()),
            seed: Some(11),
            out: out.to_path_buf(),
            threads: Some(2),
            command,
        })?;
    }
    Ok(())
}

fn reproducibility(_: &Shared) -> Result<Outcome> {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        pipeline(d.path(), &config)?;
    }
    let files = [
        "eval/report.csv",
        "gpla/steps.csv",
        "grounding/log.csv",
        "sup/log.csv",
        "rollout-sup/rollouts.jsonl",
        "rollout-gpla/rollouts.jsonl",
    ];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(dirs[0].path().join(f))? != std::fs::read(dirs[1].path().join(f))? {
            differing.push(f);
        }
    }
    let report = std::fs::read_to_string(dirs[0].path().join("eval/report.csv"))?;
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "gen -> eval twice: {} files bit-identical, report has {} rows",
                files.len(),
                report.lines().count() - 1
            )
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    )
}

// ----------------------------------------------------------------

type Criterion = fn(&Shared) -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("loss oracles", loss_oracles),
        ("gradient correctness", gradient_checks),
        ("grounding retrieval", retrieval),
        ("ranking validity", ranking_validity),
        ("GPLA improvement", gpla_improvement),
        ("regularizer variant", regularizer_variant),
        ("diversity regularizer effect", diversity_effect),
        ("metric unit suite", metric_suite),
        ("idle filter and augmentation", idle_filter_and_augmentation),
        ("reproducibility", reproducibility),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let shared = Shared {
        data: OnceCell::new(),
        grounding: OnceCell::new(),
    };
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match f(&shared) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {n:>2} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
