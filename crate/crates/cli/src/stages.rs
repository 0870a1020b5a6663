//! Pipeline stages. Each one reads upstream artifact directories under the
//! run directory, checks their manifests, and writes its own directory with
//! a manifest last.
//!
//! ```text
//! RUN/data/          gen              dataset, splits.json
//! RUN/grounding/     train-grounding  model.ckpt, log.csv
//! RUN/sup/           train-sup        lm.ckpt, decoder.ckpt, log.csv
//! RUN/gpla/          gpla-train       lm.ckpt, steps.csv, pairs.jsonl
//! RUN/rollout-sup/   rollout          rollouts.jsonl
//! RUN/rollout-gpla/  rollout --policy gpla
//! RUN/eval/          eval             report.csv
//! RUN/score/         score            scores.csv
//! RUN/embed/         embed            embeddings.jsonl
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gpla_core::evalkit::{evaluate_run, parse_rollouts, rollout_rows, write_rollouts, ReportRow};
use gpla_core::gpla::gpla_train_threaded;
use gpla_core::grounding::{train_grounding, GroundingModel};
use gpla_core::policy::{train_supervised, HighLevelLm, LowLevelDecoder, Policy};
use gpla_core::rng::derive_seed;
use gpla_core::synthenv::dataset::{filter_idle_with, split_episode_indices};
use gpla_core::synthenv::store::{load_dataset, save_dataset, DatasetMeta, DATASET_FORMAT_VERSION};
use gpla_core::synthenv::{generate_episode, Observation, Sample};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{
    file_sha256, save_atomic, sha256_hex, write_atomic, Manifest, ManifestBuilder, Upstream,
    MANIFEST_FILE,
};
use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    TrainGrounding,
    TrainSup,
    GplaTrain,
    RolloutSup,
    RolloutGpla,
    Eval,
    Score,
    Embed,
}

impl Stage {
    /// Artifact directory name under the run directory.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Gen => "data",
            Stage::TrainGrounding => "grounding",
            Stage::TrainSup => "sup",
            Stage::GplaTrain => "gpla",
            Stage::RolloutSup => "rollout-sup",
            Stage::RolloutGpla => "rollout-gpla",
            Stage::Eval => "eval",
            Stage::Score => "score",
            Stage::Embed => "embed",
        }
    }

    /// Stage name recorded in manifests.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainGrounding => "train-grounding",
            Stage::TrainSup => "train-sup",
            Stage::GplaTrain => "gpla-train",
            Stage::RolloutSup => "rollout-sup",
            Stage::RolloutGpla => "rollout-gpla",
            Stage::Eval => "eval",
            Stage::Score => "score",
            Stage::Embed => "embed",
        }
    }

    /// The command that produces this stage's directory.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainGrounding => "train-grounding",
            Stage::TrainSup => "train-sup",
            Stage::GplaTrain => "gpla-train",
            Stage::RolloutSup => "rollout --policy sup",
            Stage::RolloutGpla => "rollout --policy gpla",
            Stage::Eval => "eval",
            Stage::Score => "score",
            Stage::Embed => "embed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyKind {
    /// Supervised LM and decoder.
    Sup,
    /// GPLA-aligned LM with the supervised decoder.
    Gpla,
}

impl PolicyKind {
    pub fn rollout_stage(self) -> Stage {
        match self {
            PolicyKind::Sup => Stage::RolloutSup,
            PolicyKind::Gpla => Stage::RolloutGpla,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Sup => "sup",
            PolicyKind::Gpla => "gpla",
        }
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

/// Hash of the configuration sections `stage` depends on, including those
/// of its upstream stages. Eval's hash also depends on which rollouts exist
/// and is computed from their manifests instead.
pub fn config_hash(stage: Stage, cfg: &RunConfig) -> String {
    let h = |s| config_hash(s, cfg);
    let v = match stage {
        Stage::Gen => json!({"stage": "gen", "seed": cfg.seed, "data": cfg.data}),
        Stage::TrainGrounding => json!({
            "stage": "train-grounding", "up": h(Stage::Gen),
            "grounding": cfg.grounding, "grounding_train": cfg.grounding_train,
        }),
        Stage::TrainSup => json!({
            "stage": "train-sup", "up": h(Stage::Gen),
            "lm": cfg.lm, "decoder": cfg.decoder, "supervised": cfg.supervised,
        }),
        Stage::GplaTrain => json!({
            "stage": "gpla-train", "up": [h(Stage::TrainGrounding), h(Stage::TrainSup)], "gpla": cfg.gpla,
        }),
        Stage::RolloutSup => {
            json!({"stage": "rollout-sup", "up": h(Stage::TrainSup), "eval": cfg.eval})
        }
        Stage::RolloutGpla => {
            json!({"stage": "rollout-gpla", "up": h(Stage::GplaTrain), "eval": cfg.eval})
        }
        Stage::Score | Stage::Embed | Stage::Eval => json!({
            "stage": stage.name(), "up": h(Stage::TrainGrounding), "eval": cfg.eval,
        }),
    };
    hash_json(&v)
}

pub struct Ctx {
    pub run_dir: PathBuf,
    pub cfg: RunConfig,
    pub threads: usize,
}

impl Ctx {
    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir_name())
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.seed, name)
    }

    /// Loads and verifies an upstream manifest produced under the current
    /// configuration.
    fn require(&self, stage: Stage) -> Result<Upstream> {
        require_at(
            &self.dir(stage),
            stage,
            Some(&config_hash(stage, &self.cfg)),
        )
    }

    fn builder(&self, stage: Stage, upstream: Vec<Upstream>) -> Result<ManifestBuilder> {
        let hash = match stage {
            Stage::Eval => hash_json(&json!({
                "stage": "eval",
                "up": upstream.iter().map(|u| &u.config_hash).collect::<Vec<_>>(),
            })),
            s => config_hash(s, &self.cfg),
        };
        ManifestBuilder::new(
            &self.dir(stage),
            stage.name(),
            hash,
            self.cfg.seed,
            upstream,
        )
    }
}

/// `expected_hash = None` accepts any configuration (explicit path
/// overrides).
pub fn require_at(dir: &Path, stage: Stage, expected_hash: Option<&str>) -> Result<Upstream> {
    if !dir.join(MANIFEST_FILE).exists() {
        bail!(
            "missing prerequisite: {} has no manifest; run `gpla {}` first",
            dir.display(),
            stage.command()
        );
    }
    let m = Manifest::load(dir)?;
    if m.stage != stage.name() {
        bail!(
            "{} holds `{}` output, expected `{}`",
            dir.display(),
            m.stage,
            stage.name()
        );
    }
    if let Some(want) = expected_hash {
        if m.config_hash != want {
            bail!(
                "{} was produced under a different configuration; rerun `gpla {}`",
                dir.display(),
                stage.command()
            );
        }
    }
    m.verify(dir)?;
    Ok(Upstream {
        stage: m.stage.clone(),
        config_hash: m.config_hash.clone(),
        manifest_sha256: file_sha256(&dir.join(MANIFEST_FILE))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn held_out(name: &str) -> Result<Self> {
        match name {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(anyhow!("unknown split {other:?}")),
        }
    }
}

/// Windows of one split. Training windows are thinned by
/// `data.train_stride`; held-out windows are capped at `eval.max_samples`
/// by even subsampling.
pub fn load_split(data_dir: &Path, cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let (_, episodes) = load_dataset(data_dir)?;
    let file: SplitFile = serde_json::from_slice(
        &fs::read(data_dir.join("splits.json")).context("reading splits.json")?,
    )?;
    let wc = cfg.data.window();
    let ids = match split {
        Split::Train => &file.train,
        Split::Val => &file.val,
        Split::Test => &file.test,
    };
    let mut out: Vec<Sample> = Vec::new();
    let mut k = 0usize;
    for &i in ids {
        let ep = episodes.get(i).ok_or_else(|| {
            anyhow!(
                "splits.json names episode {i}, dataset has {}",
                episodes.len()
            )
        })?;
        for s in filter_idle_with(ep, &wc) {
            if split != Split::Train || k.is_multiple_of(cfg.data.train_stride) {
                out.push(s);
            }
            k += 1;
        }
    }
    let cap = cfg.eval.max_samples;
    if split != Split::Train && cap > 0 && out.len() > cap {
        let n = out.len();
        out = (0..cap).map(|j| out[j * n / cap].clone()).collect();
    }
    if out.is_empty() {
        bail!("the {split:?} split holds no windows; increase data.episodes");
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(
        path,
        &w.into_inner().map_err(|e| anyhow!("flushing csv: {e}"))?,
    )
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn gen(ctx: &Ctx) -> Result<Manifest> {
    let d = &ctx.cfg.data;
    let b = ctx.builder(Stage::Gen, vec![])?;
    let dir = b.dir().to_path_buf();
    let episodes: Vec<_> = (0..d.episodes)
        .map(|i| {
            let family = d.task_families[i % d.task_families.len()];
            generate_episode(derive_seed(ctx.cfg.seed, &format!("episode.{i}")), family)
        })
        .collect();
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        seed: ctx.cfg.seed,
        task_families: d.task_families.clone(),
        episodes: d.episodes,
        image_size: d.image_size,
    };
    save_dataset(&dir, &meta, &episodes)?;
    let split = split_episode_indices(d.episodes, d.fractions(), ctx.seed("split"))?;
    let file = SplitFile {
        train: split.train,
        val: split.val,
        test: split.test,
    };
    write_atomic(&dir.join("splits.json"), &serde_json::to_vec_pretty(&file)?)?;
    info!(
        "generated {} episodes ({} train / {} val / {} test)",
        d.episodes,
        file.train.len(),
        file.val.len(),
        file.test.len()
    );
    b.finish()
}

pub fn train_grounding_stage(ctx: &Ctx) -> Result<Manifest> {
    let up = ctx.require(Stage::Gen)?;
    let data = load_split(&ctx.dir(Stage::Gen), &ctx.cfg, Split::Train)?;
    info!("training the grounding model on {} windows", data.len());
    let b = ctx.builder(Stage::TrainGrounding, vec![up])?;
    let mut model = GroundingModel::new(&ctx.cfg.grounding, ctx.seed("grounding.init"))?;
    let logs = train_grounding(
        &mut model,
        &data,
        &ctx.cfg.grounding_train,
        ctx.seed("grounding.train"),
        |l| {
            info!(
            "grounding step {}: loss {:.4} (contrastive {:.4}, diversity {:.4}) top1 {:.3} tau {:.4}",
            l.step, l.loss, l.contrastive, l.diversity, l.retrieval_top1, l.tau
        )
        },
    )?;
    save_atomic(&b.dir().join("model.ckpt"), |p| model.save(p))?;
    write_csv(&b.dir().join("log.csv"), &logs)?;
    b.finish()
}

pub fn train_sup_stage(ctx: &Ctx) -> Result<Manifest> {
    let up = ctx.require(Stage::Gen)?;
    let data = load_split(&ctx.dir(Stage::Gen), &ctx.cfg, Split::Train)?;
    info!("supervised training on {} windows", data.len());
    let b = ctx.builder(Stage::TrainSup, vec![up])?;
    let mut lm = HighLevelLm::new(&ctx.cfg.lm, ctx.seed("lm.init"))?;
    let mut dec = LowLevelDecoder::new(&ctx.cfg.decoder, ctx.seed("decoder.init"))?;
    let logs = train_supervised(
        &mut lm,
        &mut dec,
        &data,
        &ctx.cfg.supervised,
        ctx.seed("supervised"),
        |l| info!("{} step {}: loss {:.5}", l.stage, l.step, l.loss),
    )?;
    save_atomic(&b.dir().join("lm.ckpt"), |p| lm.save(p))?;
    save_atomic(&b.dir().join("decoder.ckpt"), |p| dec.save(p))?;
    write_csv(&b.dir().join("log.csv"), &logs)?;
    b.finish()
}

fn load_policy(ctx: &Ctx, kind: PolicyKind) -> Result<Policy> {
    let sup = ctx.dir(Stage::TrainSup);
    let lm_path = match kind {
        PolicyKind::Sup => sup.join("lm.ckpt"),
        PolicyKind::Gpla => ctx.dir(Stage::GplaTrain).join("lm.ckpt"),
    };
    Ok(Policy {
        lm: HighLevelLm::load(&lm_path)?,
        decoder: LowLevelDecoder::load(&sup.join("decoder.ckpt"))?,
    })
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    mean_g_chosen: f64,
    mean_g_rejected: f64,
    pairs_used: usize,
    simpo_loss: f64,
    ce_loss: Option<f64>,
}

pub fn gpla_stage(ctx: &Ctx) -> Result<Manifest> {
    let ups = vec![
        ctx.require(Stage::Gen)?,
        ctx.require(Stage::TrainGrounding)?,
        ctx.require(Stage::TrainSup)?,
    ];
    let data = load_split(&ctx.dir(Stage::Gen), &ctx.cfg, Split::Train)?;
    let grounding = GroundingModel::load(&ctx.dir(Stage::TrainGrounding).join("model.ckpt"))?;
    let mut policy = load_policy(ctx, PolicyKind::Sup)?;
    let b = ctx.builder(Stage::GplaTrain, ups)?;
    info!(
        "GPLA on {} prompts with {} worker thread(s)",
        data.len(),
        ctx.threads
    );
    let report = gpla_train_threaded(
        &mut policy,
        &grounding,
        &data,
        &ctx.cfg.gpla,
        ctx.seed("gpla"),
        ctx.threads,
        |_| {},
    )?;
    if report.skipped_steps > 0 {
        log::warn!(
            "{} of {} GPLA steps had no usable preference pair",
            report.skipped_steps,
            report.steps.len()
        );
    }
    save_atomic(&b.dir().join("lm.ckpt"), |p| policy.lm.save(p))?;
    let rows: Vec<StepRow> = report
        .steps
        .iter()
        .map(|s| StepRow {
            step: s.step,
            mean_g_chosen: s.mean_g_chosen,
            mean_g_rejected: s.mean_g_rejected,
            pairs_used: s.pairs_used,
            simpo_loss: s.simpo_loss,
            ce_loss: s.ce_loss,
        })
        .collect();
    write_csv(&b.dir().join("steps.csv"), &rows)?;
    write_jsonl(&b.dir().join("pairs.jsonl"), &report.pairs)?;
    b.finish()
}

pub fn rollout_stage(ctx: &Ctx, kind: PolicyKind) -> Result<Manifest> {
    let mut ups = vec![ctx.require(Stage::Gen)?, ctx.require(Stage::TrainSup)?];
    if kind == PolicyKind::Gpla {
        ups.push(ctx.require(Stage::GplaTrain)?);
    }
    let split = Split::held_out(&ctx.cfg.eval.split)?;
    let samples = load_split(&ctx.dir(Stage::Gen), &ctx.cfg, split)?;
    let policy = load_policy(ctx, kind)?;
    let b = ctx.builder(kind.rollout_stage(), ups)?;
    info!(
        "rolling out the {} policy on {} held-out windows",
        kind.name(),
        samples.len()
    );
    let rows = rollout_rows(&policy, &samples)?;
    write_atomic(
        &b.dir().join("rollouts.jsonl"),
        write_rollouts(&rows)?.as_bytes(),
    )?;
    b.finish()
}

fn observation_lookup(samples: &[Sample]) -> HashMap<(u64, usize), Observation> {
    samples
        .iter()
        .map(|s| ((s.episode_id, s.step), s.observation.clone()))
        .collect()
}

pub fn eval_stage(ctx: &Ctx) -> Result<Manifest> {
    let mut ups = vec![
        ctx.require(Stage::Gen)?,
        ctx.require(Stage::TrainGrounding)?,
    ];
    let mut runs = Vec::new();
    for kind in [PolicyKind::Sup, PolicyKind::Gpla] {
        let dir = ctx.dir(kind.rollout_stage());
        if dir.join(MANIFEST_FILE).exists() {
            ups.push(ctx.require(kind.rollout_stage())?);
            runs.push((kind, dir.join("rollouts.jsonl")));
        }
    }
    if runs.is_empty() {
        bail!(
            "missing prerequisite: no rollouts under {}; run `gpla rollout` first",
            ctx.run_dir.display()
        );
    }
    let split = Split::held_out(&ctx.cfg.eval.split)?;
    let lookup = observation_lookup(&load_split(&ctx.dir(Stage::Gen), &ctx.cfg, split)?);
    let find = |ep: u64, step: usize| {
        lookup.get(&(ep, step)).cloned().ok_or_else(|| {
            gpla_core::CoreError::Contract(format!(
                "rollout row (episode {ep}, step {step}) is not in the held-out split"
            ))
        })
    };
    let grounding = GroundingModel::load(&ctx.dir(Stage::TrainGrounding).join("model.ckpt"))?;
    let b = ctx.builder(Stage::Eval, ups)?;
    let mut report: Vec<ReportRow> = Vec::new();
    for (kind, path) in runs {
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_rollouts(&text).with_context(|| format!("parsing {}", path.display()))?;
        let row = evaluate_run(kind.name(), &rows, Some((&grounding, &find)))?;
        info!(
            "{}: BLEU {:.4} ROUGE-1 {:.4} METEOR {:.4} MSE {:.6} ground {:.4}",
            row.model,
            row.bleu,
            row.rouge1,
            row.meteor,
            row.mse,
            row.ground_score.unwrap_or(f64::NAN)
        );
        report.push(row);
    }
    write_csv(&b.dir().join("report.csv"), &report)?;
    b.finish()
}

/// Grounding model and held-out samples for `score` / `embed`, honouring
/// explicit path overrides.
fn scoring_inputs(
    ctx: &Ctx,
    model: Option<&Path>,
    dataset: Option<&Path>,
) -> Result<(GroundingModel, Vec<Sample>, Vec<Upstream>)> {
    let mut ups = Vec::new();
    let data_dir = match dataset {
        Some(d) => {
            ups.push(require_at(d, Stage::Gen, None)?);
            d.to_path_buf()
        }
        None => {
            ups.push(ctx.require(Stage::Gen)?);
            ctx.dir(Stage::Gen)
        }
    };
    let model_path = match model {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| d.join(MANIFEST_FILE).exists()) {
                ups.push(require_at(parent, Stage::TrainGrounding, None)?);
            }
            p.to_path_buf()
        }
        None => {
            ups.push(ctx.require(Stage::TrainGrounding)?);
            ctx.dir(Stage::TrainGrounding).join("model.ckpt")
        }
    };
    let split = Split::held_out(&ctx.cfg.eval.split)?;
    let samples = load_split(&data_dir, &ctx.cfg, split)?;
    Ok((GroundingModel::load(&model_path)?, samples, ups))
}

#[derive(Serialize)]
struct ScoreRow {
    sample_id: String,
    score: f32,
}

pub fn score_stage(ctx: &Ctx, model: Option<&Path>, dataset: Option<&Path>) -> Result<Manifest> {
    let (g, samples, ups) = scoring_inputs(ctx, model, dataset)?;
    let b = ctx.builder(Stage::Score, ups)?;
    let mut rows = Vec::with_capacity(samples.len());
    for batch in samples.chunks(64) {
        let obs: Vec<_> = batch.iter().map(|s| &s.observation).collect();
        let chunks: Vec<_> = batch.iter().map(|s| &s.chunk).collect();
        let texts: Vec<_> = batch.iter().map(|s| s.low_level.as_str()).collect();
        for (s, score) in batch.iter().zip(g.score_batch(&obs, &chunks, &texts)?) {
            rows.push(ScoreRow {
                sample_id: s.id(),
                score,
            });
        }
    }
    write_csv(&b.dir().join("scores.csv"), &rows)?;
    b.finish()
}

#[derive(Serialize)]
struct EmbedRow<'a> {
    id: String,
    modality: &'a str,
    vector: Vec<f32>,
}

pub fn embed_stage(ctx: &Ctx, model: Option<&Path>, dataset: Option<&Path>) -> Result<Manifest> {
    let (g, samples, ups) = scoring_inputs(ctx, model, dataset)?;
    let b = ctx.builder(Stage::Embed, ups)?;
    let mut rows = Vec::with_capacity(2 * samples.len());
    for batch in samples.chunks(64) {
        let obs: Vec<_> = batch.iter().map(|s| &s.observation).collect();
        let chunks: Vec<_> = batch.iter().map(|s| &s.chunk).collect();
        let texts: Vec<_> = batch.iter().map(|s| s.low_level.as_str()).collect();
        let va = g.embed_va(&obs, &chunks)?;
        let t = g.embed_text(&texts)?;
        for ((s, v), t) in batch.iter().zip(va).zip(t) {
            rows.push(EmbedRow {
                id: s.id(),
                modality: "va",
                vector: v,
            });
            rows.push(EmbedRow {
                id: s.id(),
                modality: "text",
                vector: t,
            });
        }
    }
    write_jsonl(&b.dir().join("embeddings.jsonl"), &rows)?;
    b.finish()
}
