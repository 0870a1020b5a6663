//! Rollout files and the aggregated evaluation report.

use serde::{Deserialize, Serialize};

use super::stats::mean_std;
use super::text::{bleu, meteor, normalize, rouge1_f1};
use super::traj::traj_metrics;
use crate::error::{CoreError, Result};
use crate::grounding::GroundingModel;
use crate::policy::Policy;
use crate::synthenv::dataset::Sample;
use crate::synthenv::world::{ActionChunk, Observation};

/// One open-loop rollout step: what the policy produced next to the ground
/// truth for the same observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRow {
    pub episode_id: u64,
    pub step: usize,
    pub high_level: String,
    pub generated_low_level: String,
    pub chunk: Vec<[f32; 2]>,
    pub gt_low_level: String,
    pub gt_chunk: Vec<[f32; 2]>,
}

/// Runs the full hierarchy (greedy instruction, then its chunk) on each
/// sample.
pub fn rollout_rows(policy: &Policy, samples: &[Sample]) -> Result<Vec<RolloutRow>> {
    samples
        .iter()
        .map(|s| {
            let (gen, chunk) = policy.act(&s.high_level, &s.observation)?;
            Ok(RolloutRow {
                episode_id: s.episode_id,
                step: s.step,
                high_level: s.high_level.clone(),
                generated_low_level: gen.text,
                chunk: chunk.deltas,
                gt_low_level: s.low_level.clone(),
                gt_chunk: s.chunk.deltas.clone(),
            })
        })
        .collect()
}

pub fn write_rollouts(rows: &[RolloutRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL rollouts; errors name the 1-based line.
pub fn parse_rollouts(text: &str) -> Result<Vec<RolloutRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| CoreError::Schema {
            line: i + 1,
            message,
        };
        let row: RolloutRow = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if row.chunk.is_empty() || row.chunk.len() != row.gt_chunk.len() {
            return Err(schema(format!(
                "chunk has {} steps but gt_chunk has {}",
                row.chunk.len(),
                row.gt_chunk.len()
            )));
        }
        if row.gt_low_level.trim().is_empty() {
            return Err(schema("gt_low_level is empty".into()));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CoreError::Schema {
            line: 0,
            message: "rollout file holds no rows".into(),
        });
    }
    Ok(rows)
}

/// One CSV row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub bleu: f64,
    pub bleu_std: f64,
    pub rouge1: f64,
    pub rouge1_std: f64,
    pub meteor: f64,
    pub meteor_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    pub mae: f64,
    pub mae_std: f64,
    pub cossim: f64,
    pub cossim_std: f64,
    pub ground_score: Option<f64>,
}

/// Per-row metric values, before aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMetrics {
    pub bleu: Vec<f64>,
    pub rouge1: Vec<f64>,
    pub meteor: Vec<f64>,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub cossim: Vec<f64>,
    pub ground: Vec<f64>,
}

pub fn row_metrics(rows: &[RolloutRow]) -> Result<RowMetrics> {
    let mut m = RowMetrics::default();
    for r in rows {
        let (h, g) = (
            normalize(&r.generated_low_level),
            normalize(&r.gt_low_level),
        );
        m.bleu.push(bleu(&h, &g, 4));
        m.rouge1.push(rouge1_f1(&h, &g));
        m.meteor.push(meteor(&h, &g));
        let t = traj_metrics(&r.chunk, &r.gt_chunk)?;
        m.mse.push(t.mse);
        m.mae.push(t.mae);
        m.cossim.push(t.cos_sim);
    }
    Ok(m)
}

/// Grounding scores of (observation, generated chunk, generated
/// instruction); an empty instruction scores -1.
pub fn rollout_grounding_scores(
    rows: &[RolloutRow],
    grounding: &GroundingModel,
    observation: &dyn Fn(u64, usize) -> Result<Observation>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for batch in rows.chunks(64) {
        let obs = batch
            .iter()
            .map(|r| observation(r.episode_id, r.step))
            .collect::<Result<Vec<_>>>()?;
        let chunks: Vec<ActionChunk> = batch
            .iter()
            .map(|r| ActionChunk {
                deltas: r.chunk.clone(),
            })
            .collect();
        let keep: Vec<usize> = (0..batch.len())
            .filter(|&i| !batch[i].generated_low_level.trim().is_empty())
            .collect();
        let mut scores = vec![-1.0; batch.len()];
        if !keep.is_empty() {
            let o: Vec<&Observation> = keep.iter().map(|&i| &obs[i]).collect();
            let c: Vec<&ActionChunk> = keep.iter().map(|&i| &chunks[i]).collect();
            let t: Vec<&str> = keep
                .iter()
                .map(|&i| batch[i].generated_low_level.as_str())
                .collect();
            for (k, s) in grounding.score_batch(&o, &c, &t)?.into_iter().enumerate() {
                scores[keep[k]] = s as f64;
            }
        }
        out.extend(scores);
    }
    Ok(out)
}

/// Aggregates mean and population std of every metric; the grounding
/// column is filled when a model and an observation lookup are given.
pub fn evaluate_run(
    model: &str,
    rows: &[RolloutRow],
    grounding: Option<(&GroundingModel, &dyn Fn(u64, usize) -> Result<Observation>)>,
) -> Result<ReportRow> {
    if rows.is_empty() {
        return Err(CoreError::Contract(
            "cannot evaluate an empty rollout set".into(),
        ));
    }
    let m = row_metrics(rows)?;
    let ground_score = match grounding {
        Some((g, lookup)) => Some(mean_std(&rollout_grounding_scores(rows, g, lookup)?).0),
        None => None,
    };
    let (bleu, bleu_std) = mean_std(&m.bleu);
    let (rouge1, rouge1_std) = mean_std(&m.rouge1);
    let (meteor, meteor_std) = mean_std(&m.meteor);
    let (mse, mse_std) = mean_std(&m.mse);
    let (mae, mae_std) = mean_std(&m.mae);
    let (cossim, cossim_std) = mean_std(&m.cossim);
    Ok(ReportRow {
        model: model.to_string(),
        bleu,
        bleu_std,
        rouge1,
        rouge1_std,
        meteor,
        meteor_std,
        mse,
        mse_std,
        mae,
        mae_std,
        cossim,
        cossim_std,
        ground_score,
    })
}
