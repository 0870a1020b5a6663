//! Training samples: idle-filtered sliding windows over episodes, and
//! episode-granular dataset splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::generate::Episode;
use super::world::{
    observe, ActionChunk, BoardState, Observation, DEFAULT_HORIZON, DEFAULT_IMAGE_SIZE,
};
use crate::error::{CoreError, Result};
use crate::rng;

pub const DEFAULT_IDLE_THRESHOLD: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub episode_id: u64,
    pub step: usize,
    pub observation: Observation,
    /// Underlying board at `step`; augmentations never touch it.
    pub board: BoardState,
    pub high_level: String,
    pub low_level: String,
    pub chunk: ActionChunk,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("{:04}_{:04}", self.episode_id, self.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub threshold: f32,
    pub horizon: usize,
    pub image_size: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_IDLE_THRESHOLD,
            horizon: DEFAULT_HORIZON,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

/// True iff the summed absolute displacement over the window exceeds
/// `threshold` along at least one action dimension.
pub fn window_is_active(deltas: &[[f32; 2]], threshold: f32) -> bool {
    let mut total = [0.0f64; 2];
    for d in deltas {
        total[0] += d[0].abs() as f64;
        total[1] += d[1].abs() as f64;
    }
    total.iter().any(|t| *t > threshold as f64)
}

/// Start indices of the windows that survive the idle filter.
pub fn active_windows(episode: &Episode, threshold: f32, horizon: usize) -> Vec<usize> {
    if horizon == 0 || episode.actions.len() < horizon {
        return Vec::new();
    }
    (0..=episode.actions.len() - horizon)
        .filter(|&t| window_is_active(&episode.actions[t..t + horizon], threshold))
        .collect()
}

/// One sample per non-idle window of the default horizon, rendered at the
/// default resolution.
pub fn filter_idle(episode: &Episode, threshold: f32) -> Vec<Sample> {
    filter_idle_with(
        episode,
        &WindowConfig {
            threshold,
            ..WindowConfig::default()
        },
    )
}

pub fn filter_idle_with(episode: &Episode, cfg: &WindowConfig) -> Vec<Sample> {
    active_windows(episode, cfg.threshold, cfg.horizon)
        .into_iter()
        .filter_map(|t| {
            let seg = episode.segment_at(t)?;
            let board = episode.frames[t].clone();
            Some(Sample {
                episode_id: episode.id,
                step: t,
                observation: observe(&board, cfg.image_size),
                board,
                high_level: episode.high_level.clone(),
                low_level: seg.low_level.clone(),
                chunk: ActionChunk {
                    deltas: episode.actions[t..t + cfg.horizon].to_vec(),
                },
            })
        })
        .collect()
}

/// Episode indices per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles episode indices with `seed` and cuts them by `fractions`.
pub fn split_episode_indices(
    n: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<EpisodeSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !f.is_finite() || *f <= 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    if n < 3 {
        return Err(CoreError::Config(format!(
            "need at least 3 episodes to split three ways, got {n}"
        )));
    }
    let n_train = ((n as f64 * a).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * b).round() as usize).clamp(1, n - n_train - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(EpisodeSplit {
        train: idx,
        val,
        test,
    })
}

/// Splits at episode granularity, then windows each side independently.
pub fn split_dataset(
    episodes: &[Episode],
    fractions: (f64, f64, f64),
    seed: u64,
    cfg: &WindowConfig,
) -> Result<Splits> {
    let split = split_episode_indices(episodes.len(), fractions, seed)?;
    let take = |ids: &[usize]| {
        ids.iter()
            .flat_map(|&i| filter_idle_with(&episodes[i], cfg))
            .collect()
    };
    Ok(Splits {
        train: take(&split.train),
        val: take(&split.val),
        test: take(&split.test),
    })
}
