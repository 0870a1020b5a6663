//! On-disk dataset layout (`format_version` 1):
//!
//! ```text
//! DIR/dataset.json          DatasetMeta
//! DIR/episodes/NNNN.json    EpisodeFile (episode + format_version)
//! DIR/frames/NNNN.u8        packed frames: len(frames) x S x S x 3 bytes, row-major HWC
//! ```
//!
//! Frames are the renders of `episode.frames` at `DatasetMeta::image_size`;
//! they are redundant with the board states but let external tools read the
//! pixels without re-implementing the renderer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Episode, TaskFamily};
use super::world::{render, Image};
use crate::error::{CoreError, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub task_families: Vec<TaskFamily>,
    pub episodes: usize,
    pub image_size: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeFile {
    format_version: u32,
    #[serde(flatten)]
    episode: Episode,
}

pub fn save_dataset(dir: &Path, meta: &DatasetMeta, episodes: &[Episode]) -> Result<()> {
    fs::create_dir_all(dir.join("episodes"))?;
    fs::create_dir_all(dir.join("frames"))?;
    for (i, ep) in episodes.iter().enumerate() {
        let file = EpisodeFile {
            format_version: DATASET_FORMAT_VERSION,
            episode: ep.clone(),
        };
        fs::write(
            dir.join("episodes").join(format!("{i:04}.json")),
            serde_json::to_vec(&file)?,
        )?;
        let mut blob = Vec::with_capacity(ep.frames.len() * meta.image_size * meta.image_size * 3);
        for f in &ep.frames {
            blob.extend(render(f, meta.image_size).to_u8());
        }
        fs::write(dir.join("frames").join(format!("{i:04}.u8")), blob)?;
    }
    fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("dataset.json");
    let bytes = fs::read(&path).map_err(|e| {
        CoreError::Config(format!(
            "cannot read {}: {e} (produced by the `gen` stage)",
            path.display()
        ))
    })?;
    let meta: DatasetMeta = serde_json::from_slice(&bytes)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(CoreError::Config(format!(
            "dataset format_version {} unsupported (expected {DATASET_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<Episode>)> {
    let meta = load_meta(dir)?;
    let mut episodes = Vec::with_capacity(meta.episodes);
    for i in 0..meta.episodes {
        let bytes = fs::read(dir.join("episodes").join(format!("{i:04}.json")))?;
        let file: EpisodeFile = serde_json::from_slice(&bytes)?;
        if file.format_version != DATASET_FORMAT_VERSION {
            return Err(CoreError::Config(format!(
                "episode {i}: unsupported format_version {}",
                file.format_version
            )));
        }
        episodes.push(file.episode);
    }
    Ok((meta, episodes))
}

/// Reads frame `t` of episode file `index` from the packed blob.
pub fn load_frame(dir: &Path, meta: &DatasetMeta, index: usize, t: usize) -> Result<Image> {
    let s = meta.image_size;
    let blob = fs::read(dir.join("frames").join(format!("{index:04}.u8")))?;
    let n = s * s * 3;
    let bytes = blob.get(t * n..(t + 1) * n).ok_or_else(|| {
        CoreError::Contract(format!("frame {t} out of range for episode {index}"))
    })?;
    Ok(Image::from_u8(s, s, bytes))
}
