//! Hierarchical policy: an instruction LM that rewrites the high-level task
//! into a low-level instruction, and a decoder that turns that instruction
//! plus the observation into an action chunk.

pub mod decoder;
pub mod lm;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{DecodeInput, DecoderConfig, LowLevelDecoder};
pub use lm::{sample_token, Generation, HighLevelLm, LmConfig, Scored};
pub use train::{
    lm_cross_entropy, train_decoder, train_lm, train_supervised, SupervisedConfig, SupervisedLog,
};

use crate::error::{CoreError, Result};
use crate::synthenv::world::{ActionChunk, Observation};

/// Tokenized instruction prompt for a high-level task.
pub fn build_prompt(lm: &HighLevelLm, high_level: &str) -> Result<Vec<u32>> {
    lm.tokenizer.encode_prompt(high_level)
}

/// One sampled language-action candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub low_level: String,
    pub chunk: ActionChunk,
    /// Generated ids including `<eos>` when emitted.
    pub ids: Vec<u32>,
    pub sum_logprob: f64,
    pub token_count: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub lm: HighLevelLm,
    pub decoder: LowLevelDecoder,
}

impl Policy {
    /// `n` candidates for one `(x, o)`: sampled instructions (greedy when
    /// `temperature` is `None`) each decoded into a chunk.
    pub fn generate_candidates(
        &self,
        high_level: &str,
        observation: &Observation,
        n: usize,
        temperature: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Vec<Candidate>> {
        if n < 2 {
            return Err(CoreError::Contract(format!(
                "need at least 2 candidates, got {n}"
            )));
        }
        if let Some(t) = temperature {
            if !(t > 0.0) {
                return Err(CoreError::Contract(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        let prompt = build_prompt(&self.lm, high_level)?;
        let (cache, logits) = self.lm.prefill(observation, &prompt)?;
        let gens = (0..n)
            .map(|_| {
                self.lm
                    .continue_from(cache.clone(), logits.clone(), temperature, rng)
            })
            .collect::<Result<Vec<Generation>>>()?;
        let inputs: Vec<DecodeInput> = gens
            .iter()
            .map(|gen| DecodeInput {
                observation,
                high_level,
                low_level: &gen.text,
            })
            .collect();
        let chunks = self.decoder.decode_batch(&inputs)?;
        Ok(gens
            .into_iter()
            .zip(chunks)
            .map(|(gen, chunk)| Candidate {
                low_level: gen.text,
                chunk,
                ids: gen.ids,
                sum_logprob: gen.sum_logprob,
                token_count: gen.token_count,
                truncated: gen.truncated,
            })
            .collect())
    }

    /// Inference-time wiring: greedy instruction, then its chunk.
    pub fn act(
        &self,
        high_level: &str,
        observation: &Observation,
    ) -> Result<(Generation, ActionChunk)> {
        let mut unused = crate::rng::stream(0, "greedy");
        let gen = self.lm.sample(observation, high_level, None, &mut unused)?;
        let chunk = self
            .decoder
            .decode_chunk(observation, high_level, &gen.text)?;
        Ok((gen, chunk))
    }
}
