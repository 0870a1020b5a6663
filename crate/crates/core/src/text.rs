//! Closed-lexicon word tokenizer and the high-level prompt template.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::synthenv::generate::{TaskFamily, REGIONS, RELATIONS};
use crate::synthenv::world::{Color, Shape};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "<nl>";

/// Longest generated instruction, in tokens (excluding `<bos>`).
pub const DEFAULT_MAX_LEN: usize = 24;

const PUNCT: [char; 4] = ['.', ':', '?', ','];

const PROMPT_WORDS: &str = "System You are controlling a robotic agent Your task is to User What should the robot do next Answer";
const CAPTION_WORDS: &str = "move push the towards corner";

pub const PROMPT_PREFIX: &str = "System: You are controlling a robotic agent. Your task is to ";
pub const PROMPT_SUFFIX: &str = ".\nUser: What should the robot do next?\nAnswer:";

/// Renders the instruction-rewriting prompt for one high-level task.
pub fn render_prompt(high_level: &str) -> Result<String> {
    if high_level.trim().is_empty() {
        return Err(CoreError::Contract("empty high-level instruction".into()));
    }
    Ok(format!("{PROMPT_PREFIX}{high_level}{PROMPT_SUFFIX}"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    pub max_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    /// The fixed lexicon of prompts, task phrasings and caption templates.
    pub fn new() -> Self {
        let mut words: Vec<String> = [PAD, BOS, EOS, UNK, NEWLINE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(PUNCT.iter().map(|c| c.to_string()));
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in PROMPT_WORDS.split(' ') {
            push(w);
        }
        for f in TaskFamily::ALL {
            for w in f.high_level().split(' ') {
                push(w);
            }
        }
        for w in CAPTION_WORDS.split(' ') {
            push(w);
        }
        for c in Color::ALL {
            push(c.word());
        }
        for s in Shape::ALL {
            push(s.word());
        }
        for phrase in RELATIONS.iter().chain(REGIONS.iter()) {
            for w in phrase.split(' ') {
                push(w);
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            words,
            index,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.index[UNK])
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    pub fn bos_id(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn word(&self, id: u32) -> &str {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    /// Splits text into lexicon words: whitespace-separated, trailing
    /// punctuation peeled off as its own token, newlines as `<nl>`.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (li, line) in text.split('\n').enumerate() {
            if li > 0 {
                out.push(NEWLINE.to_string());
            }
            for raw in line.split_whitespace() {
                let mut w = raw;
                let mut tail = Vec::new();
                while let Some(c) = w.chars().last().filter(|c| PUNCT.contains(c)) {
                    if w.len() == 1 {
                        break;
                    }
                    tail.push(c.to_string());
                    w = &w[..w.len() - c.len_utf8()];
                }
                out.push(w.to_string());
                out.extend(tail.into_iter().rev());
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        Self::split(text).iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Self::encode`] on in-lexicon text.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        let mut at_line_start = true;
        for &id in ids {
            let w = self.word(id);
            if w == NEWLINE {
                s.push('\n');
                at_line_start = true;
                continue;
            }
            let is_punct = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
            if !at_line_start && !is_punct {
                s.push(' ');
            }
            s.push_str(w);
            at_line_start = false;
        }
        s
    }

    /// Instruction ids followed by `<eos>`; errors on empty text.
    pub fn encode_instruction(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text);
        if ids.is_empty() {
            return Err(CoreError::Contract("empty instruction".into()));
        }
        ids.truncate(self.max_len - 1);
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// `<bos>` + prompt tokens.
    pub fn encode_prompt(&self, high_level: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.bos_id()];
        ids.extend(self.encode(&render_prompt(high_level)?));
        Ok(ids)
    }

    /// Ids padded (or truncated) to `len` plus the validity mask.
    pub fn pad_to(&self, ids: &[u32], len: usize) -> (Vec<u32>, Vec<bool>) {
        let mut out: Vec<u32> = ids.iter().copied().take(len).collect();
        let mut mask = vec![true; out.len()];
        out.resize(len, self.pad_id());
        mask.resize(len, false);
        (out, mask)
    }
}
