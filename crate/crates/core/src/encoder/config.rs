use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};

pub const DEFAULT_V_STAR: &str = "sks";
pub const DEFAULT_EOS: &str = "<eos>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: Vec<String>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_out: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default = "default_v_star")]
    pub v_star: String,
    #[serde(default = "default_eos")]
    pub eos: String,
}

fn default_v_star() -> String {
    DEFAULT_V_STAR.to_string()
}

fn default_eos() -> String {
    DEFAULT_EOS.to_string()
}

impl EncoderConfig {
    /// Toy-scale defaults: d=64, 4 layers, 4 heads, 32-d output.
    pub fn toy(vocab: Vec<String>, seed: u64) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_out: 32,
            max_seq: 16,
            seed,
            v_star: default_v_star(),
            eos: default_eos(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(PolarError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_out == 0 || self.max_seq < 2 {
            return Err(PolarError::Config("degenerate encoder dimensions".into()));
        }
        for reserved in [&self.v_star, &self.eos] {
            if !self.vocab.contains(reserved) {
                return Err(PolarError::Config(format!("vocab lacks reserved token '{reserved}'")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.vocab.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(PolarError::Config(format!("duplicate vocab entry '{dup}'")));
        }
        Ok(())
    }
}

/// Lowercasing whitespace tokenizer over a closed vocabulary.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    ids: HashMap<String, u32>,
    eos: u32,
    v_star: u32,
    max_seq: usize,
}

impl Tokenizer {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ids: HashMap<String, u32> = cfg
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_lowercase(), i as u32))
            .collect();
        Ok(Self {
            eos: ids[&cfg.eos.to_lowercase()],
            v_star: ids[&cfg.v_star.to_lowercase()],
            ids,
            max_seq: cfg.max_seq,
        })
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn v_star(&self) -> u32 {
        self.v_star
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(&word.to_lowercase()).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let lower = word.to_lowercase();
            match self.ids.get(&lower) {
                Some(&id) => out.push(id),
                None => return Err(PolarError::UnknownWord(word.to_string())),
            }
        }
        if out.is_empty() {
            return Err(PolarError::Empty("query text".into()));
        }
        out.push(self.eos);
        if out.len() > self.max_seq {
            return Err(PolarError::TooLong {
                len: out.len(),
                max: self.max_seq,
            });
        }
        Ok(out)
    }
}
