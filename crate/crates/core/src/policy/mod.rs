//! Next-scale prediction policy.
//!
//! A decoder-only transformer reads the concatenated scale inputs
//! `e_1..e_K` under a block-causal mask and emits `D` token distributions
//! per position. The observation window enters twice: as the start token
//! `e_1` and through per-layer adaptive layer-norm modulation.

mod model;

pub use model::{ActionSequence, KvCache, Policy, PolicyOutput, TeacherBatch};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Argmax,
    TopK { k: usize, temperature: f32 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Argmax
    }
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    /// `argmax`, `topk:K` or `topk:K:T`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown sampler '{s}', expected argmax or topk:K[:T]"));
        if s == "argmax" {
            return Ok(Sampler::Argmax);
        }
        let rest = s.strip_prefix("topk:").ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let k = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let temperature = match parts.next() {
            Some(t) => t.parse().map_err(|_| bad())?,
            None => 1.0,
        };
        if parts.next().is_some() || k == 0 || !(temperature > 0.0) {
            return Err(bad());
        }
        Ok(Sampler::TopK { k, temperature })
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sampler::Argmax => write!(f, "argmax"),
            Sampler::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

impl Sampler {
    pub fn top_k() -> Self {
        Sampler::TopK { k: 3, temperature: 1.0 }
    }

    /// Draws one index from a row of logits.
    pub fn sample<R: Rng + ?Sized>(&self, logits: &[f32], rng: &mut R) -> Result<usize> {
        match *self {
            Sampler::Argmax => Ok(argmax(logits)),
            Sampler::TopK { k, temperature } => {
                if k == 0 || k > logits.len() {
                    return Err(Error::InvalidArgument(format!("top-k of {k} over {} logits", logits.len())));
                }
                let top = top_k_indices(logits, k);
                let m = logits[top[0]] as f64;
                let w: Vec<f64> = top.iter().map(|&i| ((logits[i] as f64 - m) / temperature as f64).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (&i, &wi) in top.iter().zip(&w) {
                    if u < wi {
                        return Ok(i);
                    }
                    u -= wi;
                }
                Ok(*top.last().unwrap())
            }
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, lower index first on ties.
pub fn top_k_indices(xs: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub scale_lens: Vec<usize>,
    pub codebook_size: usize,
    pub action_dims: usize,
    /// Code dimension of the tokenizers feeding the scale inputs (C).
    pub code_dim: usize,
    /// Observation steps per window (O).
    pub obs_steps: usize,
    pub obs_dim: usize,
    pub dropout: f32,
    pub sampler: Sampler,
    /// Number of tasks for the learnable 3-d task embedding, if any.
    pub num_tasks: Option<usize>,
}

pub const TASK_EMBED_DIM: usize = 3;

impl PolicyConfig {
    /// Defaults sized to a tokenizer config.
    pub fn for_tokenizer(tok: &crate::tokenizer::TokenizerConfig, action_dims: usize, obs_dim: usize) -> Self {
        PolicyConfig {
            width: 64,
            layers: 2,
            heads: 4,
            scale_lens: tok.scale_lens.clone(),
            codebook_size: tok.codebook_size,
            action_dims,
            code_dim: tok.code_dim,
            obs_steps: 2,
            obs_dim,
            dropout: 0.0,
            sampler: Sampler::Argmax,
            num_tasks: None,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scale_lens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.scale_lens.iter().sum()
    }

    /// Width of the raw condition input: flattened window plus task embedding.
    pub fn cond_input_dim(&self) -> usize {
        self.obs_steps * self.obs_dim + if self.num_tasks.is_some() { TASK_EMBED_DIM } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::Config("policy needs at least one layer".into()));
        }
        if self.scale_lens.is_empty() || self.scale_lens[0] == 0 || self.scale_lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scale lengths must be strictly increasing and positive: {:?}", self.scale_lens)));
        }
        if self.codebook_size < 2 || self.code_dim == 0 || self.action_dims == 0 || self.obs_steps == 0 || self.obs_dim == 0 {
            return Err(Error::Config("codebook size, action dims and observation sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Sampler::TopK { k, temperature } = self.sampler {
            if k == 0 || k > self.codebook_size || !(temperature > 0.0) {
                return Err(Error::Config(format!("top-k sampler k={k} T={temperature} invalid for V={}", self.codebook_size)));
            }
        }
        if self.num_tasks == Some(0) {
            return Err(Error::Config("task embedding needs at least one task".into()));
        }
        Ok(())
    }
}

/// Block-causal attention mask over the concatenated scale sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCausalMask {
    size: usize,
    blocks: Vec<usize>,
    allowed: Vec<bool>,
}

impl BlockCausalMask {
    pub fn new(scale_lens: &[usize]) -> Result<Self> {
        if scale_lens.is_empty() {
            return Err(Error::InvalidArgument("mask needs at least one scale".into()));
        }
        let blocks: Vec<usize> = scale_lens.iter().enumerate().flat_map(|(k, &l)| std::iter::repeat_n(k, l)).collect();
        let size = blocks.len();
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allowed[i * size + j] = blocks[j] <= blocks[i];
            }
        }
        Ok(BlockCausalMask { size, blocks, allowed })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// 0-based scale owning position `i`.
    pub fn block(&self, i: usize) -> usize {
        self.blocks[i]
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_stream;

    #[test]
    fn mask_examples() {
        let m = BlockCausalMask::new(&[1, 2]).unwrap();
        assert_eq!(m.as_slice(), &[true, false, false, true, true, true, true, true, true]);
        assert_eq!(BlockCausalMask::new(&[1]).unwrap().as_slice(), &[true]);
        let m = BlockCausalMask::new(&[1, 2, 3]).unwrap();
        let row = |i: usize| (0..6).filter(|&j| m.allowed(i, j)).collect::<Vec<_>>();
        assert_eq!(row(0), vec![0]);
        assert_eq!(row(1), vec![0, 1, 2]);
        assert_eq!(row(2), vec![0, 1, 2]);
        for i in 3..6 {
            assert_eq!(row(i), (0..6).collect::<Vec<_>>());
        }
        assert!(BlockCausalMask::new(&[]).is_err());
    }

    #[test]
    fn sampler_parsing() {
        assert_eq!("argmax".parse::<Sampler>().unwrap(), Sampler::Argmax);
        assert_eq!("topk:3".parse::<Sampler>().unwrap(), Sampler::top_k());
        assert_eq!("topk:5:0.5".parse::<Sampler>().unwrap(), Sampler::TopK { k: 5, temperature: 0.5 });
        for bad in ["topk", "topk:0", "topk:x", "greedy", "topk:2:-1"] {
            assert!(bad.parse::<Sampler>().is_err(), "{bad}");
        }
    }

    #[test]
    fn top_k_larger_than_vocab_is_error() {
        let s = Sampler::TopK { k: 5, temperature: 1.0 };
        assert!(s.sample(&[0.0; 4], &mut rng_stream(0, 0)).is_err());
    }

    #[test]
    fn top_one_equals_argmax() {
        let mut rng = rng_stream(3, 0);
        let s = Sampler::TopK { k: 1, temperature: 1.0 };
        for _ in 0..100 {
            let logits = crate::tensor::Tensor::randn(vec![16], 2.0, &mut rng);
            assert_eq!(s.sample(logits.data(), &mut rng).unwrap(), argmax(logits.data()));
        }
    }

    #[test]
    fn top_k_frequencies_match_renormalized_softmax() {
        let logits = [0.3f32, 1.5, -0.2, 1.1, 0.9, -2.0];
        let s = Sampler::top_k();
        let mut rng = rng_stream(11, 0);
        let n = 10_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[s.sample(&logits, &mut rng).unwrap()] += 1;
        }
        let top = [1usize, 3, 4];
        let z: f64 = top.iter().map(|&i| (logits[i] as f64).exp()).sum();
        for (i, &c) in counts.iter().enumerate() {
            if !top.contains(&i) {
                assert_eq!(c, 0);
                continue;
            }
            let p = (logits[i] as f64).exp() / z;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "token {i}: {c} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn config_validation() {
        let c = PolicyConfig::for_tokenizer(&crate::tokenizer::TokenizerConfig::default(), 2, 4);
        c.validate().unwrap();
        assert_eq!(c.cond_input_dim(), 8);
        let mut bad = c.clone();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.sampler = Sampler::TopK { k: 600, temperature: 1.0 };
        assert!(bad.validate().is_err());
    }
}
