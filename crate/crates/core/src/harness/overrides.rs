use std::str::FromStr;

use super::ablate::AblationConfig;
use super::baseline::BaselineConfig;
use super::train::{PolicyTrainConfig, TokenizerTrainConfig};
use crate::error::{Error, Result};

/// Comma-separated `key=value` pairs, e.g. `k_scales=6,epochs=50`.
pub fn parse_overrides(text: &str) -> Result<Vec<(String, String)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn unknown(key: &str, known: &str) -> Error {
    Error::Config(format!("unknown config key '{key}' (known: {known})"))
}

const TOKENIZER_KEYS: &str = "k_scales, feature_len, horizon, code_dim, codebook_size, commit_weight, quant_weight, epochs, batch_size, lr, holdout";
const POLICY_KEYS: &str = "width, layers, heads, obs_steps, dropout, epochs, batch_size, lr, ema_decay, sampler, k_scales, codebook_size";

impl TokenizerTrainConfig {
    /// Applies overrides; `k_scales=K` sets scales `1..=K` and `L = max(K, 4)`.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_overrides(text)? {
            self.set(&k, &v)?;
        }
        self.tokenizer.validate()
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let t = &mut self.tokenizer;
        match k {
            "k_scales" => {
                let n: usize = parse(k, v)?;
                t.scale_lens = (1..=n).collect();
                t.feature_len = n.max(4);
            }
            "feature_len" => t.feature_len = parse(k, v)?,
            "horizon" => t.horizon = parse(k, v)?,
            "code_dim" => t.code_dim = parse(k, v)?,
            "codebook_size" => t.codebook_size = parse(k, v)?,
            "commit_weight" => t.commit_weight = parse(k, v)?,
            "quant_weight" => t.quant_weight = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "holdout" => self.holdout = parse(k, v)?,
            _ => return Err(unknown(k, TOKENIZER_KEYS)),
        }
        Ok(())
    }
}

impl PolicyTrainConfig {
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_overrides(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "width" => self.width = parse(k, v)?,
            "layers" => self.layers = parse(k, v)?,
            "heads" => self.heads = parse(k, v)?,
            "obs_steps" => self.obs_steps = parse(k, v)?,
            "dropout" => self.dropout = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "ema_decay" => self.ema_decay = parse(k, v)?,
            "sampler" => self.sampler = v.parse()?,
            "k_scales" => self.k_scales = Some(parse(k, v)?),
            "codebook_size" => self.codebook_size = Some(parse(k, v)?),
            _ => return Err(unknown(k, POLICY_KEYS)),
        }
        Ok(())
    }
}

impl BaselineConfig {
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_overrides(text)? {
            match k.as_str() {
                "hidden" => self.hidden = parse(&k, &v)?,
                "layers" => self.layers = parse(&k, &v)?,
                "epochs" => self.epochs = parse(&k, &v)?,
                "batch_size" => self.batch_size = parse(&k, &v)?,
                "lr" => self.lr = parse(&k, &v)?,
                _ => return Err(unknown(&k, "hidden, layers, epochs, batch_size, lr")),
            }
        }
        Ok(())
    }
}

impl AblationConfig {
    /// `demos` and `episodes`, plus `tokenizer.*` and `policy.*` keys.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_overrides(text)? {
            if let Some(rest) = k.strip_prefix("tokenizer.") {
                self.tokenizer.set(rest, &v)?;
            } else if let Some(rest) = k.strip_prefix("policy.") {
                self.policy.set(rest, &v)?;
            } else {
                match k.as_str() {
                    "demos" => self.demos = parse(&k, &v)?,
                    "episodes" => self.episodes = parse(&k, &v)?,
                    _ => return Err(unknown(&k, "demos, episodes, tokenizer.<key>, policy.<key>")),
                }
            }
        }
        Ok(())
    }
}
