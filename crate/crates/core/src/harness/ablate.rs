use log::info;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, CarpAgent, EvalOptions};
use super::train::{train_policy_stage, train_tokenizer_stage, PolicyTrainConfig, TokenizerTrainConfig};
use crate::envs::{generate_demos, TaskConfig};
use crate::error::{Error, Result};

pub const MAX_SCALES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub demos: usize,
    pub episodes: usize,
    pub tokenizer: TokenizerTrainConfig,
    pub policy: PolicyTrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { demos: 200, episodes: 50, tokenizer: TokenizerTrainConfig::default(), policy: PolicyTrainConfig::default() }
    }
}

impl AblationConfig {
    /// Tokenizer settings for `k` scales of lengths `1..=k` over a feature
    /// map of length `max(k, 4)`.
    pub fn tokenizer_for(&self, k: usize) -> TokenizerTrainConfig {
        let mut t = self.tokenizer.clone();
        t.tokenizer.scale_lens = (1..=k).collect();
        t.tokenizer.feature_len = k.max(4);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub feature_len: usize,
    pub recon_mse: f64,
    pub success_rate: f64,
}

/// Full two-stage training and evaluation for each scale count.
pub fn ablate_scales(task: &TaskConfig, k_list: &[usize], seed: u64, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    if k_list.is_empty() {
        return Err(Error::InvalidArgument("empty scale list".into()));
    }
    if let Some(k) = k_list.iter().find(|&&k| k == 0 || k > MAX_SCALES) {
        return Err(Error::InvalidArgument(format!("scale count {k} outside 1..={MAX_SCALES}")));
    }
    let demos = generate_demos(task, cfg.demos, seed)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let tcfg = cfg.tokenizer_for(k);
        let (set, trep) = train_tokenizer_stage(&demos, &tcfg, seed)?;
        let (tp, _) = train_policy_stage(&demos, &set, &cfg.policy, seed)?;
        let policy = tp.eval_policy(cfg.policy.ema)?;
        let mut agent = CarpAgent::new(&policy, &set, cfg.policy.sampler);
        let eval = evaluate(&mut agent, task, &EvalOptions::new(cfg.episodes, seed))?;
        let row = AblationRow {
            k,
            feature_len: tcfg.tokenizer.feature_len,
            recon_mse: trep.metric("recon_mse_heldout").unwrap_or(f64::NAN),
            success_rate: eval.metrics.success_rate,
        };
        info!("ablation K={k}: reconstruction {:.3e}, success {:.2}", row.recon_mse, row.success_rate);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(crate::io::csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
