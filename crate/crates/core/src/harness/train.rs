use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::windows::{column, make_windows, Window};
use super::{EmaShadow, NormStats};
use crate::envs::{Demo, Task};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyConfig, Sampler, TeacherBatch};
use crate::tensor::{rng_stream, Adam, Graph, Tensor};
use crate::tokenizer::{DimTokenizer, MultiScaleTokens, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub tokenizer: TokenizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Fraction of demos held out for the reconstruction metric.
    pub holdout: f32,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig { tokenizer: TokenizerConfig::default(), epochs: 300, batch_size: 256, lr: 1e-3, holdout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub obs_steps: usize,
    pub dropout: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub ema: bool,
    pub ema_decay: f32,
    pub sampler: Sampler,
    /// Expected scale count; must agree with the tokenizers when set.
    pub k_scales: Option<usize>,
    /// Expected vocabulary; must agree with the tokenizers when set.
    pub codebook_size: Option<usize>,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            width: 64,
            layers: 2,
            heads: 4,
            obs_steps: 2,
            dropout: 0.0,
            epochs: 200,
            batch_size: 64,
            lr: 5e-4,
            ema: true,
            ema_decay: 0.999,
            sampler: Sampler::Argmax,
            k_scales: None,
            codebook_size: None,
        }
    }
}

/// Metrics and loss curve of one training stage, written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epoch_losses: Vec<f64>,
    pub wall_clock_s: f64,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl TrainReport {
    pub fn new(stage: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(TrainReport {
            stage: stage.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            epoch_losses: Vec::new(),
            wall_clock_s: 0.0,
            metrics: BTreeMap::new(),
        })
    }

    /// Adds a metric; existing entries are never overwritten.
    pub fn record(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        if self.metrics.contains_key(key) {
            return Err(Error::InvalidArgument(format!("metric '{key}' already recorded")));
        }
        self.metrics.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(serde_json::Value::as_f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// The `D` frozen per-dimension tokenizers with their action normalization.
#[derive(Clone, Debug)]
pub struct TokenizerSet {
    pub config: TokenizerConfig,
    pub norm: NormStats,
    pub dims: Vec<DimTokenizer>,
}

impl TokenizerSet {
    pub fn action_dims(&self) -> usize {
        self.dims.len()
    }

    /// Normalized action columns of every window, one `N x H` buffer per dim.
    pub fn columns(&self, windows: &[Window]) -> Vec<Vec<f32>> {
        normalized_columns(&self.norm, windows)
    }

    pub fn tokenize(&self, windows: &[Window]) -> Result<Vec<MultiScaleTokens>> {
        let h = self.config.horizon;
        let cols = self.columns(windows);
        let mut out: Vec<MultiScaleTokens> = vec![MultiScaleTokens { dims: Vec::new() }; windows.len()];
        for (tok, col) in self.dims.iter().zip(&cols) {
            let mut i = 0;
            for chunk in col.chunks(h * 512) {
                let views: Vec<&[f32]> = chunk.chunks(h).collect();
                for maps in tok.tokenize_batch(&views)? {
                    out[i].dims.push(maps);
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    /// Mean squared reconstruction error in normalized units.
    pub fn reconstruction_mse(&self, windows: &[Window]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::InvalidArgument("no windows to reconstruct".into()));
        }
        let h = self.config.horizon;
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (tok, col) in self.dims.iter().zip(self.columns(windows)) {
            for chunk in col.chunks(h * 512) {
                let views: Vec<&[f32]> = chunk.chunks(h).collect();
                for (r, x) in tok.reconstruct_batch(&views)?.iter().zip(&views) {
                    sum += r.iter().zip(*x).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                    n += h;
                }
            }
        }
        Ok(sum / n as f64)
    }
}

fn normalized_columns(norm: &NormStats, windows: &[Window]) -> Vec<Vec<f32>> {
    let dims = norm.dims();
    (0..dims)
        .map(|d| windows.iter().flat_map(|w| column(&w.actions, dims, d).into_iter().map(|x| norm.normalize(d, x))).collect())
        .collect()
}

/// Normalization fitted on every action of the dataset.
pub fn fit_norm(demos: &[Demo]) -> Result<NormStats> {
    NormStats::fit(demos.iter().flat_map(|d| d.act.iter().map(Vec::as_slice)))
}

fn check_demos(demos: &[Demo]) -> Result<usize> {
    let first = demos
        .iter()
        .find(|d| !d.is_empty())
        .ok_or_else(|| Error::InvalidArgument("need at least one non-empty demo".into()))?;
    Ok(first.act[0].len())
}

/// Indices of the demos held out from tokenizer training.
fn holdout_split(n: usize, frac: f32, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let hold = if n < 2 || frac <= 0.0 { 0 } else { ((n as f32 * frac).round() as usize).clamp(1, n - 1) };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_stream(seed, 10));
    let (held, train) = idx.split_at(hold);
    let (mut held, mut train) = (held.to_vec(), train.to_vec());
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

fn check_loss(stage: &str, epoch: usize, loss: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{stage} loss is {loss} in epoch {}", epoch + 1)))
    }
}

/// Trains one tokenizer per action dimension on normalized action chunks.
pub fn train_tokenizer_stage(demos: &[Demo], cfg: &TokenizerTrainConfig, seed: u64) -> Result<(TokenizerSet, TrainReport)> {
    cfg.tokenizer.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let dims = check_demos(demos)?;
    let start = Instant::now();
    let mut report = TrainReport::new("tokenizer", seed, cfg)?;
    let h = cfg.tokenizer.horizon;
    let norm = fit_norm(demos)?;
    let (train_ids, held_ids) = holdout_split(demos.len(), cfg.holdout, seed);
    let pick = |ids: &[usize]| ids.iter().map(|&i| demos[i].clone()).collect::<Vec<_>>();
    let train = make_windows(&pick(&train_ids), 1, h);
    let held = make_windows(&pick(&held_ids), 1, h);
    let cols = normalized_columns(&norm, &train);

    let mut toks: Vec<DimTokenizer> = (0..dims)
        .map(|d| DimTokenizer::new(cfg.tokenizer.clone(), &mut rng_stream(seed, 100 + d as u64)))
        .collect::<Result<_>>()?;
    let mut opts: Vec<Adam> = (0..dims).map(|_| Adam::new(cfg.lr)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng_stream(seed, 11);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            for d in 0..dims {
                let mut data = Vec::with_capacity(batch.len() * h);
                for &i in batch {
                    data.extend_from_slice(&cols[d][i * h..(i + 1) * h]);
                }
                let tok = &mut toks[d];
                let mut g = Graph::new();
                let p = tok.params().bind(&mut g, true);
                let x = g.constant(Tensor::new(vec![batch.len(), h], data)?);
                let fwd = tok.forward(&mut g, &p, x)?;
                let loss = tok.vqvae_loss(&mut g, x, &fwd)?;
                let lv = g.value(loss).item();
                check_loss("tokenizer", epoch, lv)?;
                g.backward(loss)?;
                tok.params_mut().zero_grad();
                tok.params_mut().accumulate_grads(&g, &p);
                opts[d].step(tok.params_mut())?;
                total += lv as f64;
                count += 1;
            }
        }
        let mean = total / count as f64;
        report.epoch_losses.push(mean);
        if epoch == 0 || (epoch + 1) % 25 == 0 || epoch + 1 == cfg.epochs {
            info!("tokenizer epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        }
    }

    let set = TokenizerSet { config: cfg.tokenizer.clone(), norm, dims: toks };
    let train_mse = set.reconstruction_mse(&train)?;
    let held_mse = if held.is_empty() { train_mse } else { set.reconstruction_mse(&held)? };
    let mut usage = Vec::new();
    for (tok, col) in set.dims.iter().zip(&cols) {
        let mut cb = tok.codebook()?;
        for chunk in col.chunks(h * 512) {
            let views: Vec<&[f32]> = chunk.chunks(h).collect();
            for maps in tok.tokenize_batch(&views)? {
                for m in maps {
                    cb.record_usage(&m.tokens);
                }
            }
        }
        usage.push(cb.utilization());
    }
    report.record("train_windows", train.len())?;
    report.record("heldout_windows", held.len())?;
    report.record("recon_mse_train", train_mse)?;
    report.record("recon_mse_heldout", held_mse)?;
    report.record("codebook_utilization", usage)?;
    report.record("final_loss", report.epoch_losses.last().copied())?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    info!("tokenizer: held-out reconstruction MSE {held_mse:.3e} ({:.1}s)", report.wall_clock_s);
    Ok((set, report))
}

/// A trained policy with its frozen tokenizers and optional EMA shadow.
#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub task: Option<Task>,
    pub tokenizers: TokenizerSet,
    pub policy: Policy,
    pub ema: Option<EmaShadow>,
}

impl TrainedPolicy {
    /// The policy evaluation should run: shadow weights when EMA is on.
    pub fn eval_policy(&self, use_ema: bool) -> Result<Policy> {
        let mut p = self.policy.clone();
        if let (true, Some(ema)) = (use_ema, &self.ema) {
            ema.apply_to(p.params_mut())?;
        }
        Ok(p)
    }
}

/// Policy config derived from a tokenizer and training settings.
pub fn policy_config(tok: &TokenizerConfig, action_dims: usize, obs_dim: usize, cfg: &PolicyTrainConfig) -> PolicyConfig {
    let mut pc = PolicyConfig::for_tokenizer(tok, action_dims, obs_dim);
    pc.width = cfg.width;
    pc.layers = cfg.layers;
    pc.heads = cfg.heads;
    pc.obs_steps = cfg.obs_steps;
    pc.dropout = cfg.dropout;
    pc.sampler = cfg.sampler;
    if let Some(k) = cfg.k_scales {
        pc.scale_lens = (1..=k).collect();
    }
    if let Some(v) = cfg.codebook_size {
        pc.codebook_size = v;
    }
    pc
}

/// Teacher-forced next-scale training on frozen tokenizers.
pub fn train_policy_stage(
    demos: &[Demo],
    tokenizers: &TokenizerSet,
    cfg: &PolicyTrainConfig,
    seed: u64,
) -> Result<(TrainedPolicy, TrainReport)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let dims = check_demos(demos)?;
    if dims != tokenizers.action_dims() {
        return Err(Error::Config(format!("demos have {dims} action dims, tokenizers {}", tokenizers.action_dims())));
    }
    let obs_dim = demos.iter().find(|d| !d.is_empty()).map(|d| d.obs[0].len()).unwrap_or(0);
    let start = Instant::now();
    let mut report = TrainReport::new("policy", seed, cfg)?;
    let pc = policy_config(&tokenizers.config, dims, obs_dim, cfg);
    let mut policy = Policy::new(pc.clone(), &mut rng_stream(seed, 20))?;
    policy.check_tokenizers(&tokenizers.dims)?;

    let windows = make_windows(demos, pc.obs_steps, tokenizers.config.horizon);
    let tokens = tokenizers.tokenize(&windows)?;
    let feats = policy.teacher_features(&tokenizers.dims, &tokens)?;
    let per = pc.seq_len() * dims;
    let mut targets = Vec::with_capacity(windows.len() * per);
    for t in &tokens {
        targets.extend(policy.flat_targets(t)?);
    }
    let cin = pc.obs_steps * obs_dim;
    let feat_row = feats.as_ref().map_or(0, |f| f.numel() / windows.len());

    let mut adam = Adam::new(cfg.lr);
    let mut ema = cfg.ema.then(|| EmaShadow::new(policy.params(), cfg.ema_decay));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut shuffle_rng = rng_stream(seed, 21);
    let mut drop_rng = rng_stream(seed, 22);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut cond = Vec::with_capacity(b * cin);
            let mut tb = Vec::with_capacity(b * per);
            let mut fb = Vec::with_capacity(b * feat_row);
            for &i in batch {
                cond.extend_from_slice(&windows[i].obs);
                tb.extend_from_slice(&targets[i * per..(i + 1) * per]);
                if let Some(f) = &feats {
                    fb.extend_from_slice(&f.data()[i * feat_row..(i + 1) * feat_row]);
                }
            }
            let fshape = feats.as_ref().map(|f| vec![b, f.shape()[1], f.shape()[2]]);
            let tbatch = TeacherBatch {
                cond: Tensor::new(vec![b, cin], cond)?,
                task_ids: None,
                feats: fshape.map(|s| Tensor::new(s, fb)).transpose()?,
                targets: tb,
            };
            let mut g = Graph::new();
            let p = policy.params().bind(&mut g, true);
            let rng: Option<&mut dyn rand::RngCore> = if cfg.dropout > 0.0 { Some(&mut drop_rng) } else { None };
            let logits = policy.forward_train(&mut g, &p, &tbatch, rng)?;
            let loss = policy.next_scale_loss(&mut g, logits, &tbatch.targets)?;
            let lv = g.value(loss).item();
            check_loss("policy", epoch, lv)?;
            g.backward(loss)?;
            policy.params_mut().zero_grad();
            policy.params_mut().accumulate_grads(&g, &p);
            adam.step(policy.params_mut())?;
            if let Some(e) = ema.as_mut() {
                e.update(policy.params())?;
            }
            total += lv as f64 * b as f64;
            count += b;
        }
        let mean = total / count as f64;
        report.epoch_losses.push(mean);
        if epoch == 0 || (epoch + 1) % 25 == 0 || epoch + 1 == cfg.epochs {
            info!("policy epoch {}/{}: cross-entropy {mean:.4}", epoch + 1, cfg.epochs);
        }
    }
    policy.reset_forward_passes();
    report.record("windows", windows.len())?;
    report.record("final_ce", report.epoch_losses.last().copied())?;
    report.record("ln_v", (pc.codebook_size as f64).ln())?;
    report.record("ema", cfg.ema)?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    let task = demos.first().and_then(|d| d.task.parse().ok());
    Ok((TrainedPolicy { task, tokenizers: tokenizers.clone(), policy, ema }, report))
}
