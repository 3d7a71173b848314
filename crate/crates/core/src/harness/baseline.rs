use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::train::{fit_norm, TrainReport};
use super::windows::make_windows;
use super::NormStats;
use crate::envs::Demo;
use crate::error::{Error, Result};
use crate::policy::ActionSequence;
use crate::tensor::{rng_stream, Adam, Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub layers: usize,
    pub obs_steps: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { hidden: 256, layers: 2, obs_steps: 2, horizon: 16, epochs: 200, batch_size: 64, lr: 1e-3 }
    }
}

/// MLP mapping an observation window to a whole `H x D` chunk in one pass,
/// trained with mean-squared error on normalized actions.
#[derive(Clone, Debug)]
pub struct BaselineChunkRegressor {
    pub config: BaselineConfig,
    pub obs_dim: usize,
    pub action_dims: usize,
    pub norm: NormStats,
    params: ParamStore,
    linears: Vec<(ParamId, ParamId)>,
}

impl BaselineChunkRegressor {
    pub fn new(config: BaselineConfig, obs_dim: usize, norm: NormStats, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.horizon == 0 || config.obs_steps == 0 {
            return Err(Error::Config("baseline needs positive layers, hidden width, horizon and obs steps".into()));
        }
        let action_dims = norm.dims();
        let mut rng = rng_stream(seed, 30);
        let mut params = ParamStore::new();
        let mut widths = vec![config.obs_steps * obs_dim];
        widths.extend(std::iter::repeat_n(config.hidden, config.layers));
        widths.push(config.horizon * action_dims);
        let linears = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (1.0 / w[0] as f32).sqrt();
                let wt = params.add(format!("mlp.{i}.weight"), Tensor::randn(vec![w[0], w[1]], std, &mut rng));
                let b = params.add(format!("mlp.{i}.bias"), Tensor::zeros(vec![w[1]]));
                (wt, b)
            })
            .collect();
        Ok(BaselineChunkRegressor { config, obs_dim, action_dims, norm, params, linears })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Normalized chunk predictions, (B, H * D).
    pub fn forward(&self, g: &mut Graph, p: &Bound, obs: Var) -> Result<Var> {
        let mut x = obs;
        for (i, &(w, b)) in self.linears.iter().enumerate() {
            x = g.matmul(x, p[w])?;
            x = g.add(x, p[b])?;
            if i + 1 < self.linears.len() {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// Denormalized action chunk for one observation window.
    pub fn predict(&self, obs: &[f32]) -> Result<ActionSequence> {
        let cin = self.config.obs_steps * self.obs_dim;
        if obs.len() != cin {
            return Err(Error::shape("baseline_predict", format!("observation window of {}, expected {cin}", obs.len())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, cin], obs.to_vec())?);
        let y = self.forward(&mut g, &p, x)?;
        let d = self.action_dims;
        let values = g.value(y).data().iter().enumerate().map(|(i, &v)| self.norm.denormalize(i % d, v)).collect();
        Ok(ActionSequence { horizon: self.config.horizon, dims: d, values })
    }
}

pub fn train_baseline(demos: &[Demo], cfg: &BaselineConfig, seed: u64) -> Result<(BaselineChunkRegressor, TrainReport)> {
    let obs_dim = demos
        .iter()
        .find(|d| !d.is_empty())
        .map(|d| d.obs[0].len())
        .ok_or_else(|| Error::InvalidArgument("need at least one non-empty demo".into()))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut report = TrainReport::new("baseline", seed, cfg)?;
    let norm = fit_norm(demos)?;
    let mut model = BaselineChunkRegressor::new(cfg.clone(), obs_dim, norm.clone(), seed)?;
    let windows = make_windows(demos, cfg.obs_steps, cfg.horizon);
    let d = norm.dims();
    let (cin, cout) = (cfg.obs_steps * obs_dim, cfg.horizon * d);
    let targets: Vec<Vec<f32>> = windows
        .iter()
        .map(|w| w.actions.iter().enumerate().map(|(i, &a)| norm.normalize(i % d, a)).collect())
        .collect();
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = rng_stream(seed, 31);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let x: Vec<f32> = batch.iter().flat_map(|&i| windows[i].obs.iter().copied()).collect();
            let y: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(Tensor::new(vec![b, cin], x)?);
            let yv = g.constant(Tensor::new(vec![b, cout], y)?);
            let pred = model.forward(&mut g, &p, xv)?;
            let loss = g.mse(pred, yv)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("baseline loss is {lv} in epoch {}", epoch + 1)));
            }
            g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g, &p);
            adam.step(&mut model.params)?;
            total += lv as f64 * b as f64;
            count += b;
        }
        report.epoch_losses.push(total / count as f64);
        if (epoch + 1) % 50 == 0 {
            info!("baseline epoch {}/{}: mse {:.5}", epoch + 1, cfg.epochs, total / count as f64);
        }
    }
    report.record("final_mse", report.epoch_losses.last().copied())?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}
