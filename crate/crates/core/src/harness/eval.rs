use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::baseline::BaselineChunkRegressor;
use super::train::TokenizerSet;
use crate::envs::{episode_seed, fork_mode, staged_success, EnvState, Expert, ForkMode, Point, Task, TaskConfig};
use crate::error::{Error, Result};
use crate::policy::{ActionSequence, Policy, Sampler};
use crate::tensor::rng_stream;

/// Actions executed from each predicted chunk.
pub const EXECUTE: usize = 8;

const EVAL_SALT: u64 = 0x0E7A_1000;

/// One predicted chunk and, when traced, its per-scale partial decodes.
#[derive(Clone, Debug)]
pub struct Plan {
    pub actions: ActionSequence,
    pub partial: Vec<ActionSequence>,
}

/// Anything that maps an observation window to an action chunk.
pub trait Agent {
    /// Observation steps per window.
    fn obs_steps(&self) -> usize;

    fn begin_episode(&mut self, _cfg: &TaskConfig, _state: &EnvState, _rng: &mut dyn RngCore) {}

    fn plan(&mut self, obs: &[f32], state: &EnvState, cfg: &TaskConfig, trace: bool, rng: &mut dyn RngCore) -> Result<Plan>;

    /// Transformer passes so far, for agents that count them.
    fn forward_passes(&self) -> Option<usize> {
        None
    }
}

pub struct CarpAgent<'a> {
    pub policy: &'a Policy,
    pub tokenizers: &'a TokenizerSet,
    pub sampler: Sampler,
    pub task_id: Option<usize>,
}

impl<'a> CarpAgent<'a> {
    pub fn new(policy: &'a Policy, tokenizers: &'a TokenizerSet, sampler: Sampler) -> Self {
        CarpAgent { policy, tokenizers, sampler, task_id: None }
    }
}

impl Agent for CarpAgent<'_> {
    fn obs_steps(&self) -> usize {
        self.policy.config().obs_steps
    }

    fn plan(&mut self, obs: &[f32], _: &EnvState, _: &TaskConfig, trace: bool, rng: &mut dyn RngCore) -> Result<Plan> {
        let out = self.policy.predict_actions(&self.tokenizers.dims, &self.tokenizers.norm, obs, self.task_id, &self.sampler, rng, trace)?;
        Ok(Plan { actions: out.actions, partial: out.partial })
    }

    fn forward_passes(&self) -> Option<usize> {
        Some(self.policy.forward_passes())
    }
}

pub struct BaselineAgent<'a>(pub &'a BaselineChunkRegressor);

impl Agent for BaselineAgent<'_> {
    fn obs_steps(&self) -> usize {
        self.0.config.obs_steps
    }

    fn plan(&mut self, obs: &[f32], _: &EnvState, _: &TaskConfig, _: bool, _: &mut dyn RngCore) -> Result<Plan> {
        Ok(Plan { actions: self.0.predict(obs)?, partial: Vec::new() })
    }
}

/// The scripted expert behind the agent interface; it reads the true state.
pub struct ExpertAgent {
    horizon: usize,
    expert: Option<Expert>,
    rng: rand_chacha::ChaCha8Rng,
    snapshots: Vec<(Expert, rand_chacha::ChaCha8Rng)>,
    plan_start: usize,
}

impl ExpertAgent {
    pub fn new(horizon: usize) -> Self {
        ExpertAgent { horizon, expert: None, rng: rng_stream(0, 0), snapshots: Vec::new(), plan_start: 0 }
    }
}

impl Agent for ExpertAgent {
    fn obs_steps(&self) -> usize {
        1
    }

    fn begin_episode(&mut self, cfg: &TaskConfig, state: &EnvState, rng: &mut dyn RngCore) {
        self.rng = rng_stream(rng.next_u64(), 1);
        self.expert = Some(Expert::new(cfg, state, &mut self.rng));
        self.snapshots.clear();
        self.plan_start = state.steps;
    }

    fn plan(&mut self, _: &[f32], state: &EnvState, cfg: &TaskConfig, _: bool, _: &mut dyn RngCore) -> Result<Plan> {
        // resume from the snapshot matching the number of executed steps
        if let Some(snap) = self.snapshots.get(state.steps - self.plan_start) {
            self.expert = Some(snap.0.clone());
            self.rng = snap.1.clone();
        }
        let mut expert = self.expert.clone().ok_or_else(|| Error::InvalidArgument("begin_episode not called".into()))?;
        self.snapshots.clear();
        self.plan_start = state.steps;
        let mut sim = state.clone();
        let mut values = Vec::with_capacity(self.horizon * 2);
        for _ in 0..self.horizon {
            self.snapshots.push((expert.clone(), self.rng.clone()));
            let a = expert.act(cfg, &sim, &mut self.rng);
            sim = sim.step(cfg, &a);
            values.extend(a);
        }
        self.snapshots.push((expert, self.rng.clone()));
        Ok(Plan { actions: ActionSequence { horizon: self.horizon, dims: 2, values }, partial: Vec::new() })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub execute: usize,
    /// Record every predicted chunk and its partial decodes.
    pub trace: bool,
    /// Start every episode from the state drawn from this seed.
    pub shared_start: Option<u64>,
}

impl EvalOptions {
    pub fn new(episodes: usize, seed: u64) -> Self {
        EvalOptions { episodes, seed, execute: EXECUTE, trace: false, shared_start: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub left: usize,
    pub right: usize,
    pub undecided: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub reset_seed: u64,
    pub success: bool,
    pub staged: Vec<bool>,
    pub length: usize,
    pub predicts: usize,
    pub mode: Option<ForkMode>,
    /// Mean distance of each scale prefix's decode to the final chunk,
    /// averaged over control steps (traced runs only).
    pub refinement: Vec<f64>,
}

impl EpisodeRecord {
    /// True when partial decodes approach the final chunk monotonically.
    pub fn refinement_monotone(&self) -> Option<bool> {
        (!self.refinement.is_empty()).then(|| self.refinement.windows(2).all(|w| w[1] <= w[0]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    /// Fraction of episodes completing the first `i` subgoals.
    pub staged: Vec<f64>,
    pub mean_length: f64,
    pub mode_counts: Option<ModeCounts>,
    pub predicts: usize,
    pub executed_actions: usize,
    pub refinement_monotone_rate: Option<f64>,
}

/// One row of a trajectory export.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub control_step: usize,
    /// 0 for the final chunk, `k` for the decode of the first `k` scales.
    pub scale: usize,
    pub t: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub episodes: Vec<EpisodeRecord>,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Reset seed of evaluation episode `j`; disjoint from demo seeds of the same
/// master seed.
pub fn eval_reset_seed(seed: u64, j: usize) -> u64 {
    episode_seed(seed ^ EVAL_SALT, j as u64)
}

fn obs_window(history: &[Vec<f32>], steps: usize) -> Vec<f32> {
    let n = history.len();
    (0..steps).flat_map(|j| history[(n + j).saturating_sub(steps)].iter().copied()).collect()
}

/// Receding-horizon rollouts: predict a chunk from the current window,
/// execute its first `execute` actions, repeat until success or the cap.
pub fn evaluate(agent: &mut dyn Agent, cfg: &TaskConfig, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.episodes == 0 || opts.execute == 0 {
        return Err(Error::InvalidArgument("need at least one episode and one executed action".into()));
    }
    let mut records = Vec::with_capacity(opts.episodes);
    let mut rows = Vec::new();
    for ep in 0..opts.episodes {
        let reset_seed = opts.shared_start.unwrap_or_else(|| eval_reset_seed(opts.seed, ep));
        let mut rng = rng_stream(eval_reset_seed(opts.seed, ep), 2);
        let mut state = EnvState::reset(cfg, reset_seed);
        agent.begin_episode(cfg, &state, &mut rng);
        let mut history = vec![state.observe(cfg)];
        let mut states = vec![state.clone()];
        let mut path: Vec<Point> = vec![state.pos];
        let mut predicts = 0;
        let mut dist_sums: Vec<f64> = Vec::new();
        while !state.is_done(cfg) {
            let obs = obs_window(&history, agent.obs_steps());
            let plan = agent.plan(&obs, &state, cfg, opts.trace, &mut rng)?;
            if plan.actions.horizon == 0 {
                return Err(Error::InvalidArgument("agent produced an empty chunk".into()));
            }
            if opts.trace {
                push_rows(&mut rows, ep, predicts, &plan);
                if dist_sums.is_empty() {
                    dist_sums = vec![0.0; plan.partial.len()];
                }
                for (s, p) in dist_sums.iter_mut().zip(&plan.partial) {
                    *s += p.mean_distance(&plan.actions) as f64;
                }
            }
            predicts += 1;
            for t in 0..opts.execute.min(plan.actions.horizon) {
                state = state.step(cfg, plan.actions.row(t));
                history.push(state.observe(cfg));
                path.push(state.pos);
                states.push(state.clone());
                if state.is_done(cfg) {
                    break;
                }
            }
        }
        let refinement = dist_sums.iter().map(|s| s / predicts as f64).collect();
        records.push(EpisodeRecord {
            episode: ep,
            reset_seed,
            success: state.is_success(cfg),
            staged: staged_success(cfg, &states),
            length: state.steps,
            predicts,
            mode: if cfg.task == Task::Fork { fork_mode(&path) } else { None },
            refinement,
        });
    }
    let n = records.len() as f64;
    let stages = cfg.task.stages();
    let staged = (0..stages).map(|i| records.iter().filter(|r| r.staged[i]).count() as f64 / n).collect();
    let mode_counts = (cfg.task == Task::Fork).then(|| {
        let mut m = ModeCounts::default();
        for r in &records {
            match r.mode {
                Some(ForkMode::Left) => m.left += 1,
                Some(ForkMode::Right) => m.right += 1,
                None => m.undecided += 1,
            }
        }
        m
    });
    let mono: Vec<bool> = records.iter().filter_map(EpisodeRecord::refinement_monotone).collect();
    let metrics = EvalMetrics {
        episodes: records.len(),
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        staged,
        mean_length: records.iter().map(|r| r.length as f64).sum::<f64>() / n,
        mode_counts,
        predicts: records.iter().map(|r| r.predicts).sum(),
        executed_actions: records.iter().map(|r| r.length).sum(),
        refinement_monotone_rate: (!mono.is_empty()).then(|| mono.iter().filter(|&&m| m).count() as f64 / mono.len() as f64),
    };
    Ok(EvalReport { metrics, episodes: records, trajectory: rows })
}

fn push_rows(rows: &mut Vec<TrajectoryRow>, episode: usize, control_step: usize, plan: &Plan) {
    for (scale, seq) in std::iter::once(&plan.actions).chain(&plan.partial).enumerate() {
        for t in 0..seq.horizon {
            rows.push(TrajectoryRow { episode, control_step, scale, t, values: seq.row(t).to_vec() });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_actions: usize,
    pub runs_s: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
    pub predicts_per_run: usize,
    pub passes_per_predict: Option<f64>,
}

/// Wall-clock time to execute `n_actions` actions by receding horizon,
/// repeated `runs` times. The episode keeps running past success or the cap
/// so every run makes the same number of predict calls.
pub fn measure_latency(agent: &mut dyn Agent, cfg: &TaskConfig, n_actions: usize, runs: usize, seed: u64) -> Result<LatencyReport> {
    if runs == 0 || n_actions == 0 {
        return Err(Error::InvalidArgument("latency needs at least one run and one action".into()));
    }
    let mut times = Vec::with_capacity(runs);
    let (mut predicts, mut passes) = (0usize, 0usize);
    for run in 0..runs {
        let mut rng = rng_stream(seed, 3 + run as u64);
        let mut state = EnvState::reset(cfg, eval_reset_seed(seed, 0));
        agent.begin_episode(cfg, &state, &mut rng);
        let mut history = vec![state.observe(cfg)];
        let (mut done, mut calls) = (0, 0);
        let before = agent.forward_passes();
        let start = Instant::now();
        while done < n_actions {
            let obs = obs_window(&history, agent.obs_steps());
            let plan = agent.plan(&obs, &state, cfg, false, &mut rng)?;
            calls += 1;
            for t in 0..EXECUTE.min(plan.actions.horizon).min(n_actions - done) {
                state = state.step(cfg, plan.actions.row(t));
                history.push(state.observe(cfg));
                done += 1;
            }
        }
        times.push(start.elapsed().as_secs_f64());
        predicts = calls;
        if let (Some(a), Some(b)) = (before, agent.forward_passes()) {
            passes = b - a;
        }
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok(LatencyReport {
        n_actions,
        runs_s: times,
        mean_s: mean,
        std_s: var.sqrt(),
        predicts_per_run: predicts,
        passes_per_predict: agent.forward_passes().map(|_| passes as f64 / predicts as f64),
    })
}

/// Evaluates the shadow and live weights and records both in `report` as
/// `eval_ema` and `eval_live`; returns the metrics of the weights used for
/// evaluation (shadow when EMA is on).
pub fn record_ema_comparison(
    tp: &super::TrainedPolicy,
    cfg: &TaskConfig,
    opts: &EvalOptions,
    report: &mut super::TrainReport,
) -> Result<EvalMetrics> {
    let sampler = tp.policy.config().sampler;
    let live = tp.eval_policy(false)?;
    let live_m = evaluate(&mut CarpAgent::new(&live, &tp.tokenizers, sampler), cfg, opts)?.metrics;
    report.record("eval_live", &live_m)?;
    if tp.ema.is_none() {
        return Ok(live_m);
    }
    let shadow = tp.eval_policy(true)?;
    let ema_m = evaluate(&mut CarpAgent::new(&shadow, &tp.tokenizers, sampler), cfg, opts)?.metrics;
    report.record("eval_ema", &ema_m)?;
    report.record("ema_success_delta", ema_m.success_rate - live_m.success_rate)?;
    Ok(ema_m)
}
