use log::warn;

use crate::envs::Demo;

/// One training pair: an observation window and the action chunk that follows.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Index of the source demo.
    pub demo: usize,
    /// `O` observations, oldest first, flattened.
    pub obs: Vec<f32>,
    /// `H x D` actions, row-major by step.
    pub actions: Vec<f32>,
}

/// One window per timestep. Observations before the start repeat the first
/// one; actions past the end are zero.
pub fn make_windows(demos: &[Demo], obs_steps: usize, horizon: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, demo) in demos.iter().enumerate() {
        if demo.is_empty() {
            warn!("skipping empty demo {i} (seed {})", demo.seed);
            continue;
        }
        let dims = demo.act[0].len();
        for t in 0..demo.len() {
            let mut obs = Vec::with_capacity(obs_steps * demo.obs[0].len());
            for j in 0..obs_steps {
                let src = (t + j + 1).saturating_sub(obs_steps);
                obs.extend_from_slice(&demo.obs[src]);
            }
            let mut actions = vec![0.0; horizon * dims];
            for (h, row) in demo.act[t..].iter().take(horizon).enumerate() {
                actions[h * dims..(h + 1) * dims].copy_from_slice(row);
            }
            out.push(Window { demo: i, obs, actions });
        }
    }
    out
}

/// Column `d` of a window's `H x D` action chunk.
pub(crate) fn column(actions: &[f32], dims: usize, d: usize) -> Vec<f32> {
    actions.iter().skip(d).step_by(dims).copied().collect()
}
