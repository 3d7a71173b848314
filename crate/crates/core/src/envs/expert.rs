use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{dist, EnvState, ForkMode, Point, Task, TaskConfig};

const GAIN: f64 = 0.6;
const RAMP_STEPS: f64 = 3.0;
const CURVE_SAMPLES: usize = 256;

/// Scripted demonstrator for one episode.
///
/// Moves toward its current target with a short speed ramp at the start and a
/// proportional slow-down near the target. Fork picks a side at random and
/// follows a cubic Bézier around the obstacle. Actions carry AR(1) jitter.
#[derive(Clone, Debug)]
pub struct Expert {
    mode: Option<ForkMode>,
    curve: Vec<Point>,
    cursor: usize,
    noise: [f64; 2],
}

impl Expert {
    pub fn new(cfg: &TaskConfig, state: &EnvState, rng: &mut dyn RngCore) -> Self {
        let mut noise = [0.0; 2];
        for n in &mut noise {
            let z: f64 = StandardNormal.sample(rng);
            *n = cfg.jitter * z;
        }
        let (mode, curve) = match cfg.task {
            Task::Fork => {
                let mode = if rng.random_bool(0.5) { ForkMode::Left } else { ForkMode::Right };
                (Some(mode), fork_curve(state.pos, state.goal, mode))
            }
            _ => (None, Vec::new()),
        };
        Expert { mode, curve, cursor: 0, noise }
    }

    pub fn mode(&self) -> Option<ForkMode> {
        self.mode
    }

    pub fn act(&mut self, cfg: &TaskConfig, state: &EnvState, rng: &mut dyn RngCore) -> [f32; 2] {
        let ramp = ((state.steps as f64 + 1.0) / RAMP_STEPS).min(1.0);
        let reach = cfg.max_step * ramp;
        let target = if self.curve.is_empty() { state.target() } else { self.lookahead(state.pos, reach) };
        let d = dist(state.pos, target);
        let speed = reach.min(GAIN * dist(state.pos, state.target()));
        let mut a = [0.0; 2];
        for i in 0..2 {
            let dir = if d > 0.0 { (target[i] - state.pos[i]) / d } else { 0.0 };
            let z: f64 = StandardNormal.sample(rng);
            let rho = cfg.jitter_corr;
            self.noise[i] = rho * self.noise[i] + (1.0 - rho * rho).sqrt() * cfg.jitter * z;
            a[i] = (dir * speed + self.noise[i]).clamp(-cfg.max_step, cfg.max_step) as f32;
        }
        a
    }

    /// Curve point `reach` ahead of the closest point at or after the cursor.
    fn lookahead(&mut self, pos: Point, reach: f64) -> Point {
        let window = (self.cursor + 24).min(self.curve.len());
        let mut best = self.cursor;
        for i in self.cursor..window {
            if dist(self.curve[i], pos) < dist(self.curve[best], pos) {
                best = i;
            }
        }
        self.cursor = best;
        let mut j = best;
        while j + 1 < self.curve.len() && dist(self.curve[j], pos) < reach {
            j += 1;
        }
        self.curve[j]
    }
}

fn fork_curve(start: Point, goal: Point, mode: ForkMode) -> Vec<Point> {
    let s = match mode {
        ForkMode::Left => -1.0,
        ForkMode::Right => 1.0,
    };
    let p = [start, [s * 0.75, -0.45], [s * 0.75, 0.45], goal];
    (0..=CURVE_SAMPLES)
        .map(|i| {
            let t = i as f64 / CURVE_SAMPLES as f64;
            let u = 1.0 - t;
            let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            let mut q = [0.0; 2];
            for (wk, pk) in w.iter().zip(&p) {
                q[0] += wk * pk[0];
                q[1] += wk * pk[1];
            }
            q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn fork_curve_clears_obstacle() {
        for mode in [ForkMode::Left, ForkMode::Right] {
            let c = fork_curve([0.15, -0.85], [-0.15, 0.85], mode);
            let min = c.iter().map(|p| dist(*p, [0.0, 0.0])).fold(f64::INFINITY, f64::min);
            assert!(min > FORK_RADIUS + 0.1, "{min}");
            assert_eq!(fork_mode(&c), Some(mode));
        }
    }

    #[test]
    fn reach_expert_idles_at_goal() {
        let cfg = TaskConfig::new(Task::Reach);
        let mut state = EnvState::reset(&cfg, 3);
        state.pos = state.goal;
        state.steps = 10;
        let mut rng = crate::tensor::rng_stream(3, 1);
        let mut e = Expert::new(&cfg, &state, &mut rng);
        for _ in 0..20 {
            let a = e.act(&cfg, &state, &mut rng);
            let n = ((a[0] * a[0] + a[1] * a[1]) as f64).sqrt();
            assert!(n <= 5.0 * cfg.jitter, "{n}");
        }
    }
}
