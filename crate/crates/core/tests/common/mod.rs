#![allow(dead_code)]

pub mod ops;
pub mod oracle;

use carp::tensor::{Graph, Tensor, Var};
use carp::Result;
use rand::Rng;

/// Absolute floor on the relative-error denominator.
pub const REL_FLOOR: f32 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f32,
    pub checked: usize,
}

/// Relative error of one entry. The denominator is floored at `scale`, the
/// largest analytic gradient magnitude of the same tensor: float32 central
/// differences carry ~1e-4 absolute noise, so entries far below the tensor's
/// own gradient scale are compared at that scale.
pub fn rel_err(a: f32, n: f64, scale: f32) -> f32 {
    let n = n as f32;
    (a - n).abs() / a.abs().max(n.abs()).max(scale).max(REL_FLOOR)
}

/// Central differences over every entry of every tensor in `inputs`.
///
/// `eval` maps perturbed inputs to the loss in float64; the step actually
/// applied (`x+h` minus `x-h` after float32 rounding) is the denominator.
pub fn finite_difference<E>(inputs: &[Tensor], analytic: &[Tensor], h: f32, mut eval: E) -> Result<GradReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut max_rel = 0.0f32;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        let scale = analytic[ti].data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for j in 0..inputs[ti].numel() {
            let x = inputs[ti].data()[j];
            let (xp, xm) = (x + h, x - h);
            work[ti].data_mut()[j] = xp;
            let lp = eval(&work)?;
            work[ti].data_mut()[j] = xm;
            let lm = eval(&work)?;
            work[ti].data_mut()[j] = x;
            let numeric = (lp - lm) / f64::from(xp - xm);
            max_rel = max_rel.max(rel_err(analytic[ti].data()[j], numeric, scale));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel, checked })
}

/// Five-point central differences, fourth order in `h`. Used where float32
/// noise forces a step large enough for the second-order stencil's truncation
/// error to show.
pub fn finite_difference_5pt<E>(inputs: &[Tensor], analytic: &[Tensor], h: f32, mut eval: E) -> Result<GradReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut max_rel = 0.0f32;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        let scale = analytic[ti].data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for j in 0..inputs[ti].numel() {
            let x = inputs[ti].data()[j];
            let mut at = |d: f32| -> Result<f64> {
                work[ti].data_mut()[j] = x + d;
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[ti].data_mut()[j] = x;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * f64::from(h));
            max_rel = max_rel.max(rel_err(analytic[ti].data()[j], numeric, scale));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel, checked })
}

/// Checks one op: the probed scalar is `sum(w * f(inputs))` for a fixed random
/// projection `w`, reduced in float64 on the oracle side.
pub fn check_op<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = carp::tensor::rng_stream(seed, 9001);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).numel();
    let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor::new(g.shape(out).to_vec(), w.clone())?);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    finite_difference(inputs, &analytic, h, |ins| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(&w).map(|(&y, &wi)| f64::from(y) * f64::from(wi)).sum())
    })
}

pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}
