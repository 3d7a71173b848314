use carp::tensor::{rng_stream, Graph, Tensor, Var};
use carp::Result;

use super::{check_op, randn};

pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub group: &'static str,
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub f: OpFn,
}

const MASK: [bool; 9] = [true, false, false, true, true, false, true, true, true];

macro_rules! case {
    ($group:literal, $name:literal, $shapes:expr, $f:expr) => {
        OpCase { group: $group, name: $name, shapes: $shapes, f: $f }
    };
}

/// Every differentiable op, with small input shapes.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul", "matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case!("matmul", "matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        case!("matmul", "matmul_shared_rhs", &[&[2, 3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case!("elementwise", "add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case!("elementwise", "add_bcast", &[&[2, 3, 4], &[4]], |g, v| g.add(v[0], v[1])),
        case!("elementwise", "sub_bcast", &[&[2, 3, 4], &[2, 1, 4]], |g, v| g.sub(v[0], v[1])),
        case!("elementwise", "mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case!("elementwise", "mul_bcast", &[&[2, 3, 4], &[2, 1, 4]], |g, v| g.mul(v[0], v[1])),
        case!("elementwise", "scale", &[&[5]], |g, v| g.scale(v[0], -1.7)),
        case!("elementwise", "gelu", &[&[12]], |g, v| g.gelu(v[0])),
        case!("conv1d", "conv1d", &[&[2, 3, 7], &[4, 3, 3], &[4]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1)),
        case!("conv1d", "conv1d_strided", &[&[2, 2, 8], &[3, 2, 4], &[3]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1)),
        case!("conv1d", "conv1d_valid", &[&[1, 2, 9], &[2, 2, 6]], |g, v| g.conv1d(v[0], v[1], None, 1, 0)),
        case!("layout", "transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0], 1, 2)),
        case!("layout", "reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case!("layout", "narrow", &[&[2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3)),
        case!("layout", "concat", &[&[2, 2, 3], &[2, 1, 3]], |g, v| g.concat(&[v[0], v[1]], 1)),
        case!("layout", "gather", &[&[5, 3]], |g, v| g.gather(v[0], 0, &[4, 0, 4, 2])),
        case!("layout", "embedding", &[&[6, 2]], |g, v| g.embedding(v[0], &[1, 1, 5])),
        case!("normalisation", "softmax", &[&[3, 5]], |g, v| g.softmax(v[0])),
        case!("normalisation", "masked_softmax", &[&[2, 3, 3]], |g, v| g.masked_softmax(v[0], &MASK)),
        case!("normalisation", "layer_norm", &[&[3, 6]], |g, v| g.layer_norm(v[0], 1e-5)),
        case!("normalisation", "interp_up", &[&[2, 3, 4]], |g, v| g.interp1d_linear(v[0], 9)),
        case!("normalisation", "interp_down", &[&[2, 3, 7]], |g, v| g.interp1d_linear(v[0], 3)),
        case!("normalisation", "interp_mean", &[&[2, 5]], |g, v| g.interp1d_linear(v[0], 1)),
        case!("reduction", "sum", &[&[4, 3]], |g, v| g.sum(v[0])),
        case!("reduction", "mean", &[&[4, 3]], |g, v| g.mean(v[0])),
        case!("reduction", "mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1])),
        case!("reduction", "cross_entropy", &[&[4, 6]], |g, v| g.cross_entropy_with_logits(v[0], &[0, 5, 2, 2])),
    ]
}

/// Worst relative error of one op over `seeds` random inputs.
pub fn op_worst(case: &OpCase, seeds: u64, h: f32) -> f32 {
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let mut rng = rng_stream(seed, 17);
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| randn(s, &mut rng)).collect();
        let rep = check_op(&inputs, h, seed, case.f).unwrap();
        worst = worst.max(rep.max_rel);
    }
    worst
}
