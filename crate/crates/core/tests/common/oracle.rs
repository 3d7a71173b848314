//! Float64 reference implementations used by the gradient, quantizer and
//! acceptance tests.

use std::collections::HashMap;

use carp::policy::{Policy, PolicyConfig};
use carp::tensor::{rng_stream, Graph, Tensor};
use carp::tokenizer::{DimTokenizer, MultiScaleTokens, TokenMap, TokenizerConfig};
use rand::Rng;

use super::{finite_difference, finite_difference_5pt};

pub fn tiny_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        horizon: 8,
        scale_lens: vec![1, 2],
        feature_len: 4,
        code_dim: 4,
        codebook_size: 16,
        channels: vec![4, 4],
        commit_weight: 0.25,
        quant_weight: 1.0,
    }
}

pub type Params = HashMap<String, (Vec<usize>, Vec<f64>)>;

pub fn to_map(names: &[String], ts: &[Tensor]) -> Params {
    names
        .iter()
        .zip(ts)
        .map(|(n, t)| (n.clone(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Cross-correlation of a `cin x len` signal with zero padding.
pub fn conv(p: &Params, name: &str, x: &[Vec<f64>], pad: usize) -> Vec<Vec<f64>> {
    let (shape, w) = &p[&format!("{name}.weight")];
    let b = &p[&format!("{name}.bias")].1;
    let (cout, cin, k) = (shape[0], shape[1], shape[2]);
    let len = x[0].len();
    let lout = len + 2 * pad - k + 1;
    (0..cout)
        .map(|o| {
            (0..lout)
                .map(|t| {
                    let mut s = b[o];
                    for i in 0..cin {
                        for j in 0..k {
                            let pos = t + j;
                            if pos >= pad && pos - pad < len {
                                s += w[(o * cin + i) * k + j] * x[i][pos - pad];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn interp(x: &[f64], lout: usize) -> Vec<f64> {
    let lin = x.len();
    if lout == 1 {
        return vec![x.iter().sum::<f64>() / lin as f64];
    }
    (0..lout)
        .map(|i| {
            if lin == 1 {
                return x[0];
            }
            let pos = (i * (lin - 1)) as f64 / (lout - 1) as f64;
            let i0 = (pos.floor() as usize).min(lin - 1);
            let f = pos - i0 as f64;
            if i0 == lin - 1 { x[i0] } else { (1.0 - f) * x[i0] + f * x[i0 + 1] }
        })
        .collect()
}

pub fn interp_all(x: &[Vec<f64>], lout: usize) -> Vec<Vec<f64>> {
    x.iter().map(|c| interp(c, lout)).collect()
}

pub fn encode(p: &Params, cfg: &TokenizerConfig, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = vec![x.to_vec()];
    let n = cfg.channels.len();
    for i in 0..n {
        h = conv(p, &format!("enc.{i}"), &h, 1).into_iter().map(|c| c.into_iter().map(gelu).collect()).collect();
    }
    conv(p, &format!("enc.{n}"), &h, 0)
}

pub fn decode(p: &Params, cfg: &TokenizerConfig, f: &[Vec<f64>]) -> Vec<f64> {
    let mut h = interp_all(f, cfg.horizon);
    let n = cfg.channels.len() + 1;
    for i in 0..n {
        h = conv(p, &format!("dec.{i}"), &h, 1);
        if i + 1 < n {
            h = h.into_iter().map(|c| c.into_iter().map(gelu).collect()).collect();
        }
    }
    h.remove(0)
}

pub fn lookup(p: &Params, c: usize, tokens: &[usize]) -> Vec<Vec<f64>> {
    let cb = &p["codebook"].1;
    (0..c).map(|ci| tokens.iter().map(|&t| cb[t * c + ci]).collect()).collect()
}

pub fn sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Straight-through VQ-VAE loss with stopped branches taken at `frozen`.
pub fn oracle_loss(p: &Params, frozen: &Params, cfg: &TokenizerConfig, x: &[Vec<f64>], tokens: &[Vec<usize>]) -> f64 {
    let (c, l) = (cfg.code_dim, cfg.feature_len);
    let b = x.len();
    let mut recon = 0.0;
    let mut vq = vec![(0.0, 0.0); cfg.num_scales()];
    for (bi, xb) in x.iter().enumerate() {
        let f = encode(p, cfg, xb);
        let f0 = encode(frozen, cfg, xb);
        let (mut resid, mut resid0) = (f.clone(), f0.clone());
        let mut fhat = vec![vec![0.0; l]; c];
        for (k, &lk) in cfg.scale_lens.iter().enumerate() {
            let toks = &tokens[k][bi * lk..(bi + 1) * lk];
            let pre = interp_all(&resid, lk);
            let pre0 = interp_all(&resid0, lk);
            let quant = lookup(p, c, toks);
            let quant0 = lookup(frozen, c, toks);
            let z: Vec<Vec<f64>> = (0..c).map(|ci| (0..lk).map(|i| pre[ci][i] + quant0[ci][i] - pre0[ci][i]).collect()).collect();
            let h = conv(p, &format!("phi.{k}"), &interp_all(&z, l), 1);
            let h0 = conv(frozen, &format!("phi.{k}"), &interp_all(&quant0, l), 1);
            for ci in 0..c {
                for t in 0..l {
                    fhat[ci][t] += h[ci][t];
                    resid[ci][t] -= h0[ci][t];
                    resid0[ci][t] -= h0[ci][t];
                }
            }
            vq[k].0 += sq(&pre0, &quant);
            vq[k].1 += sq(&pre, &quant0);
        }
        let r = decode(p, cfg, &fhat);
        recon += r.iter().zip(xb).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let mut loss = recon / (b * cfg.horizon) as f64;
    for (k, (q, cm)) in vq.iter().enumerate() {
        let n = (b * c * cfg.scale_lens[k]) as f64;
        loss += cfg.quant_weight as f64 * q / n + cfg.commit_weight as f64 * cm / n;
    }
    loss
}

/// Worst relative error of the tokenizer loss gradient over `seeds` seeds.
pub fn tokenizer_loss_worst(seeds: u64) -> f32 {
    let cfg = tiny_tokenizer();
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let mut rng = rng_stream(seed, 40);
        let tok = DimTokenizer::new(cfg.clone(), &mut rng).unwrap();
        let batch = 3;
        let x = Tensor::randn(vec![batch, cfg.horizon], 0.5, &mut rng);
        let mut g = Graph::new();
        let p = tok.params().bind(&mut g, true);
        let xv = g.constant(x.clone());
        let fwd = tok.forward(&mut g, &p, xv).unwrap();
        let loss = tok.vqvae_loss(&mut g, xv, &fwd).unwrap();
        let value = g.value(loss).item() as f64;
        g.backward(loss).unwrap();

        let names: Vec<String> = tok.params().named().map(|(n, _)| n.to_string()).collect();
        let values: Vec<Tensor> = tok.params().values().cloned().collect();
        let analytic: Vec<Tensor> = tok
            .params()
            .ids()
            .zip(&values)
            .map(|(id, v)| g.grad(p[id]).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
            .collect();
        let frozen = to_map(&names, &values);
        let xs: Vec<Vec<f64>> = x.data().chunks(cfg.horizon).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let reference = oracle_loss(&frozen, &frozen, &cfg, &xs, &fwd.tokens);
        assert!((reference - value).abs() < 1e-5 * reference.max(1.0), "oracle {reference} vs {value}");

        let rep = finite_difference(&values, &analytic, 1e-3, |ts| Ok(oracle_loss(&to_map(&names, ts), &frozen, &cfg, &xs, &fwd.tokens))).unwrap();
        worst = worst.max(rep.max_rel);
    }
    worst
}

pub fn random_tokens(cfg: &TokenizerConfig, dims: usize, rng: &mut impl Rng) -> MultiScaleTokens {
    MultiScaleTokens {
        dims: (0..dims)
            .map(|_| {
                cfg.scale_lens
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| TokenMap { scale: k + 1, tokens: (0..l).map(|_| rng.random_range(0..cfg.codebook_size)).collect() })
                    .collect()
            })
            .collect(),
    }
}

/// Worst relative error of the next-scale CE gradient over `seeds` seeds.
pub fn policy_loss_worst(seeds: u64) -> f32 {
    let tc = tiny_tokenizer();
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let mut rng = rng_stream(seed, 41);
        let toks: Vec<DimTokenizer> = (0..2).map(|_| DimTokenizer::new(tc.clone(), &mut rng).unwrap()).collect();
        let mut pc = PolicyConfig::for_tokenizer(&tc, 2, 4);
        pc.width = 16;
        pc.layers = 1;
        pc.heads = 2;
        let mut policy = Policy::new(pc, &mut rng).unwrap();
        // move off the zero-initialised biases so every path carries gradient
        for id in policy.params().ids().collect::<Vec<_>>() {
            for v in policy.params_mut().value_mut(id).data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let samples: Vec<MultiScaleTokens> = (0..2).map(|_| random_tokens(&tc, 2, &mut rng)).collect();
        let cond = Tensor::randn(vec![2, 8], 0.5, &mut rng);
        let batch = policy.teacher_batch(&toks, cond, None, &samples).unwrap();

        let mut g = Graph::new();
        let p = policy.params().bind(&mut g, true);
        let logits = policy.forward_train(&mut g, &p, &batch, None).unwrap();
        let loss = policy.next_scale_loss(&mut g, logits, &batch.targets).unwrap();
        g.backward(loss).unwrap();
        let ids: Vec<_> = policy.params().ids().collect();
        let values: Vec<Tensor> = policy.params().values().cloned().collect();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(p[id]).cloned().unwrap()).collect();

        let v = tc.codebook_size;
        let mut probe = policy.clone();
        let rep = finite_difference_5pt(&values, &analytic, 1e-2, |ts| {
            for (&id, t) in ids.iter().zip(ts) {
                probe.params_mut().value_mut(id).data_mut().copy_from_slice(t.data());
            }
            let mut g = Graph::new();
            let p = probe.params().bind(&mut g, false);
            let l = probe.forward_train(&mut g, &p, &batch, None)?;
            let rows = g.value(l).data();
            let n = batch.targets.len();
            let mut ce = 0.0f64;
            for (row, &t) in rows.chunks(v).zip(&batch.targets) {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
                ce += lse - row[t] as f64;
            }
            Ok(ce / n as f64)
        })
        .unwrap();
        worst = worst.max(rep.max_rel);
    }
    worst
}

/// Exhaustive cosine scan in float64. Returns the best code (lowest index on
/// ties, 0 for a zero query) and its margin over the runner-up.
pub fn nearest_scan(codebook: &[f64], c: usize, q: &[f64]) -> (usize, f64) {
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 {
        return (0, f64::INFINITY);
    }
    let (mut best, mut top, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, row) in codebook.chunks(c).enumerate() {
        let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if rn == 0.0 { 0.0 } else { row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (rn * qn) };
        if s > top {
            second = top;
            top = s;
            best = i;
        } else if s > second {
            second = s;
        }
    }
    (best, top - second)
}

/// Residual multi-scale quantization of one `C x L` feature map (channel
/// rows). Returns the per-scale tokens, the accumulated approximation and the
/// smallest nearest-code margin met.
pub fn quantize_multiscale_f64(p: &Params, cfg: &TokenizerConfig, feature: &[Vec<f64>]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>, f64) {
    let (c, l) = (cfg.code_dim, cfg.feature_len);
    let codebook = &p["codebook"].1;
    let mut resid = feature.to_vec();
    let mut fhat = vec![vec![0.0; l]; c];
    let mut tokens = Vec::new();
    let mut margin = f64::INFINITY;
    for (k, &lk) in cfg.scale_lens.iter().enumerate() {
        let pre = interp_all(&resid, lk);
        let toks: Vec<usize> = (0..lk)
            .map(|i| {
                let q: Vec<f64> = (0..c).map(|ci| pre[ci][i]).collect();
                let (t, m) = nearest_scan(codebook, c, &q);
                margin = margin.min(m);
                t
            })
            .collect();
        let h = conv(p, &format!("phi.{k}"), &interp_all(&lookup(p, c, &toks), l), 1);
        for ci in 0..c {
            for t in 0..l {
                fhat[ci][t] += h[ci][t];
                resid[ci][t] -= h[ci][t];
            }
        }
        tokens.push(toks);
    }
    (tokens, fhat, margin)
}

/// `sum_k phi_k(interp(lookup(r_k), L))` composed directly from graph
/// primitives; returns a (1, C, L) tensor.
pub fn fhat_from_tokens(tok: &DimTokenizer, tokens: &[Vec<usize>]) -> Tensor {
    let cfg = tok.config();
    let store = tok.params();
    let id = |name: &str| store.ids().find(|&i| store.name(i) == name).unwrap_or_else(|| panic!("no parameter {name}"));
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let mut acc = None;
    for (k, toks) in tokens.iter().enumerate() {
        let rows = g.embedding(p[id("codebook")], toks).unwrap();
        let rows = g.reshape(rows, &[1, toks.len(), cfg.code_dim]).unwrap();
        let z = g.transpose(rows, 1, 2).unwrap();
        let up = g.interp1d_linear(z, cfg.feature_len).unwrap();
        let w = p[id(&format!("phi.{k}.weight"))];
        let pad = (g.shape(w)[2] - 1) / 2;
        let h = g.conv1d(up, w, Some(p[id(&format!("phi.{k}.bias"))]), 1, pad).unwrap();
        acc = Some(match acc {
            None => h,
            Some(a) => g.add(a, h).unwrap(),
        });
    }
    g.value(acc.unwrap()).clone()
}
