use carp::policy::{Policy, PolicyConfig, Sampler};
use carp::tensor::{rng_stream, Graph, Tensor};
use carp::tokenizer::{DimTokenizer, MultiScaleTokens, TokenMap, TokenizerConfig};
use rand::Rng;

fn setup(tok_cfg: TokenizerConfig, dims: usize, seed: u64) -> (Vec<DimTokenizer>, Policy) {
    let toks: Vec<DimTokenizer> = (0..dims)
        .map(|d| DimTokenizer::new(tok_cfg.clone(), &mut rng_stream(seed, 10 + d as u64)).unwrap())
        .collect();
    let mut pc = PolicyConfig::for_tokenizer(&tok_cfg, dims, 4);
    pc.width = 32;
    pc.heads = 4;
    let policy = Policy::new(pc, &mut rng_stream(seed, 1)).unwrap();
    (toks, policy)
}

fn small_tok() -> TokenizerConfig {
    let mut c = TokenizerConfig::default();
    c.codebook_size = 32;
    c
}

fn random_tokens<R: Rng>(cfg: &TokenizerConfig, dims: usize, rng: &mut R) -> MultiScaleTokens {
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

fn random_cond<R: Rng>(rng: &mut R) -> Vec<f32> {
    (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    lens.iter().scan(0, |a, &l| { let o = *a; *a += l; Some(o) }).collect()
}

#[test]
fn later_scales_do_not_affect_earlier_logits() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 0);
    let mut rng = rng_stream(0, 99);
    let off = offsets(&cfg.scale_lens);
    for _ in 0..20 {
        let cond = random_cond(&mut rng);
        let r = random_tokens(&cfg, 2, &mut rng);
        let base = policy.score(&toks, &cond, None, &r).unwrap();
        let k = rng.random_range(0..cfg.num_scales() - 1);
        let mut r2 = r.clone();
        for d in 0..2 {
            for j in k + 1..cfg.num_scales() {
                for t in r2.dims[d][j].tokens.iter_mut() {
                    *t = rng.random_range(0..cfg.codebook_size);
                }
            }
        }
        let other = policy.score(&toks, &cond, None, &r2).unwrap();
        let stride = 2 * cfg.codebook_size;
        let upto = off[k] + cfg.scale_lens[k];
        assert_eq!(&base.data()[..upto * stride], &other.data()[..upto * stride]);
    }
}

#[test]
fn start_block_depends_only_on_condition() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 1);
    let mut rng = rng_stream(1, 99);
    let cond = random_cond(&mut rng);
    let a = policy.score(&toks, &cond, None, &random_tokens(&cfg, 2, &mut rng)).unwrap();
    let b = policy.score(&toks, &cond, None, &random_tokens(&cfg, 2, &mut rng)).unwrap();
    let stride = 2 * cfg.codebook_size;
    assert_eq!(&a.data()[..stride], &b.data()[..stride]);
    let cond2 = random_cond(&mut rng);
    let r = random_tokens(&cfg, 2, &mut rng);
    let c = policy.score(&toks, &cond2, None, &r).unwrap();
    assert_ne!(&a.data()[..stride], &c.data()[..stride]);
    let zero = policy.score(&toks, &[0.0; 8], None, &r).unwrap();
    assert_ne!(zero.data(), c.data());
}

#[test]
fn second_scale_input_tracks_first_scale_tokens_only() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 2);
    let mut rng = rng_stream(2, 99);
    let r = random_tokens(&cfg, 2, &mut rng);
    let f = policy.teacher_features(&toks, std::slice::from_ref(&r)).unwrap().unwrap();
    let dc = 2 * cfg.code_dim;
    let mut r_late = r.clone();
    r_late.dims[0][1].tokens[0] = (r.dims[0][1].tokens[0] + 1) % cfg.codebook_size;
    let f_late = policy.teacher_features(&toks, std::slice::from_ref(&r_late)).unwrap().unwrap();
    assert_eq!(&f.data()[..2 * dc], &f_late.data()[..2 * dc]);
    let mut r_early = r.clone();
    r_early.dims[0][0].tokens[0] = (r.dims[0][0].tokens[0] + 1) % cfg.codebook_size;
    let f_early = policy.teacher_features(&toks, std::slice::from_ref(&r_early)).unwrap().unwrap();
    assert_ne!(&f.data()[..2 * dc], &f_early.data()[..2 * dc]);
    assert_eq!(f.shape(), &[1, 9, dc]);
}

#[test]
fn cached_decode_matches_full_forward() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 3);
    let mut rng = rng_stream(3, 99);
    let off = offsets(&cfg.scale_lens);
    for _ in 0..10 {
        let cond = random_cond(&mut rng);
        let r = random_tokens(&cfg, 2, &mut rng);
        let full = policy.score(&toks, &cond, None, &r).unwrap();
        let inc = policy.incremental_logits(&toks, &cond, None, &r).unwrap();
        let stride = 2 * cfg.codebook_size;
        for (k, step) in inc.iter().enumerate() {
            let slice = &full.data()[off[k] * stride..(off[k] + cfg.scale_lens[k]) * stride];
            for (a, b) in step.data().iter().zip(slice) {
                assert!((a - b).abs() <= 1e-5, "scale {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn argmax_predict_agrees_with_rescoring() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 4);
    let mut rng = rng_stream(4, 99);
    for _ in 0..5 {
        let cond = random_cond(&mut rng);
        policy.reset_forward_passes();
        let r = policy.predict(&toks, &cond, None, &Sampler::Argmax, &mut rng).unwrap();
        assert_eq!(policy.forward_passes(), cfg.num_scales());
        let full = policy.score(&toks, &cond, None, &r).unwrap();
        let v = cfg.codebook_size;
        let mut pos = 0;
        for (k, &l) in cfg.scale_lens.iter().enumerate() {
            for i in 0..l {
                for d in 0..2 {
                    let row = &full.data()[((pos + i) * 2 + d) * v..((pos + i) * 2 + d + 1) * v];
                    assert_eq!(carp::policy::argmax(row), r.dims[d][k].tokens[i]);
                }
            }
            pos += l;
        }
    }
}

#[test]
fn top_one_sampler_matches_argmax_predict() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 5);
    let cond = random_cond(&mut rng_stream(5, 0));
    let a = policy.predict(&toks, &cond, None, &Sampler::Argmax, &mut rng_stream(1, 0)).unwrap();
    let b = policy.predict(&toks, &cond, None, &Sampler::TopK { k: 1, temperature: 1.0 }, &mut rng_stream(2, 0)).unwrap();
    assert_eq!(a, b);
    let too_big = Sampler::TopK { k: cfg.codebook_size + 1, temperature: 1.0 };
    assert!(policy.predict(&toks, &cond, None, &too_big, &mut rng_stream(2, 0)).is_err());
}

#[test]
fn untrained_loss_is_near_uniform() {
    let cfg = TokenizerConfig::default();
    let (toks, policy) = setup(cfg.clone(), 2, 6);
    let mut rng = rng_stream(6, 99);
    let tokens: Vec<MultiScaleTokens> = (0..4).map(|_| random_tokens(&cfg, 2, &mut rng)).collect();
    let cond = Tensor::randn(vec![4, 8], 0.5, &mut rng);
    let batch = policy.teacher_batch(&toks, cond, None, &tokens).unwrap();
    let mut g = Graph::new();
    let p = policy.params().bind(&mut g, false);
    let logits = policy.forward_train(&mut g, &p, &batch, None).unwrap();
    assert_eq!(g.shape(logits), &[4, 10, 2 * 512]);
    let loss = policy.next_scale_loss(&mut g, logits, &batch.targets).unwrap();
    let l = g.value(loss).item();
    assert!((l - (512f32).ln()).abs() < 0.05, "{l}");
}

#[test]
fn loss_matches_scalar_loop() {
    let cfg = small_tok();
    let (_, policy) = setup(cfg.clone(), 2, 7);
    let mut rng = rng_stream(7, 0);
    let n = 3 * 10 * 2;
    let v = cfg.codebook_size;
    let logits = Tensor::randn(vec![3, 10, 2 * v], 3.0, &mut rng);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let mut expected = 0.0f64;
    for (row, &t) in logits.data().chunks(v).zip(&targets) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
        expected += m + z.ln() - row[t] as f64;
    }
    expected /= n as f64;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = policy.next_scale_loss(&mut g, l, &targets).unwrap();
    assert!((g.value(loss).item() as f64 - expected).abs() < 1e-5);
    let mut bad = targets.clone();
    bad[0] = v;
    assert!(policy.next_scale_loss(&mut g, l, &bad).is_err());
}

#[test]
fn identical_samples_give_identical_rows() {
    let cfg = small_tok();
    let (toks, policy) = setup(cfg.clone(), 2, 8);
    let mut rng = rng_stream(8, 0);
    let r = random_tokens(&cfg, 2, &mut rng);
    let cond = random_cond(&mut rng);
    let mut c2 = cond.clone();
    c2.extend(&cond);
    let batch = policy.teacher_batch(&toks, Tensor::new(vec![2, 8], c2).unwrap(), None, &[r.clone(), r]).unwrap();
    let mut g = Graph::new();
    let p = policy.params().bind(&mut g, false);
    let logits = policy.forward_train(&mut g, &p, &batch, None).unwrap();
    let d = g.value(logits).data();
    let half = d.len() / 2;
    assert_eq!(&d[..half], &d[half..]);
}

#[test]
fn mismatched_tokenizer_is_rejected() {
    let cfg = small_tok();
    let (_, policy) = setup(cfg.clone(), 2, 9);
    let other = TokenizerConfig::with_scales(3);
    let toks: Vec<DimTokenizer> = (0..2).map(|d| DimTokenizer::new(other.clone(), &mut rng_stream(0, d)).unwrap()).collect();
    let err = policy.check_tokenizers(&toks).unwrap_err().to_string();
    assert!(err.contains("K=4") && err.contains("K=3"), "{err}");
}

#[test]
fn task_embedding_conditions_output() {
    let cfg = small_tok();
    let toks: Vec<DimTokenizer> = (0..2).map(|d| DimTokenizer::new(cfg.clone(), &mut rng_stream(0, d)).unwrap()).collect();
    let mut pc = PolicyConfig::for_tokenizer(&cfg, 2, 4);
    pc.width = 32;
    pc.num_tasks = Some(3);
    let policy = Policy::new(pc, &mut rng_stream(0, 5)).unwrap();
    let r = random_tokens(&cfg, 2, &mut rng_stream(0, 6));
    let cond = [0.1; 8];
    let a = policy.score(&toks, &cond, Some(0), &r).unwrap();
    let b = policy.score(&toks, &cond, Some(2), &r).unwrap();
    assert_ne!(a.data(), b.data());
    assert!(policy.score(&toks, &cond, None, &r).is_err());
}
