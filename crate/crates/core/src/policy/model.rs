use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, RngCore};

use super::{BlockCausalMask, PolicyConfig, Sampler, TASK_EMBED_DIM};
use crate::error::{Error, Result};
use crate::harness::NormStats;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{DimTokenizer, MultiScaleTokens, TokenMap};

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, din: usize, dout: usize, std: f32, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.weight"), Tensor::randn(vec![din, dout], std, rng));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dout]));
        Linear { w, b }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Condition vector and the modulation it induces, computed once per pass.
struct Cond {
    c: Var,
    layer_mods: Vec<[Var; 4]>,
    final_mods: [Var; 2],
}

/// Per-layer key/value tensors of every generated position.
#[derive(Default)]
pub struct KvCache {
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        KvCache { keys: vec![None; layers], values: vec![None; layers], len: 0 }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Teacher-forced training inputs for a batch of windows.
#[derive(Clone, Debug)]
pub struct TeacherBatch {
    /// Flattened observation windows, (B, O * obs_dim).
    pub cond: Tensor,
    pub task_ids: Option<Vec<usize>>,
    /// Scale inputs for every position after the first scale,
    /// (B, T - l_1, D * C); `None` when there is a single scale.
    pub feats: Option<Tensor>,
    /// Target tokens in (batch, position, dim) order.
    pub targets: Vec<usize>,
}

/// `H x D` continuous actions, row-major by time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSequence {
    pub horizon: usize,
    pub dims: usize,
    pub values: Vec<f32>,
}

impl ActionSequence {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    fn from_columns(columns: &[Vec<f32>]) -> Self {
        let dims = columns.len();
        let horizon = columns.first().map_or(0, Vec::len);
        let mut values = vec![0.0; horizon * dims];
        for (d, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t * dims + d] = v;
            }
        }
        ActionSequence { horizon, dims, values }
    }

    pub fn mean_distance(&self, other: &ActionSequence) -> f32 {
        let n = self.horizon.max(1) as f32;
        (0..self.horizon)
            .map(|t| {
                self.row(t).iter().zip(other.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt()
            })
            .sum::<f32>()
            / n
    }
}

/// Result of one inference call.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub tokens: MultiScaleTokens,
    pub actions: ActionSequence,
    /// Decodes from the first `k` scales for `k = 1..=K`, when requested.
    pub partial: Vec<ActionSequence>,
}

pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
    cond1: Linear,
    cond2: Linear,
    task: Option<ParamId>,
    start: Linear,
    in_proj: Linear,
    scale_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    final_ada: Linear,
    head: Linear,
    mask: BlockCausalMask,
    passes: AtomicUsize,
}

impl Clone for Policy {
    fn clone(&self) -> Self {
        Policy {
            config: self.config.clone(),
            params: self.params.clone(),
            cond1: self.cond1,
            cond2: self.cond2,
            task: self.task,
            start: self.start,
            in_proj: self.in_proj,
            scale_emb: self.scale_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            final_ada: self.final_ada,
            head: self.head,
            mask: self.mask.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let w = config.width;
        let std = |din: usize| (1.0 / din as f32).sqrt();
        let cin = config.cond_input_dim();
        let cond1 = Linear::new(&mut ps, "cond.0", cin, w, std(cin), rng);
        let cond2 = Linear::new(&mut ps, "cond.1", w, w, std(w), rng);
        let task = config
            .num_tasks
            .map(|n| ps.add("task_embedding", Tensor::randn(vec![n, TASK_EMBED_DIM], 1.0, rng)));
        let start = Linear::new(&mut ps, "start", w, w, std(w), rng);
        let dc = config.action_dims * config.code_dim;
        let in_proj = Linear::new(&mut ps, "in_proj", dc, w, std(dc), rng);
        let scale_emb = ps.add("scale_embedding", Tensor::randn(vec![config.num_scales(), w], 0.02, rng));
        let max_len = *config.scale_lens.last().unwrap();
        let pos_emb = ps.add("position_embedding", Tensor::randn(vec![max_len, w], 0.02, rng));
        let layers = (0..config.layers)
            .map(|i| Layer {
                ada: Linear::new(&mut ps, &format!("layers.{i}.ada"), w, 4 * w, 0.02, rng),
                qkv: Linear::new(&mut ps, &format!("layers.{i}.qkv"), w, 3 * w, std(w), rng),
                proj: Linear::new(&mut ps, &format!("layers.{i}.proj"), w, w, std(w) / (2.0 * config.layers as f32).sqrt(), rng),
                fc1: Linear::new(&mut ps, &format!("layers.{i}.fc1"), w, 4 * w, std(w), rng),
                fc2: Linear::new(&mut ps, &format!("layers.{i}.fc2"), 4 * w, w, std(4 * w) / (2.0 * config.layers as f32).sqrt(), rng),
            })
            .collect();
        let final_ada = Linear::new(&mut ps, "final.ada", w, 2 * w, 0.02, rng);
        let head = Linear::new(&mut ps, "head", w, config.action_dims * config.codebook_size, 0.02, rng);
        let mask = BlockCausalMask::new(&config.scale_lens)?;
        Ok(Policy {
            config,
            params: ps,
            cond1,
            cond2,
            task,
            start,
            in_proj,
            scale_emb,
            pos_emb,
            layers,
            final_ada,
            head,
            mask,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mask(&self) -> &BlockCausalMask {
        &self.mask
    }

    /// Transformer passes run since creation or the last reset.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Checks that the tokenizers match this policy's scales, vocabulary and
    /// code width.
    pub fn check_tokenizers(&self, tokenizers: &[DimTokenizer]) -> Result<()> {
        let c = &self.config;
        if tokenizers.len() != c.action_dims {
            return Err(Error::Config(format!("policy has D={} action dims but {} tokenizers were given", c.action_dims, tokenizers.len())));
        }
        for t in tokenizers {
            let tc = t.config();
            if tc.num_scales() != c.num_scales() || tc.scale_lens != c.scale_lens {
                return Err(Error::Config(format!(
                    "policy K={} (scales {:?}) does not match tokenizer K={} (scales {:?})",
                    c.num_scales(),
                    c.scale_lens,
                    tc.num_scales(),
                    tc.scale_lens
                )));
            }
            if tc.codebook_size != c.codebook_size {
                return Err(Error::Config(format!("policy V={} does not match tokenizer V={}", c.codebook_size, tc.codebook_size)));
            }
            if tc.code_dim != c.code_dim {
                return Err(Error::Config(format!("policy C={} does not match tokenizer C={}", c.code_dim, tc.code_dim)));
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // scale inputs

    /// `interp(F^(k-1), l_k)` per dimension, concatenated along channels and
    /// laid out as (B, l_k, D * C). `k` is the 0-based scale being built and
    /// must be at least 1.
    fn prefix_features(&self, g: &mut Graph, toks: &[(&DimTokenizer, Bound)], batch: &[&MultiScaleTokens], k: usize) -> Result<Var> {
        let lk = self.config.scale_lens[k];
        let mut per_dim = Vec::with_capacity(toks.len());
        for (d, (tok, bound)) in toks.iter().enumerate() {
            let maps: Vec<&[TokenMap]> = batch
                .iter()
                .map(|r| r.dims.get(d).map(Vec::as_slice).ok_or_else(|| Error::InvalidArgument(format!("token maps missing dimension {d}"))))
                .collect::<Result<_>>()?;
            let f = tok.accumulate_graph(g, bound, &maps, k)?;
            per_dim.push(g.interp1d_linear(f, lk)?);
        }
        let f = g.concat(&per_dim, 1)?;
        g.transpose(f, 1, 2)
    }

    /// Scale inputs for every position after the first scale, (N, T - l_1, D * C).
    ///
    /// The tokenizers are frozen, so these can be computed once per dataset.
    pub fn teacher_features(&self, tokenizers: &[DimTokenizer], tokens: &[MultiScaleTokens]) -> Result<Option<Tensor>> {
        self.check_tokenizers(tokenizers)?;
        let k_total = self.config.num_scales();
        if k_total == 1 {
            return Ok(None);
        }
        let dc = self.config.action_dims * self.config.code_dim;
        let rest = self.config.seq_len() - self.config.scale_lens[0];
        let mut out = Vec::with_capacity(tokens.len() * rest * dc);
        for chunk in tokens.chunks(256) {
            let mut g = Graph::new();
            let toks: Vec<(&DimTokenizer, Bound)> = tokenizers.iter().map(|t| (t, t.params().bind(&mut g, false))).collect();
            let batch: Vec<&MultiScaleTokens> = chunk.iter().collect();
            let mut blocks = Vec::new();
            for k in 1..k_total {
                blocks.push(self.prefix_features(&mut g, &toks, &batch, k)?);
            }
            let all = g.concat(&blocks, 1)?;
            out.extend_from_slice(g.value(all).data());
        }
        Ok(Some(Tensor::new(vec![tokens.len(), rest, dc], out)?))
    }

    /// Flattened target tokens in (position, dim) order for one sample.
    pub fn flat_targets(&self, tokens: &MultiScaleTokens) -> Result<Vec<usize>> {
        let c = &self.config;
        if tokens.dims.len() != c.action_dims {
            return Err(Error::InvalidArgument(format!("token maps for {} dims, policy has {}", tokens.dims.len(), c.action_dims)));
        }
        let mut out = Vec::with_capacity(c.seq_len() * c.action_dims);
        for (k, &lk) in c.scale_lens.iter().enumerate() {
            for i in 0..lk {
                for maps in &tokens.dims {
                    let m = maps.get(k).filter(|m| m.tokens.len() == lk).ok_or_else(|| {
                        Error::InvalidArgument(format!("token map for scale {} missing or of wrong length", k + 1))
                    })?;
                    let t = m.tokens[i];
                    if t >= c.codebook_size {
                        return Err(Error::TokenOutOfRange { token: t, size: c.codebook_size });
                    }
                    out.push(t);
                }
            }
        }
        Ok(out)
    }

    fn position_embedding(&self, g: &mut Graph, p: &Bound, positions: std::ops::Range<usize>) -> Result<Var> {
        let blocks: Vec<usize> = positions.clone().map(|i| self.mask.block(i)).collect();
        let offsets: Vec<usize> = self.config.scale_lens.iter().scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        }).collect();
        let within: Vec<usize> = positions.map(|i| i - offsets[self.mask.block(i)]).collect();
        let s = g.embedding(p[self.scale_emb], &blocks)?;
        let q = g.embedding(p[self.pos_emb], &within)?;
        g.add(s, q)
    }

    fn condition(&self, g: &mut Graph, p: &Bound, cond: Var, task_ids: Option<&[usize]>) -> Result<Cond> {
        let b = g.shape(cond)[0];
        let mut x = cond;
        match (self.task, task_ids) {
            (Some(table), Some(ids)) => {
                if ids.len() != b {
                    return Err(Error::shape("condition", format!("{} task ids for batch {b}", ids.len())));
                }
                let e = g.embedding(p[table], ids)?;
                x = g.concat(&[x, e], 1)?;
            }
            (Some(_), None) => return Err(Error::InvalidArgument("policy has a task embedding; task id required".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("policy has no task embedding".into())),
            (None, None) => {}
        }
        let h = self.cond1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let c = self.cond2.forward(g, p, h)?;
        let act = g.gelu(c)?;
        let w = self.config.width;
        let split = |g: &mut Graph, lin: &Linear, n: usize| -> Result<Vec<Var>> {
            let m = lin.forward(g, p, act)?;
            let m = g.reshape(m, &[b, 1, n * w])?;
            (0..n).map(|i| g.narrow(m, 2, i * w, w)).collect()
        };
        let mut layer_mods = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let m = split(g, &layer.ada, 4)?;
            layer_mods.push([m[0], m[1], m[2], m[3]]);
        }
        let f = split(g, &self.final_ada, 2)?;
        Ok(Cond { c, layer_mods, final_mods: [f[0], f[1]] })
    }

    fn modulate(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let h = g.layer_norm(x, 1e-5)?;
        let one = g.constant(Tensor::scalar(1.0));
        let s = g.add(scale, one)?;
        let h = g.mul(h, s)?;
        g.add(h, shift)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let n = g.value(x).numel();
                let m: Vec<f32> = (0..n).map(|_| if r.random::<f32>() < p { 0.0 } else { keep }).collect();
                let m = g.constant(Tensor::new(g.shape(x).to_vec(), m)?);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        p: &Bound,
        li: usize,
        mods: &[Var; 4],
        x: Var,
        cache: Option<&mut KvCache>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let layer = &self.layers[li];
        let (w, heads) = (self.config.width, self.config.heads);
        let dh = w / heads;
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);

        let h = Self::modulate(g, x, mods[0], mods[1])?;
        let qkv = layer.qkv.forward(g, p, h)?;
        let split_heads = |g: &mut Graph, i: usize| -> Result<Var> {
            let v = g.narrow(qkv, 2, i * w, w)?;
            let v = g.reshape(v, &[b, t, heads, dh])?;
            g.transpose(v, 1, 2)
        };
        let q = split_heads(g, 0)?;
        let mut k = split_heads(g, 1)?;
        let mut v = split_heads(g, 2)?;
        let att = match cache {
            Some(cache) => {
                if let (Some(pk), Some(pv)) = (cache.keys[li], cache.values[li]) {
                    k = g.concat(&[pk, k], 2)?;
                    v = g.concat(&[pv, v], 2)?;
                }
                cache.keys[li] = Some(k);
                cache.values[li] = Some(v);
                let kt = g.transpose(k, 2, 3)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 1.0 / (dh as f32).sqrt())?;
                g.softmax(s)?
            }
            None => {
                let kt = g.transpose(k, 2, 3)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 1.0 / (dh as f32).sqrt())?;
                g.masked_softmax(s, self.mask.as_slice())?
            }
        };
        let o = g.matmul(att, v)?;
        let o = g.transpose(o, 1, 2)?;
        let o = g.reshape(o, &[b, t, w])?;
        let o = layer.proj.forward(g, p, o)?;
        let o = self.dropout(g, o, rng)?;
        let x = g.add(x, o)?;

        let h = Self::modulate(g, x, mods[2], mods[3])?;
        let h = layer.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = layer.fc2.forward(g, p, h)?;
        let h = self.dropout(g, h, rng)?;
        g.add(x, h)
    }

    fn head(&self, g: &mut Graph, p: &Bound, cond: &Cond, x: Var) -> Result<Var> {
        let h = Self::modulate(g, x, cond.final_mods[0], cond.final_mods[1])?;
        self.head.forward(g, p, h)
    }

    fn start_token(&self, g: &mut Graph, p: &Bound, cond: &Cond) -> Result<Var> {
        let b = g.shape(cond.c)[0];
        let w = self.config.width;
        let e = self.start.forward(g, p, cond.c)?;
        let e = g.reshape(e, &[b, 1, w])?;
        let l1 = self.config.scale_lens[0];
        if l1 == 1 {
            return Ok(e);
        }
        let z = g.constant(Tensor::zeros(vec![b, l1, w]));
        g.add(z, e)
    }

    /// Teacher-forced logits for all scales, (B, T, D * V), in one pass under
    /// the block-causal mask. `rng` enables dropout.
    pub fn forward_train(&self, g: &mut Graph, p: &Bound, batch: &TeacherBatch, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let c = &self.config;
        let cin = c.obs_steps * c.obs_dim;
        let bsz = batch.cond.shape()[0];
        if batch.cond.shape() != [bsz, cin] {
            return Err(Error::shape("forward_train", format!("condition {:?}, expected (B, {cin})", batch.cond.shape())));
        }
        let mut rng = rng;
        let cond_in = g.constant(batch.cond.clone());
        let cond = self.condition(g, p, cond_in, batch.task_ids.as_deref())?;
        let mut x = self.start_token(g, p, &cond)?;
        if let Some(feats) = &batch.feats {
            let rest = c.seq_len() - c.scale_lens[0];
            let dc = c.action_dims * c.code_dim;
            if feats.shape() != [bsz, rest, dc] {
                return Err(Error::shape("forward_train", format!("scale inputs {:?}, expected ({bsz}, {rest}, {dc})", feats.shape())));
            }
            let f = g.constant(feats.clone());
            let e = self.in_proj.forward(g, p, f)?;
            x = g.concat(&[x, e], 1)?;
        } else if c.num_scales() > 1 {
            return Err(Error::InvalidArgument("scale inputs required for K > 1".into()));
        }
        let pos = self.position_embedding(g, p, 0..c.seq_len())?;
        x = g.add(x, pos)?;
        for li in 0..self.layers.len() {
            x = self.block(g, p, li, &cond.layer_mods[li], x, None, &mut rng)?;
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        self.head(g, p, &cond, x)
    }

    /// Mean cross-entropy over scales, positions and dimensions.
    pub fn next_scale_loss(&self, g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.config.codebook_size;
        let n = g.value(logits).numel() / v;
        if targets.len() != n {
            return Err(Error::shape("next_scale_loss", format!("{} targets for {n} logit rows", targets.len())));
        }
        let flat = g.reshape(logits, &[n, v])?;
        g.cross_entropy_with_logits(flat, targets)
    }

    /// Builds the teacher batch for a set of samples.
    pub fn teacher_batch(&self, tokenizers: &[DimTokenizer], cond: Tensor, task_ids: Option<Vec<usize>>, tokens: &[MultiScaleTokens]) -> Result<TeacherBatch> {
        let feats = self.teacher_features(tokenizers, tokens)?;
        let mut targets = Vec::new();
        for t in tokens {
            targets.extend(self.flat_targets(t)?);
        }
        Ok(TeacherBatch { cond, task_ids, feats, targets })
    }

    /// Teacher-forced logits for one sample as (T, D, V).
    pub fn score(&self, tokenizers: &[DimTokenizer], cond: &[f32], task: Option<usize>, tokens: &MultiScaleTokens) -> Result<Tensor> {
        let batch = self.teacher_batch(tokenizers, Tensor::new(vec![1, cond.len()], cond.to_vec())?, task.map(|t| vec![t]), std::slice::from_ref(tokens))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = self.forward_train(&mut g, &p, &batch, None)?;
        let c = &self.config;
        g.value(l).clone().reshape(vec![c.seq_len(), c.action_dims, c.codebook_size])
    }

    // ---------------------------------------------------------------------
    // inference

    /// Scale-by-scale generation with a KV cache. With `forced`, token maps
    /// are taken from it instead of being sampled. Returns the maps and each
    /// scale's logits as (l_k, D, V).
    fn generate(
        &self,
        tokenizers: &[DimTokenizer],
        cond: &[f32],
        task: Option<usize>,
        forced: Option<&MultiScaleTokens>,
        sampler: &Sampler,
        rng: &mut dyn RngCore,
    ) -> Result<(MultiScaleTokens, Vec<Tensor>)> {
        self.check_tokenizers(tokenizers)?;
        let c = &self.config;
        if cond.len() != c.obs_steps * c.obs_dim {
            return Err(Error::shape("predict", format!("observation window of {} values, expected {}", cond.len(), c.obs_steps * c.obs_dim)));
        }
        if let Sampler::TopK { k, .. } = sampler {
            if *k > c.codebook_size {
                return Err(Error::InvalidArgument(format!("top-k of {k} exceeds vocabulary {}", c.codebook_size)));
            }
        }
        let (d, v) = (c.action_dims, c.codebook_size);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let toks: Vec<(&DimTokenizer, Bound)> = tokenizers.iter().map(|t| (t, t.params().bind(&mut g, false))).collect();
        let cond_in = g.constant(Tensor::new(vec![1, cond.len()], cond.to_vec())?);
        let ids = task.map(|t| vec![t]);
        let cnd = self.condition(&mut g, &p, cond_in, ids.as_deref())?;
        let mut cache = KvCache::new(self.layers.len());
        let mut out = MultiScaleTokens { dims: vec![Vec::new(); d] };
        let mut all_logits = Vec::with_capacity(c.num_scales());
        let mut none: Option<&mut dyn RngCore> = None;
        for (k, &lk) in c.scale_lens.iter().enumerate() {
            let mut x = if k == 0 {
                self.start_token(&mut g, &p, &cnd)?
            } else {
                let f = self.prefix_features(&mut g, &toks, &[&out], k)?;
                self.in_proj.forward(&mut g, &p, f)?
            };
            let pos = self.position_embedding(&mut g, &p, cache.len..cache.len + lk)?;
            x = g.add(x, pos)?;
            for li in 0..self.layers.len() {
                x = self.block(&mut g, &p, li, &cnd.layer_mods[li], x, Some(&mut cache), &mut none)?;
            }
            cache.len += lk;
            self.passes.fetch_add(1, Ordering::Relaxed);
            let logits = self.head(&mut g, &p, &cnd, x)?;
            let lt = g.value(logits).clone().reshape(vec![lk, d, v])?;
            for (di, maps) in out.dims.iter_mut().enumerate() {
                let tokens = match forced {
                    Some(f) => f.dims[di][k].tokens.clone(),
                    None => (0..lk)
                        .map(|i| {
                            let row = &lt.data()[(i * d + di) * v..(i * d + di + 1) * v];
                            sampler.sample(row, &mut *rng)
                        })
                        .collect::<Result<_>>()?,
                };
                maps.push(TokenMap { scale: k + 1, tokens });
            }
            all_logits.push(lt);
        }
        Ok((out, all_logits))
    }

    /// Samples `K` token maps per dimension in exactly `K` transformer passes.
    pub fn predict(&self, tokenizers: &[DimTokenizer], cond: &[f32], task: Option<usize>, sampler: &Sampler, rng: &mut dyn RngCore) -> Result<MultiScaleTokens> {
        Ok(self.generate(tokenizers, cond, task, None, sampler, rng)?.0)
    }

    /// Per-scale logits from the cached incremental path with the given
    /// token maps as the prefix.
    pub fn incremental_logits(&self, tokenizers: &[DimTokenizer], cond: &[f32], task: Option<usize>, tokens: &MultiScaleTokens) -> Result<Vec<Tensor>> {
        tokens.validate(tokenizers.first().map(|t| t.config()).ok_or_else(|| Error::Config("no tokenizers".into()))?)?;
        let mut unused = crate::tensor::rng_stream(0, 0);
        Ok(self.generate(tokenizers, cond, task, Some(tokens), &Sampler::Argmax, &mut unused)?.1)
    }

    /// Predicts tokens and decodes them to denormalized `H x D` actions,
    /// optionally with the partial decodes from each scale prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_actions(
        &self,
        tokenizers: &[DimTokenizer],
        norm: &NormStats,
        cond: &[f32],
        task: Option<usize>,
        sampler: &Sampler,
        rng: &mut dyn RngCore,
        trace: bool,
    ) -> Result<PolicyOutput> {
        if norm.dims() != self.config.action_dims {
            return Err(Error::Config(format!("normalization has {} dims, policy has {}", norm.dims(), self.config.action_dims)));
        }
        let tokens = self.predict(tokenizers, cond, task, sampler, rng)?;
        let decode = |upto: usize| -> Result<ActionSequence> {
            let cols = tokenizers
                .iter()
                .zip(&tokens.dims)
                .enumerate()
                .map(|(d, (tok, maps))| Ok(tok.decode_partial(maps, upto)?.into_iter().map(|y| norm.denormalize(d, y)).collect()))
                .collect::<Result<Vec<Vec<f32>>>>()?;
            Ok(ActionSequence::from_columns(&cols))
        };
        let k = self.config.num_scales();
        let actions = decode(k)?;
        let partial = if trace { (1..=k).map(decode).collect::<Result<_>>()? } else { Vec::new() };
        Ok(PolicyOutput { tokens, actions, partial })
    }
}
