use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::envs::Task;
use crate::error::{Error, Result};
use crate::harness::{BaselineChunkRegressor, BaselineConfig, EmaShadow, NormStats, TokenizerSet, TrainedPolicy};
use crate::policy::{Policy, PolicyConfig};
use crate::tensor::{rng_stream, ParamStore, Tensor};
use crate::tokenizer::{DimTokenizer, TokenizerConfig};

pub const MAGIC: &[u8; 4] = b"CARP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Tokenizer,
    Policy,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ArtifactKind,
    pub task: Option<String>,
    pub norm: NormStats,
    pub tokenizer: Option<TokenizerConfig>,
    pub policy: Option<PolicyConfig>,
    pub baseline: Option<BaselineConfig>,
    pub obs_dim: Option<usize>,
    pub ema: bool,
    pub ema_decay: Option<f32>,
    pub tensors: Vec<TensorEntry>,
}

/// Header plus tensors in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    fn new(mut header: CheckpointHeader, named: Vec<(String, Tensor)>) -> Self {
        let mut offset = 0u64;
        header.tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        Checkpoint { header, tensors: named.into_iter().map(|(_, t)| t).collect() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (missing CARP magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = 16u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| bad("header length exceeds file".into()))? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("bad header: {e}")))?;
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0u64;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let len = 4 * n as u64;
            if e.offset != expected || e.offset + len > payload.len() as u64 {
                return Err(bad(format!("tensor {} at offset {} does not fit the payload", e.name, e.offset)));
            }
            let raw = &payload[e.offset as usize..(e.offset + len) as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
            expected += len;
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!("{} trailing payload bytes", payload.len() as u64 - expected)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    fn section(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter_map(|(e, t)| e.name.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    fn expect_kind(&self, kinds: &[ArtifactKind]) -> Result<()> {
        if kinds.contains(&self.header.kind) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {:?} checkpoint, found {:?}", kinds[0], self.header.kind)))
        }
    }

    pub fn task(&self) -> Option<Task> {
        self.header.task.as_deref().and_then(|t| t.parse().ok())
    }

    pub fn from_tokenizers(set: &TokenizerSet, task: Option<Task>) -> Self {
        let header = base_header(ArtifactKind::Tokenizer, task, set);
        Checkpoint::new(header, tokenizer_tensors(set))
    }

    pub fn from_policy(tp: &TrainedPolicy) -> Self {
        let mut header = base_header(ArtifactKind::Policy, tp.task, &tp.tokenizers);
        header.policy = Some(tp.policy.config().clone());
        header.obs_dim = Some(tp.policy.config().obs_dim);
        header.ema = tp.ema.is_some();
        header.ema_decay = tp.ema.as_ref().map(|e| e.decay);
        let mut named = tokenizer_tensors(&tp.tokenizers);
        named.extend(prefixed("policy", tp.policy.params()));
        if let Some(e) = &tp.ema {
            named.extend(e.tensors().iter().map(|(n, t)| (format!("ema.{n}"), t.clone())));
        }
        Checkpoint::new(header, named)
    }

    pub fn from_baseline(model: &BaselineChunkRegressor, task: Option<Task>) -> Self {
        let header = CheckpointHeader {
            kind: ArtifactKind::Baseline,
            task: task.map(|t| t.name()),
            norm: model.norm.clone(),
            tokenizer: None,
            policy: None,
            baseline: Some(model.config.clone()),
            obs_dim: Some(model.obs_dim),
            ema: false,
            ema_decay: None,
            tensors: Vec::new(),
        };
        Checkpoint::new(header, prefixed("baseline", model.params()))
    }

    /// Tokenizers from a tokenizer or policy checkpoint.
    pub fn tokenizers(&self) -> Result<TokenizerSet> {
        self.expect_kind(&[ArtifactKind::Tokenizer, ArtifactKind::Policy])?;
        let config = self.header.tokenizer.clone().ok_or_else(|| Error::Checkpoint("missing tokenizer config".into()))?;
        let mut dims = Vec::new();
        for d in 0..self.header.norm.dims() {
            let mut tok = DimTokenizer::new(config.clone(), &mut rng_stream(0, d as u64))?;
            tok.params_mut().load_values(self.section(&format!("tokenizer.{d}")))?;
            dims.push(tok);
        }
        Ok(TokenizerSet { config, norm: self.header.norm.clone(), dims })
    }

    pub fn trained_policy(&self) -> Result<TrainedPolicy> {
        self.expect_kind(&[ArtifactKind::Policy])?;
        let tokenizers = self.tokenizers()?;
        let config = self.header.policy.clone().ok_or_else(|| Error::Checkpoint("missing policy config".into()))?;
        let mut policy = Policy::new(config, &mut rng_stream(0, 0))?;
        policy.params_mut().load_values(self.section("policy"))?;
        policy.check_tokenizers(&tokenizers.dims)?;
        let ema = if self.header.ema {
            let decay = self.header.ema_decay.unwrap_or(0.999);
            let shadow = self.section("ema");
            let mut probe = policy.params().clone();
            probe.load_values(shadow.clone())?;
            Some(EmaShadow::from_tensors(decay, shadow))
        } else {
            None
        };
        Ok(TrainedPolicy { task: self.task(), tokenizers, policy, ema })
    }

    pub fn baseline(&self) -> Result<BaselineChunkRegressor> {
        self.expect_kind(&[ArtifactKind::Baseline])?;
        let cfg = self.header.baseline.clone().ok_or_else(|| Error::Checkpoint("missing baseline config".into()))?;
        let obs_dim = self.header.obs_dim.ok_or_else(|| Error::Checkpoint("missing obs_dim".into()))?;
        let mut model = BaselineChunkRegressor::new(cfg, obs_dim, self.header.norm.clone(), 0)?;
        model.params_mut().load_values(self.section("baseline"))?;
        Ok(model)
    }
}

fn base_header(kind: ArtifactKind, task: Option<Task>, set: &TokenizerSet) -> CheckpointHeader {
    CheckpointHeader {
        kind,
        task: task.map(|t| t.name()),
        norm: set.norm.clone(),
        tokenizer: Some(set.config.clone()),
        policy: None,
        baseline: None,
        obs_dim: None,
        ema: false,
        ema_decay: None,
        tensors: Vec::new(),
    }
}

fn prefixed(prefix: &str, ps: &ParamStore) -> Vec<(String, Tensor)> {
    ps.named().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())).collect()
}

fn tokenizer_tensors(set: &TokenizerSet) -> Vec<(String, Tensor)> {
    set.dims.iter().enumerate().flat_map(|(d, t)| prefixed(&format!("tokenizer.{d}"), t.params())).collect()
}
