use rand::Rng;

use super::{Codebook, FeatureMap, TokenMap, TokenizerConfig};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, pad: usize, rng: &mut R) -> Self {
        let std = (1.0 / (cin * k) as f32).sqrt();
        let w = ps.add(format!("{name}.weight"), Tensor::randn(vec![cout, cin, k], std, rng));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv { w, b, pad }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p[self.w], Some(p[self.b]), 1, self.pad)
    }
}

/// Per-action-dimension multi-scale residual VQ-VAE.
#[derive(Clone, Debug)]
pub struct DimTokenizer {
    config: TokenizerConfig,
    params: ParamStore,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    codebook: ParamId,
    phi: Vec<Conv>,
}

/// Everything the training loss needs from one batched forward pass.
pub struct TokenizerForward {
    /// Encoder output, (B, C, L).
    pub feature: Var,
    /// Accumulated quantized approximation, (B, C, L).
    pub fhat: Var,
    /// Decoded actions, (B, H).
    pub recon: Var,
    /// Per scale: interpolated residual before quantization, (B, C, l_k).
    pub pre: Vec<Var>,
    /// Per scale: looked-up code vectors, (B, C, l_k).
    pub quant: Vec<Var>,
    /// Per scale: tokens in (batch, position) order.
    pub tokens: Vec<Vec<usize>>,
}

impl DimTokenizer {
    pub fn new<R: Rng + ?Sized>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let c = config.code_dim;
        let (h, l) = (config.horizon, config.feature_len);

        let mut widths = vec![1];
        widths.extend(&config.channels);
        let mut encoder = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            encoder.push(Conv::new(&mut ps, &format!("enc.{i}"), w[0], w[1], 3, 1, rng));
        }
        // valid conv contracting H to L
        let last = *widths.last().unwrap();
        encoder.push(Conv::new(&mut ps, &format!("enc.{}", widths.len() - 1), last, c, h - l + 1, 0, rng));

        let mut dec_widths = vec![c];
        dec_widths.extend(config.channels.iter().rev());
        dec_widths.push(1);
        let decoder = dec_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(&mut ps, &format!("dec.{i}"), w[0], w[1], 3, 1, rng))
            .collect();

        let v = config.codebook_size;
        let mut table = Tensor::randn(vec![v, c], 1.0 / (c as f32).sqrt(), rng);
        for row in table.data_mut().chunks_mut(c) {
            let mut n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if n == 0.0 {
                row[0] = 1.0;
                n = 1.0;
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let codebook = ps.add("codebook", table);

        let phi = (0..config.num_scales())
            .map(|k| {
                let w = ps.add(format!("phi.{k}.weight"), {
                    let mut t = Tensor::randn(vec![c, c, 3], 0.02, rng);
                    for i in 0..c {
                        t.data_mut()[(i * c + i) * 3 + 1] += 1.0;
                    }
                    t
                });
                let b = ps.add(format!("phi.{k}.bias"), Tensor::zeros(vec![c]));
                Conv { w, b, pad: 1 }
            })
            .collect();

        Ok(DimTokenizer { config, params: ps, encoder, decoder, codebook, phi })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.params.value(self.codebook).clone())
    }

    /// Parameter ids grouped by role, used by gradient-routing checks.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.decoder.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.phi.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    // ---------------------------------------------------------------------
    // graph building blocks

    /// (B, H) actions -> (B, C, L) features.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, actions: Var) -> Result<Var> {
        let s = g.shape(actions).to_vec();
        if s.len() != 2 || s[1] != self.config.horizon {
            return Err(Error::shape("encode", format!("expected (batch, {}), got {s:?}", self.config.horizon)));
        }
        let mut x = g.reshape(actions, &[s[0], 1, s[1]])?;
        let n = self.encoder.len();
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            if i + 1 < n {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// (B, C, L) features -> (B, H) actions.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, fhat: Var) -> Result<Var> {
        let mut x = g.interp1d_linear(fhat, self.config.horizon)?;
        let n = self.decoder.len();
        for (i, conv) in self.decoder.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            if i + 1 < n {
                x = g.gelu(x)?;
            }
        }
        let b = g.shape(x)[0];
        g.reshape(x, &[b, self.config.horizon])
    }

    /// `phi_k(interp(z, L))` for (B, C, l_k) code vectors at 0-based scale `k`.
    fn scale_contribution(&self, g: &mut Graph, p: &Bound, z: Var, k: usize) -> Result<Var> {
        let up = g.interp1d_linear(z, self.config.feature_len)?;
        self.phi[k].forward(g, p, up)
    }

    /// Looks up (B * l_k) tokens as a (B, C, l_k) tensor.
    fn lookup_graph(&self, g: &mut Graph, p: &Bound, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
        let rows = g.embedding(p[self.codebook], tokens)?;
        let rows = g.reshape(rows, &[batch, len, self.config.code_dim])?;
        g.transpose(rows, 1, 2)
    }

    fn quantize_rows(&self, cb: &Codebook, pre: &Tensor) -> Vec<usize> {
        let (b, c, l) = (pre.shape()[0], pre.shape()[1], pre.shape()[2]);
        let d = pre.data();
        let mut rows = vec![0.0; b * l * c];
        for bi in 0..b {
            for i in 0..l {
                for ci in 0..c {
                    rows[(bi * l + i) * c + ci] = d[(bi * c + ci) * l + i];
                }
            }
        }
        cb.nearest_batch(&rows)
    }

    /// Residual multi-scale quantization of (B, C, L) features.
    ///
    /// With `straight_through` the code vectors enter the accumulation as
    /// `pre + sg(quant - pre)` so reconstruction gradients reach the encoder;
    /// otherwise the looked-up vectors are used as-is. The subtraction from the
    /// running residual is detached in both modes.
    pub fn quantize_graph(&self, g: &mut Graph, p: &Bound, feature: Var, straight_through: bool) -> Result<(Var, Vec<Var>, Vec<Var>, Vec<Vec<usize>>)> {
        let cb = Codebook::new(g.value(p[self.codebook]).clone())?;
        let batch = g.shape(feature)[0];
        let mut residual = feature;
        let mut fhat: Option<Var> = None;
        let (mut pres, mut quants, mut all_tokens) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &lk) in self.config.scale_lens.iter().enumerate() {
            let pre = g.interp1d_linear(residual, lk)?;
            let tokens = self.quantize_rows(&cb, g.value(pre));
            let quant = self.lookup_graph(g, p, &tokens, batch, lk)?;
            let z = if straight_through { g.straight_through(pre, quant)? } else { quant };
            let h = self.scale_contribution(g, p, z, k)?;
            let h_sg = g.detach(h);
            residual = g.sub(residual, h_sg)?;
            fhat = Some(match fhat {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
            pres.push(pre);
            quants.push(quant);
            all_tokens.push(tokens);
        }
        Ok((fhat.expect("at least one scale"), pres, quants, all_tokens))
    }

    /// Rebuilds the (B, C, L) approximation from the first `upto` scales of
    /// per-sequence token maps.
    pub fn accumulate_graph(&self, g: &mut Graph, p: &Bound, maps: &[&[TokenMap]], upto: usize) -> Result<Var> {
        let batch = maps.len();
        if upto == 0 || upto > self.config.num_scales() {
            return Err(Error::InvalidArgument(format!("scale prefix {upto} outside 1..={}", self.config.num_scales())));
        }
        let mut fhat: Option<Var> = None;
        for k in 0..upto {
            let lk = self.config.scale_lens[k];
            let mut tokens = Vec::with_capacity(batch * lk);
            for m in maps {
                let map = m.get(k).ok_or_else(|| Error::InvalidArgument(format!("missing token map for scale {}", k + 1)))?;
                if map.tokens.len() != lk {
                    return Err(Error::shape("decode_tokens", format!("scale {} has {} tokens, expected {lk}", k + 1, map.tokens.len())));
                }
                if let Some(&t) = map.tokens.iter().find(|&&t| t >= self.config.codebook_size) {
                    return Err(Error::TokenOutOfRange { token: t, size: self.config.codebook_size });
                }
                tokens.extend(&map.tokens);
            }
            let quant = self.lookup_graph(g, p, &tokens, batch, lk)?;
            let h = self.scale_contribution(g, p, quant, k)?;
            fhat = Some(match fhat {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
        }
        Ok(fhat.unwrap())
    }

    /// Full training forward on a (B, H) batch of normalized action columns.
    pub fn forward(&self, g: &mut Graph, p: &Bound, actions: Var) -> Result<TokenizerForward> {
        let feature = self.encode_graph(g, p, actions)?;
        let (fhat, pre, quant, tokens) = self.quantize_graph(g, p, feature, true)?;
        let recon = self.decode_graph(g, p, fhat)?;
        Ok(TokenizerForward { feature, fhat, recon, pre, quant, tokens })
    }

    /// Reconstruction MSE plus per-scale codebook and commitment terms.
    pub fn vqvae_loss(&self, g: &mut Graph, target: Var, fwd: &TokenizerForward) -> Result<Var> {
        let mut loss = g.mse(fwd.recon, target)?;
        for (&pre, &quant) in fwd.pre.iter().zip(&fwd.quant) {
            let pre_sg = g.detach(pre);
            let q = g.mse(pre_sg, quant)?;
            let q = g.scale(q, self.config.quant_weight)?;
            let quant_sg = g.detach(quant);
            let c = g.mse(pre, quant_sg)?;
            let c = g.scale(c, self.config.commit_weight)?;
            loss = g.add(loss, q)?;
            loss = g.add(loss, c)?;
        }
        Ok(loss)
    }

    // ---------------------------------------------------------------------
    // inference helpers (no gradients)

    fn batch_tensor(&self, columns: &[&[f32]]) -> Result<Tensor> {
        let h = self.config.horizon;
        let mut data = Vec::with_capacity(columns.len() * h);
        for c in columns {
            if c.len() != h {
                return Err(Error::shape("encode", format!("action column of length {}, expected {h}", c.len())));
            }
            data.extend_from_slice(c);
        }
        Tensor::new(vec![columns.len(), h], data)
    }

    pub fn encode(&self, column: &[f32]) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(self.batch_tensor(&[column])?);
        let f = self.encode_graph(&mut g, &p, a)?;
        let (c, l) = (self.config.code_dim, self.config.feature_len);
        Ok(FeatureMap::from_channels_first(c, l, g.value(f).data()))
    }

    /// Quantizes one feature map; returns its token maps and the accumulated
    /// approximation.
    pub fn quantize_multiscale(&self, feature: &FeatureMap) -> Result<(Vec<TokenMap>, FeatureMap)> {
        let (c, l) = (self.config.code_dim, self.config.feature_len);
        if feature.len != l || feature.channels != c {
            return Err(Error::shape("quantize_multiscale", format!("feature map {}x{}, expected {l}x{c}", feature.len, feature.channels)));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(Tensor::new(vec![1, c, l], feature.to_channels_first())?);
        let (fhat, _, _, tokens) = self.quantize_graph(&mut g, &p, f, false)?;
        let maps = tokens
            .into_iter()
            .enumerate()
            .map(|(k, tokens)| TokenMap { scale: k + 1, tokens })
            .collect();
        Ok((maps, FeatureMap::from_channels_first(c, l, g.value(fhat).data())))
    }

    /// Token maps for a batch of action columns.
    pub fn tokenize_batch(&self, columns: &[&[f32]]) -> Result<Vec<Vec<TokenMap>>> {
        if columns.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(self.batch_tensor(columns)?);
        let f = self.encode_graph(&mut g, &p, a)?;
        let (_, _, _, tokens) = self.quantize_graph(&mut g, &p, f, false)?;
        let mut out: Vec<Vec<TokenMap>> = vec![Vec::new(); columns.len()];
        for (k, toks) in tokens.iter().enumerate() {
            let lk = self.config.scale_lens[k];
            for (b, chunk) in toks.chunks(lk).enumerate() {
                out[b].push(TokenMap { scale: k + 1, tokens: chunk.to_vec() });
            }
        }
        Ok(out)
    }

    /// Encode, quantize and decode a batch; returns reconstructions.
    pub fn reconstruct_batch(&self, columns: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(self.batch_tensor(columns)?);
        let f = self.encode_graph(&mut g, &p, a)?;
        let (fhat, _, _, _) = self.quantize_graph(&mut g, &p, f, false)?;
        let r = self.decode_graph(&mut g, &p, fhat)?;
        Ok(g.value(r).data().chunks(self.config.horizon).map(<[f32]>::to_vec).collect())
    }

    /// Approximation `sum_{j<=upto} phi_j(interp(lookup(r_j), L))` as a feature map.
    pub fn feature_from_tokens(&self, maps: &[TokenMap], upto: usize) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.accumulate_graph(&mut g, &p, &[maps], upto)?;
        Ok(FeatureMap::from_channels_first(self.config.code_dim, self.config.feature_len, g.value(f).data()))
    }

    /// Decoder applied to an arbitrary feature map.
    pub fn decode_feature(&self, feature: &FeatureMap) -> Result<Vec<f32>> {
        let (c, l) = (self.config.code_dim, self.config.feature_len);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(Tensor::new(vec![1, c, l], feature.to_channels_first())?);
        let r = self.decode_graph(&mut g, &p, f)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Decodes all `K` scales of one dimension's token maps.
    pub fn decode_tokens(&self, maps: &[TokenMap]) -> Result<Vec<f32>> {
        self.decode_partial(maps, self.config.num_scales())
    }

    /// Decodes using only the first `upto` scales.
    pub fn decode_partial(&self, maps: &[TokenMap], upto: usize) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.accumulate_graph(&mut g, &p, &[maps], upto)?;
        let r = self.decode_graph(&mut g, &p, f)?;
        Ok(g.value(r).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_stream;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            horizon: 8,
            scale_lens: vec![1, 2],
            feature_len: 2,
            code_dim: 4,
            codebook_size: 16,
            channels: vec![6, 8],
            commit_weight: 1.0,
            quant_weight: 1.0,
        }
    }

    #[test]
    fn feature_shape_for_defaults() {
        let tok = DimTokenizer::new(TokenizerConfig::default(), &mut rng_stream(0, 0)).unwrap();
        let f = tok.encode(&[0.1; 16]).unwrap();
        assert_eq!((f.len, f.channels), (4, 8));
        assert!(tok.encode(&[0.1; 15]).is_err());
    }

    #[test]
    fn codebook_rows_unit_norm_at_init() {
        let tok = DimTokenizer::new(TokenizerConfig::default(), &mut rng_stream(1, 0)).unwrap();
        let cb = tok.codebook().unwrap();
        for v in 0..cb.size() {
            let n: f32 = cb.lookup(v).unwrap().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_sequence_encodes_finite_and_grads_flow() {
        let tok = DimTokenizer::new(TokenizerConfig::default(), &mut rng_stream(2, 0)).unwrap();
        let mut g = Graph::new();
        let p = tok.params.bind(&mut g, true);
        let a = g.constant(Tensor::zeros(vec![1, 16]));
        let f = tok.encode_graph(&mut g, &p, a).unwrap();
        assert!(g.value(f).is_finite());
        let s = g.mul(f, f).unwrap();
        let s = g.sum(s).unwrap();
        // biases start at zero, so perturb through a constant offset
        let one = g.constant(Tensor::scalar(1.0));
        let s = g.add(s, one).unwrap();
        g.backward(s).unwrap();
        let enc = tok.encoder_ids();
        let any = enc.iter().any(|&id| g.grad(p[id]).is_some());
        assert!(any);
    }

    #[test]
    fn single_scale_exact_codebook_reconstructs_features() {
        let mut cfg = small();
        cfg.scale_lens = vec![2];
        let mut tok = DimTokenizer::new(cfg, &mut rng_stream(3, 0)).unwrap();
        // phi = identity kernel
        for id in tok.phi_ids() {
            let t = tok.params.value_mut(id);
            let shape = t.shape().to_vec();
            t.data_mut().fill(0.0);
            if shape.len() == 3 {
                let c = shape[0];
                for i in 0..c {
                    t.data_mut()[(i * c + i) * 3 + 1] = 1.0;
                }
            }
        }
        let f = tok.encode(&[0.3, -0.2, 0.5, 0.9, -0.7, 0.1, 0.0, 0.4]).unwrap();
        let cb_id = tok.codebook_id();
        let table = tok.params.value_mut(cb_id);
        table.data_mut()[5 * 4..6 * 4].copy_from_slice(f.row(0));
        table.data_mut()[9 * 4..10 * 4].copy_from_slice(f.row(1));
        let (maps, fhat) = tok.quantize_multiscale(&f).unwrap();
        assert_eq!(maps[0].tokens, vec![5, 9]);
        assert_eq!(fhat, f);
    }

    #[test]
    fn decode_matches_quantize_path_bitwise() {
        let tok = DimTokenizer::new(small(), &mut rng_stream(4, 0)).unwrap();
        let col = [0.2, 0.4, -0.1, 0.0, 0.3, 0.8, -0.5, 0.25];
        let f = tok.encode(&col).unwrap();
        let (maps, fhat) = tok.quantize_multiscale(&f).unwrap();
        let direct = tok.decode_feature(&fhat).unwrap();
        let via_tokens = tok.decode_tokens(&maps).unwrap();
        assert_eq!(direct, via_tokens);
        let (maps2, _) = tok.quantize_multiscale(&f).unwrap();
        assert_eq!(maps, maps2);
    }

    #[test]
    fn same_token_maps_decode_finite() {
        let tok = DimTokenizer::new(TokenizerConfig::default(), &mut rng_stream(5, 0)).unwrap();
        let maps: Vec<TokenMap> = (1..=4).map(|k| TokenMap { scale: k, tokens: vec![7; k] }).collect();
        let out = tok.decode_tokens(&maps).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_token_is_error() {
        let tok = DimTokenizer::new(small(), &mut rng_stream(6, 0)).unwrap();
        let maps = vec![TokenMap { scale: 1, tokens: vec![16] }, TokenMap { scale: 2, tokens: vec![0, 1] }];
        assert!(matches!(tok.decode_tokens(&maps), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn perfect_reconstruction_gives_zero_loss() {
        let tok = DimTokenizer::new(small(), &mut rng_stream(7, 0)).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 8], 0.5));
        let pre = g.constant(Tensor::full(vec![2, 4, 1], 0.3));
        let fwd = TokenizerForward { feature: pre, fhat: pre, recon: a, pre: vec![pre], quant: vec![pre], tokens: vec![] };
        let loss = tok.vqvae_loss(&mut g, a, &fwd).unwrap();
        assert!(g.value(loss).item() < 1e-8);
    }

    #[test]
    fn loss_terms_route_gradients() {
        let tok = DimTokenizer::new(small(), &mut rng_stream(8, 0)).unwrap();
        let data: Vec<f32> = (0..24).map(|i| ((i as f32) * 0.37).sin()).collect();
        let grads_of = |term: &str| {
            let mut g = Graph::new();
            let p = tok.params.bind(&mut g, true);
            let a = g.constant(Tensor::new(vec![3, 8], data.clone()).unwrap());
            let fwd = tok.forward(&mut g, &p, a).unwrap();
            let mut total: Option<Var> = None;
            for (&pre, &quant) in fwd.pre.iter().zip(&fwd.quant) {
                let t = match term {
                    "quant" => {
                        let s = g.detach(pre);
                        g.mse(s, quant).unwrap()
                    }
                    _ => {
                        let s = g.detach(quant);
                        g.mse(pre, s).unwrap()
                    }
                };
                total = Some(match total {
                    None => t,
                    Some(x) => g.add(x, t).unwrap(),
                });
            }
            g.backward(total.unwrap()).unwrap();
            let norm = |ids: Vec<ParamId>| -> f32 {
                ids.iter()
                    .filter_map(|&id| g.grad(p[id]))
                    .map(|t| t.data().iter().map(|v| v * v).sum::<f32>())
                    .sum()
            };
            (
                norm(tok.encoder_ids()),
                norm(tok.decoder_ids()),
                norm(tok.phi_ids()),
                norm(vec![tok.codebook_id()]),
            )
        };
        let (enc, dec, phi, cb) = grads_of("quant");
        assert_eq!((enc, dec, phi), (0.0, 0.0, 0.0));
        assert!(cb > 0.0);
        let (enc, dec, phi, cb) = grads_of("commit");
        assert!(enc > 0.0);
        assert_eq!((dec, phi, cb), (0.0, 0.0, 0.0));
    }

    #[test]
    fn straight_through_reaches_encoder_from_reconstruction() {
        let tok = DimTokenizer::new(small(), &mut rng_stream(9, 0)).unwrap();
        let mut g = Graph::new();
        let p = tok.params.bind(&mut g, true);
        let data: Vec<f32> = (0..16).map(|i| ((i as f32) * 0.71).cos()).collect();
        let a = g.constant(Tensor::new(vec![2, 8], data).unwrap());
        let fwd = tok.forward(&mut g, &p, a).unwrap();
        let l = g.mse(fwd.recon, a).unwrap();
        g.backward(l).unwrap();
        let enc: f32 = tok
            .encoder_ids()
            .iter()
            .filter_map(|&id| g.grad(p[id]))
            .map(|t| t.data().iter().map(|v| v.abs()).sum::<f32>())
            .sum();
        assert!(enc > 0.0);
        assert!(g.grad(p[tok.codebook_id()]).is_none());
    }
}
