use crate::error::{Error, Result};
use crate::tensor::kernels::{self, View};
use crate::tensor::Tensor;

/// Snapshot of a `V x C` code table prepared for cosine lookup.
#[derive(Clone, Debug)]
pub struct Codebook {
    vectors: Tensor,
    unit: Vec<f32>,
    usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook must be a non-empty V x C table, got {:?}",
                vectors.shape()
            )));
        }
        let c = vectors.shape()[1];
        let mut unit = vectors.data().to_vec();
        for row in unit.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let v = vectors.shape()[0];
        Ok(Codebook { vectors, unit, usage_counts: vec![0; v] })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn lookup(&self, v: usize) -> Result<&[f32]> {
        if v >= self.size() {
            return Err(Error::TokenOutOfRange { token: v, size: self.size() });
        }
        let c = self.dim();
        Ok(&self.vectors.data()[v * c..(v + 1) * c])
    }

    /// Index of the code with the highest cosine similarity to `f`; the lowest
    /// index wins ties and an all-zero `f` maps to token 0.
    pub fn nearest(&self, f: &[f32]) -> usize {
        self.nearest_batch(f)[0]
    }

    /// [`Codebook::nearest`] for each `C`-wide row of `rows`.
    pub fn nearest_batch(&self, rows: &[f32]) -> Vec<usize> {
        let (c, v) = (self.dim(), self.size());
        let n = rows.len() / c;
        let mut scores = vec![0.0; n * v];
        kernels::gemm(n, c, v, View::row_major(rows, c), View::transposed(&self.unit, c), &mut scores, 0.0);
        rows.chunks(c)
            .zip(scores.chunks(v))
            .map(|(f, s)| {
                if f.iter().all(|&x| x == 0.0) {
                    return 0;
                }
                let mut best = 0;
                for (i, &x) in s.iter().enumerate() {
                    if x > s[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn record_usage(&mut self, tokens: &[usize]) {
        for &t in tokens {
            if let Some(c) = self.usage_counts.get_mut(t) {
                *c += 1;
            }
        }
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    /// Fraction of codes selected at least once since creation.
    pub fn utilization(&self) -> f32 {
        let used = self.usage_counts.iter().filter(|&&c| c > 0).count();
        used as f32 / self.size() as f32
    }
}

/// Cosine nearest-code quantization of a single feature vector.
pub fn quantize_nearest(f: &[f32], codebook: &Codebook) -> Result<usize> {
    if f.len() != codebook.dim() {
        return Err(Error::shape("quantize_nearest", format!("vector of {} for code dim {}", f.len(), codebook.dim())));
    }
    Ok(codebook.nearest(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axes() -> Codebook {
        Codebook::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn nearest_axis() {
        assert_eq!(quantize_nearest(&[0.9, 0.1], &axes()).unwrap(), 0);
        assert_eq!(quantize_nearest(&[0.1, 0.9], &axes()).unwrap(), 1);
    }

    #[test]
    fn zero_vector_falls_back_to_token_zero() {
        assert_eq!(quantize_nearest(&[0.0, 0.0], &axes()).unwrap(), 0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let cb = Codebook::new(Tensor::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(cb.nearest(&[3.0, 0.0]), 1);
        assert_eq!(cb.nearest(&[1.0, 1.0]), 0);
    }

    #[test]
    fn empty_codebook_is_error() {
        assert!(Codebook::new(Tensor::zeros(vec![0, 4])).is_err());
    }

    #[test]
    fn lookup_out_of_range() {
        assert!(axes().lookup(2).is_err());
        assert_eq!(axes().lookup(1).unwrap(), &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn scaled_code_maps_to_itself(v in 0usize..16, c in 0.01f32..100.0, seed in 0u64..1000) {
            let mut rng = crate::tensor::rng_stream(seed, 0);
            let cb = Codebook::new(Tensor::randn(vec![16, 5], 1.0, &mut rng)).unwrap();
            let f: Vec<f32> = cb.lookup(v).unwrap().iter().map(|x| x * c).collect();
            prop_assert_eq!(cb.nearest(&f), v);
        }

        #[test]
        fn positive_scaling_keeps_token(c in 0.001f32..1000.0, seed in 0u64..1000) {
            let mut rng = crate::tensor::rng_stream(seed, 1);
            let cb = Codebook::new(Tensor::randn(vec![32, 4], 1.0, &mut rng)).unwrap();
            let f = Tensor::randn(vec![4], 1.0, &mut rng);
            let scaled: Vec<f32> = f.data().iter().map(|x| x * c).collect();
            prop_assert_eq!(cb.nearest(f.data()), cb.nearest(&scaled));
        }
    }
}
