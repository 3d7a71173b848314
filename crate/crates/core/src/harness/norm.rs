use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension min/max scaling to `[-1, 1]`.
///
/// A dimension whose range is empty is constant in the data; it normalizes to
/// 0 and denormalizes back to its single value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormStats {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it.next().ok_or_else(|| Error::InvalidArgument("no rows to fit normalization".into()))?;
        let (mut min, mut max) = (first.to_vec(), first.to_vec());
        for row in it {
            if row.len() != min.len() {
                return Err(Error::shape("norm_stats", format!("row of {} values, expected {}", row.len(), min.len())));
            }
            for (d, &v) in row.iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        Ok(NormStats { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, d: usize) -> bool {
        self.max[d] <= self.min[d]
    }

    pub fn normalize(&self, d: usize, x: f32) -> f32 {
        if self.is_constant(d) {
            return 0.0;
        }
        let (lo, hi) = (self.min[d] as f64, self.max[d] as f64);
        (2.0 * (x as f64 - lo) / (hi - lo) - 1.0) as f32
    }

    pub fn denormalize(&self, d: usize, y: f32) -> f32 {
        if self.is_constant(d) {
            return self.min[d];
        }
        let (lo, hi) = (self.min[d] as f64, self.max[d] as f64);
        ((y as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32
    }

    pub fn normalize_row(&self, row: &[f32]) -> Vec<f32> {
        row.iter().enumerate().map(|(d, &x)| self.normalize(d, x)).collect()
    }

    pub fn denormalize_row(&self, row: &[f32]) -> Vec<f32> {
        row.iter().enumerate().map(|(d, &y)| self.denormalize(d, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_dimension_maps_to_zero() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 0.5], vec![3.0, 0.5]];
        let s = NormStats::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert!(s.is_constant(1));
        assert_eq!(s.normalize_row(&[1.0, 0.5]), vec![-1.0, 0.0]);
        assert_eq!(s.normalize(0, 3.0), 1.0);
        assert_eq!(s.denormalize(1, 0.3), 0.5);
    }

    #[test]
    fn fit_requires_rows() {
        assert!(NormStats::fit(std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(lo in -5.0f32..5.0, span in 0.01f32..3.0, t in 0.0f32..1.0) {
            let s = NormStats { min: vec![lo], max: vec![lo + span] };
            let x = lo + t * span;
            prop_assert!((s.denormalize(0, s.normalize(0, x)) - x).abs() <= 1e-6 * (1.0 + x.abs()));
            let y = s.normalize(0, x);
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&y));
        }
    }
}
