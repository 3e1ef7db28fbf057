//! Feature corruption: for each row pick `t = round(ratio · M)` distinct
//! features uniformly at random and overwrite them with a value drawn
//! uniformly from that feature's training-set column.

use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorruptionError {
    #[error("cannot fit marginals on an empty dataset")]
    Empty,
    #[error("batch has {batch} features but marginals cover {marginals}")]
    WidthMismatch { batch: usize, marginals: usize },
    #[error("corruption ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("gaussian corruption sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
}

/// One pool per feature holding every observed training value (duplicates kept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMarginals {
    pools: Vec<Vec<f64>>,
}

impl EmpiricalMarginals {
    pub fn n_features(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, j: usize) -> &[f64] {
        &self.pools[j]
    }
}

pub fn fit_marginals(train: &Matrix) -> Result<EmpiricalMarginals, CorruptionError> {
    if train.rows() == 0 {
        return Err(CorruptionError::Empty);
    }
    Ok(EmpiricalMarginals { pools: (0..train.cols()).map(|j| train.column(j)).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Replace with a uniform draw from the feature's training column.
    #[default]
    EmpiricalMarginal,
    /// Add zero-mean Gaussian noise at the selected positions instead.
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: CorruptionMode,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { ratio: 0.3, seed: 0, mode: CorruptionMode::EmpiricalMarginal }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(CorruptionError::BadRatio(self.ratio));
        }
        if let CorruptionMode::GaussianNoise { sigma } = self.mode {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(CorruptionError::BadSigma(sigma));
            }
        }
        Ok(())
    }

    /// Number of corrupted features per row for width `m`.
    pub fn features_per_row(&self, m: usize) -> usize {
        (libm::round(self.ratio * m as f64) as usize).min(m)
    }
}

/// Binary `rows × cols` matrix marking corrupted positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.row(i).iter().filter(|b| **b).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }
}

/// Corrupts every row of `batch`, consuming randomness from `rng`.
///
/// Unselected entries are copied bit-for-bit. A replacement may coincide
/// with the original value; the mask still marks the position.
pub fn corrupt<R: Rng + ?Sized>(
    batch: &Matrix,
    marginals: &EmpiricalMarginals,
    config: &CorruptionConfig,
    rng: &mut R,
) -> Result<(Matrix, Mask), CorruptionError> {
    config.validate()?;
    let (b, m) = batch.shape();
    if m != marginals.n_features() {
        return Err(CorruptionError::WidthMismatch { batch: m, marginals: marginals.n_features() });
    }
    let t = config.features_per_row(m);
    let mut out = batch.clone();
    let mut bits = alloc::vec![false; b * m];
    if t == 0 {
        return Ok((out, Mask { rows: b, cols: m, bits }));
    }
    let noise = match config.mode {
        CorruptionMode::GaussianNoise { sigma } => Some(Normal::new(0.0, sigma).map_err(|_| CorruptionError::BadSigma(sigma))?),
        CorruptionMode::EmpiricalMarginal => None,
    };
    for i in 0..b {
        let chosen = index::sample(rng, m, t);
        let row = out.row_mut(i);
        for j in chosen.iter() {
            bits[i * m + j] = true;
            row[j] = match &noise {
                None => {
                    let pool = marginals.pool(j);
                    pool[rng.gen_range(0..pool.len())]
                }
                Some(n) => row[j] + n.sample(rng),
            };
        }
    }
    Ok((out, Mask { rows: b, cols: m, bits }))
}

/// [`corrupt`] with a fresh stream seeded from `config.seed`.
pub fn corrupt_seeded(
    batch: &Matrix,
    marginals: &EmpiricalMarginals,
    config: &CorruptionConfig,
) -> Result<(Matrix, Mask), CorruptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    corrupt(batch, marginals, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn cfg(ratio: f64) -> CorruptionConfig {
        CorruptionConfig { ratio, seed: 7, mode: CorruptionMode::EmpiricalMarginal }
    }

    #[test]
    fn pools_are_columns_with_duplicates() {
        let train = Matrix::from_rows(&[vec![0.1, 1.0], vec![0.5, 0.0], vec![0.5, 0.3]]);
        let mg = fit_marginals(&train).unwrap();
        assert_eq!(mg.pool(0), &[0.1, 0.5, 0.5]);
        assert_eq!(mg.n_features(), 2);
        assert_eq!(fit_marginals(&Matrix::zeros(0, 3)), Err(CorruptionError::Empty));
    }

    #[test]
    fn ratio_zero_is_identity() {
        let train = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let mg = fit_marginals(&train).unwrap();
        let batch = Matrix::from_rows(&[vec![0.9, 0.8, 0.7], vec![0.6, 0.5, 0.4]]);
        let (out, mask) = corrupt_seeded(&batch, &mg, &cfg(0.0)).unwrap();
        assert_eq!(out, batch);
        assert!((0..2).all(|i| mask.row_sum(i) == 0));
    }

    #[test]
    fn single_row_pool_full_ratio() {
        let train = Matrix::from_rows(&[vec![0.25, 0.75, 0.5]]);
        let mg = fit_marginals(&train).unwrap();
        let batch = Matrix::from_rows(&[vec![0.0; 3], vec![1.0; 3]]);
        let (out, _) = corrupt_seeded(&batch, &mg, &cfg(1.0)).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), train.row(0));
        }
    }

    #[test]
    fn ratio_point_three_of_ten() {
        let train = Matrix::from_vec(4, 10, (0..40).map(|v| v as f64 / 40.0).collect());
        let mg = fit_marginals(&train).unwrap();
        let (_, mask) = corrupt_seeded(&train, &mg, &cfg(0.3)).unwrap();
        assert!((0..4).all(|i| mask.row_sum(i) == 3));
    }

    #[test]
    fn width_mismatch_and_bad_ratio() {
        let mg = fit_marginals(&Matrix::zeros(2, 3)).unwrap();
        let b = Matrix::zeros(1, 4);
        assert!(matches!(corrupt_seeded(&b, &mg, &cfg(0.3)), Err(CorruptionError::WidthMismatch { .. })));
        let b = Matrix::zeros(1, 3);
        assert!(matches!(corrupt_seeded(&b, &mg, &cfg(1.5)), Err(CorruptionError::BadRatio(_))));
    }

    #[test]
    fn gaussian_mode_only_touches_masked_positions() {
        let train = Matrix::from_vec(5, 6, (0..30).map(|v| v as f64 / 30.0).collect());
        let mg = fit_marginals(&train).unwrap();
        let c = CorruptionConfig { ratio: 0.5, seed: 3, mode: CorruptionMode::GaussianNoise { sigma: 0.1 } };
        let (out, mask) = corrupt_seeded(&train, &mg, &c).unwrap();
        for i in 0..5 {
            assert_eq!(mask.row_sum(i), 3);
            for j in 0..6 {
                if !mask.get(i, j) {
                    assert_eq!(out.get(i, j).to_bits(), train.get(i, j).to_bits());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mask_count_support_and_integrity(
            seed in any::<u64>(),
            ratio in 0.0f64..=1.0,
            n_train in 1usize..6,
            m in 1usize..12,
        ) {
            let train = Matrix::from_vec(n_train, m, (0..n_train * m).map(|v| (v as f64 * 0.173).fract()).collect());
            let mg = fit_marginals(&train).unwrap();
            let batch = Matrix::from_vec(3, m, (0..3 * m).map(|v| 2.0 + v as f64).collect());
            let c = CorruptionConfig { ratio, seed, mode: CorruptionMode::EmpiricalMarginal };
            let (out, mask) = corrupt_seeded(&batch, &mg, &c).unwrap();
            let t = c.features_per_row(m);
            for i in 0..3 {
                prop_assert_eq!(mask.row_sum(i), t);
                for j in 0..m {
                    if mask.get(i, j) {
                        prop_assert!(mg.pool(j).contains(&out.get(i, j)));
                    } else {
                        prop_assert_eq!(out.get(i, j).to_bits(), batch.get(i, j).to_bits());
                    }
                }
            }
            let (again, mask2) = corrupt_seeded(&batch, &mg, &c).unwrap();
            prop_assert_eq!(again, out);
            prop_assert_eq!(mask2, mask);
        }
    }
}
