//! Synthetic benchmark with known structure: a few informative features
//! carrying two Gaussian clusters, noisy copies of them, and pure noise.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{minmax_rescale, split, DataError, Splits, TableDataset};
use crate::linalg::Matrix;
use crate::training::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_informative: usize,
    /// Noisy copies, cycling over the informative features.
    pub n_copies: usize,
    pub n_noise: usize,
    /// Class means sit at `±separation / 2` on every informative axis.
    pub separation: f64,
    /// Standard deviation of the noise added to each copy.
    pub copy_noise: f64,
    /// Fraction of rows that keep their label.
    pub labeled_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_informative: 4,
            n_copies: 8,
            n_noise: 8,
            separation: 2.0,
            copy_noise: 0.5,
            labeled_fraction: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_features(&self) -> usize {
        self.n_informative + self.n_copies + self.n_noise
    }

    /// Column ranges of the informative, copy and noise blocks.
    pub fn blocks(&self) -> [core::ops::Range<usize>; 3] {
        let a = self.n_informative;
        let b = a + self.n_copies;
        [0..a, a..b, b..b + self.n_noise]
    }
}

/// Unscaled binary dataset; columns are `[informative | copies | noise]`,
/// labels balanced in expectation.
pub fn redundant_clusters(spec: &SyntheticSpec, seed: u64) -> TableDataset {
    let mut rng = stream_rng(seed, 0);
    let m = spec.n_features();
    let mut x = Matrix::zeros(spec.n_samples, m);
    let mut y = Vec::with_capacity(spec.n_samples);
    let half = spec.separation / 2.0;
    for i in 0..spec.n_samples {
        let label = usize::from(rng.gen_bool(0.5));
        let centre = if label == 1 { half } else { -half };
        let row = x.row_mut(i);
        for j in 0..spec.n_informative {
            let e: f64 = StandardNormal.sample(&mut rng);
            row[j] = centre + e;
        }
        for c in 0..spec.n_copies {
            let e: f64 = StandardNormal.sample(&mut rng);
            row[spec.n_informative + c] = row[c % spec.n_informative.max(1)] + spec.copy_noise * e;
        }
        for k in 0..spec.n_noise {
            row[spec.n_informative + spec.n_copies + k] = StandardNormal.sample(&mut rng);
        }
        let keep = spec.labeled_fraction >= 1.0 || rng.gen_bool(spec.labeled_fraction.max(0.0));
        y.push(keep.then_some(label));
    }
    let mut ds = TableDataset::new(x, Some(y), 2);
    let [inf, cp, _] = spec.blocks();
    ds.feature_names = (0..m)
        .map(|j| {
            if inf.contains(&j) {
                format!("informative_{j}")
            } else if cp.contains(&j) {
                format!("copy_{}", j - cp.start)
            } else {
                format!("noise_{}", j - cp.end)
            }
        })
        .collect();
    ds
}

/// Seeded stratified split, then min-max scaling fit on the training part.
pub fn scaled_splits(ds: &TableDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits, DataError> {
    let mut s = split(ds, fractions, seed)?;
    s.train.x = minmax_rescale(&s.train.x, &mut [&mut s.val.x, &mut s.test.x]);
    Ok(s)
}
