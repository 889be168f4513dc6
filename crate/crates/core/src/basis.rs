//! Time-index features for the performance forecasters.
//!
//! Every family ends with a constant `1` feature so the regression can
//! represent "no trend". Inputs other than the identity basis are normalized
//! by the configured horizon (the current episode count plus the forecast
//! horizon), which keeps them in `(0, 1]` for every index the forecaster
//! touches.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFamily {
    /// `[cos(π·1·x̄), …, cos(π·(d−1)·x̄), 1]`.
    FourierCosine,
    /// `[x̄^(d−1), …, x̄, 1]`.
    Polynomial,
    /// `[index, 1]`, unnormalized.
    Identity,
    /// `[1]`.
    Constant,
}

impl BasisFamily {
    pub const ALL: [BasisFamily; 4] = [
        BasisFamily::FourierCosine,
        BasisFamily::Polynomial,
        BasisFamily::Identity,
        BasisFamily::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BasisFamily::FourierCosine => "fourier",
            BasisFamily::Polynomial => "polynomial",
            BasisFamily::Identity => "identity",
            BasisFamily::Constant => "constant",
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fourier" | "fourier_cosine" | "fouriercosine" | "cosine" => Ok(Self::FourierCosine),
            "polynomial" | "poly" => Ok(Self::Polynomial),
            "identity" | "linear" => Ok(Self::Identity),
            "constant" | "const" => Ok(Self::Constant),
            other => Err(Error::Config(format!("unknown basis family `{other}`"))),
        }
    }
}

/// A basis family, its dimension and the divisor used to normalize indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBasisConfig {
    family: BasisFamily,
    dimension: usize,
    normalization_horizon: usize,
}

impl TimeBasisConfig {
    pub fn new(
        family: BasisFamily,
        dimension: usize,
        normalization_horizon: usize,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Domain("basis dimension must be at least 1".into()));
        }
        let forced = match family {
            BasisFamily::Constant => Some(1),
            BasisFamily::Identity => Some(2),
            _ => None,
        };
        if let Some(required) = forced {
            if dimension != required {
                return Err(Error::Domain(format!(
                    "{family} basis has dimension {required}, got {dimension}"
                )));
            }
        }
        if normalization_horizon == 0 {
            return Err(Error::Domain(
                "normalization horizon must be at least 1".into(),
            ));
        }
        Ok(Self {
            family,
            dimension,
            normalization_horizon,
        })
    }

    /// Shorthand for the families with a fixed dimension.
    pub fn constant() -> Self {
        Self::new(BasisFamily::Constant, 1, 1).expect("valid")
    }

    pub fn identity() -> Self {
        Self::new(BasisFamily::Identity, 2, 1).expect("valid")
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn normalization_horizon(&self) -> usize {
        self.normalization_horizon
    }

    /// The same family and dimension normalized by a different horizon.
    pub fn with_horizon(&self, normalization_horizon: usize) -> Result<Self> {
        Self::new(self.family, self.dimension, normalization_horizon)
    }

    /// Features of a (possibly fractional) normalized input `x̄`.
    ///
    /// For the identity family `x̄` is used as the raw index.
    pub fn features_normalized(&self, x: f64, out: &mut [f64]) {
        let d = self.dimension;
        debug_assert_eq!(out.len(), d);
        match self.family {
            BasisFamily::FourierCosine => {
                for (n, slot) in out[..d - 1].iter_mut().enumerate() {
                    *slot = (PI * (n + 1) as f64 * x).cos();
                }
            }
            BasisFamily::Polynomial => {
                for (j, slot) in out[..d - 1].iter_mut().enumerate() {
                    *slot = x.powi((d - 1 - j) as i32);
                }
            }
            BasisFamily::Identity => out[0] = x,
            BasisFamily::Constant => {}
        }
        out[d - 1] = 1.0;
    }

    fn normalize(&self, index: usize) -> f64 {
        match self.family {
            BasisFamily::Identity => index as f64,
            _ => index as f64 / self.normalization_horizon as f64,
        }
    }

    /// Feature row `φ(index)` for a 1-based episode index.
    pub fn encode_time(&self, index: usize) -> Result<Vec<f64>> {
        if index < 1 {
            return Err(Error::Domain("episode indices start at 1".into()));
        }
        let mut out = vec![0.0; self.dimension];
        self.features_normalized(self.normalize(index), &mut out);
        Ok(out)
    }

    /// Basis matrix with one row per (strictly increasing) episode index.
    pub fn basis_matrix(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::Domain(
                "basis matrix needs at least one index".into(),
            ));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "episode indices must be strictly increasing".into(),
            ));
        }
        if indices[0] < 1 {
            return Err(Error::Domain("episode indices start at 1".into()));
        }
        let d = self.dimension;
        let mut data = vec![0.0; indices.len() * d];
        for (row, &index) in data.chunks_exact_mut(d).zip(indices) {
            self.features_normalized(self.normalize(index), row);
        }
        Matrix::new(indices.len(), d, data)
    }

    /// Basis matrix over the contiguous indices `1..=k`.
    pub fn history_matrix(&self, k: usize) -> Result<Matrix> {
        self.basis_matrix(&(1..=k).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Cholesky;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn fourier_at_origin_is_all_ones() {
        let cfg = TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 10).unwrap();
        let mut out = [0.0; 3];
        cfg.features_normalized(0.0, &mut out);
        assert!(close(&out, &[1.0, 1.0, 1.0]));
    }

    #[test]
    fn fourier_at_one_is_alternating() {
        // cos(π·n) at x̄ = 1.
        let cfg = TimeBasisConfig::new(BasisFamily::FourierCosine, 4, 5).unwrap();
        assert!(close(&cfg.encode_time(5).unwrap(), &[-1.0, 1.0, -1.0, 1.0]));
    }

    #[test]
    fn fourier_d2_half_horizon() {
        let cfg = TimeBasisConfig::new(BasisFamily::FourierCosine, 2, 4).unwrap();
        assert!(close(&cfg.encode_time(2).unwrap(), &[0.0, 1.0]));
    }

    #[test]
    fn identity_is_unnormalized() {
        assert_eq!(
            TimeBasisConfig::identity().encode_time(4).unwrap(),
            vec![4.0, 1.0]
        );
    }

    #[test]
    fn polynomial_descending_powers() {
        let cfg = TimeBasisConfig::new(BasisFamily::Polynomial, 3, 4).unwrap();
        assert!(close(&cfg.encode_time(2).unwrap(), &[0.25, 0.5, 1.0]));
    }

    #[test]
    fn index_zero_is_rejected() {
        assert!(matches!(
            TimeBasisConfig::constant().encode_time(0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn fixed_dimensions_are_enforced() {
        assert!(TimeBasisConfig::new(BasisFamily::Constant, 2, 1).is_err());
        assert!(TimeBasisConfig::new(BasisFamily::Identity, 3, 1).is_err());
        assert!(TimeBasisConfig::new(BasisFamily::Polynomial, 0, 1).is_err());
        assert!(TimeBasisConfig::new(BasisFamily::Polynomial, 3, 0).is_err());
    }

    #[test]
    fn matrices_by_row() {
        let id = TimeBasisConfig::identity()
            .basis_matrix(&[1, 2, 3])
            .unwrap();
        assert_eq!(id.as_slice(), &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let c = TimeBasisConfig::constant().basis_matrix(&[1, 2]).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0]);
        let f = TimeBasisConfig::new(BasisFamily::FourierCosine, 2, 4)
            .unwrap()
            .basis_matrix(&[2, 4])
            .unwrap();
        assert!(close(f.as_slice(), &[0.0, 1.0, -1.0, 1.0]));
    }

    #[test]
    fn non_increasing_indices_are_rejected() {
        let cfg = TimeBasisConfig::identity();
        assert!(cfg.basis_matrix(&[1, 1]).is_err());
        assert!(cfg.basis_matrix(&[2, 1]).is_err());
        assert!(cfg.basis_matrix(&[]).is_err());
    }

    proptest! {
        #[test]
        fn rows_end_in_one_and_are_bounded(
            family in prop::sample::select(BasisFamily::ALL.to_vec()),
            d in 3usize..8,
            k in 1usize..200,
            delta in 1usize..6,
        ) {
            let d = match family {
                BasisFamily::Constant => 1,
                BasisFamily::Identity => 2,
                _ => d,
            };
            let cfg = TimeBasisConfig::new(family, d, k + delta).unwrap();
            let phi = cfg.history_matrix(k).unwrap();
            for i in 0..k {
                let row = phi.row(i);
                prop_assert_eq!(row[d - 1], 1.0);
                for v in row {
                    prop_assert!(v.is_finite() && v.abs() <= (i + 1).max(1) as f64);
                }
            }
        }

        #[test]
        fn full_column_rank_with_enough_rows(
            family in prop::sample::select(vec![BasisFamily::FourierCosine, BasisFamily::Polynomial, BasisFamily::Identity]),
            d in 3usize..8,
            extra in 0usize..40,
            delta in 1usize..6,
        ) {
            let d = if family == BasisFamily::Identity { 2 } else { d };
            let k = d + extra;
            let cfg = TimeBasisConfig::new(family, d, k + delta).unwrap();
            let gram = cfg.history_matrix(k).unwrap().weighted_gram(None);
            prop_assert!(Cholesky::factor(&gram).is_some());
        }
    }
}
