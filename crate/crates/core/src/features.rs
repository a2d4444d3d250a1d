use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg;

/// Row-per-point feature matrix with unit rows.
///
/// All-zero rows mark unobserved points and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    values: Array2<f64>,
    valid: Vec<bool>,
}

impl FeatureField {
    /// Normalises rows on ingest; rows with zero norm become invalid.
    pub fn new(mut values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("feature field contains non-finite values".into()));
        }
        let valid = linalg::normalize_rows(&mut values);
        Ok(Self { values, valid })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Rows at `indices`, validity carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        let values = self.values.select(ndarray::Axis(0), indices);
        let valid = indices.iter().map(|&i| self.valid[i]).collect();
        Self { values, valid }
    }

    pub fn unit_norm_deviation(&self) -> f64 {
        linalg::unit_norm_deviation(&self.values, &self.valid)
    }
}
