use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Column partition of a feature matrix between the two parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalSplit {
    /// Original column indices held by party A, in order.
    pub a_columns: Vec<usize>,
    /// Original column indices held by party B, in order.
    pub b_columns: Vec<usize>,
}

impl VerticalSplit {
    /// Party A takes the first `ceil(fraction * F)` columns.
    pub fn new(feature_count: usize, fraction: f64) -> Result<Self> {
        if feature_count < 2 {
            return Err(Error::Split(format!("need at least 2 features, got {feature_count}")));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Split(format!("split fraction must be in (0, 1), got {fraction}")));
        }
        let a = (fraction * feature_count as f64).ceil() as usize;
        if a >= feature_count {
            return Err(Error::Split(format!(
                "fraction {fraction} leaves no columns for party B out of {feature_count}"
            )));
        }
        Ok(Self {
            a_columns: (0..a).collect(),
            b_columns: (a..feature_count).collect(),
        })
    }

    pub fn party_a(&self, features: &Matrix) -> Matrix {
        features.select_cols(&self.a_columns)
    }

    pub fn party_b(&self, features: &Matrix) -> Matrix {
        features.select_cols(&self.b_columns)
    }

    /// Inverse of the split: rebuilds the original column order.
    pub fn reassemble(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows() != b.rows() {
            return Err(Error::shape("reassemble", a.rows(), b.rows()));
        }
        let cols = self.a_columns.len() + self.b_columns.len();
        let mut out = Matrix::zeros(a.rows(), cols);
        for r in 0..a.rows() {
            for (j, &c) in self.a_columns.iter().enumerate() {
                out.set(r, c, a.get(r, j));
            }
            for (j, &c) in self.b_columns.iter().enumerate() {
                out.set(r, c, b.get(r, j));
            }
        }
        Ok(out)
    }
}

/// Splits `features` column-wise; see [`VerticalSplit::new`].
pub fn vertical_split(features: &Matrix, fraction: f64) -> Result<(VerticalSplit, Matrix, Matrix)> {
    let split = VerticalSplit::new(features.cols(), fraction)?;
    let a = split.party_a(features);
    let b = split.party_b(features);
    Ok((split, a, b))
}
