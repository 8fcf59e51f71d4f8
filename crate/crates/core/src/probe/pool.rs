use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    LastToken,
    MaxPool,
    UnitNormMean,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::LastToken => "last_token",
            Pooling::MaxPool => "max_pool",
            Pooling::UnitNormMean => "unit_norm_mean",
        }
    }
}

/// Collapses a token-major matrix to one feature vector.
pub fn pool(tokens: ArrayView2<f64>, mode: Pooling) -> Result<Array1<f64>> {
    let n = tokens.nrows();
    if n == 0 {
        return Err(Error::Empty("token matrix"));
    }
    Ok(match mode {
        Pooling::LastToken => tokens.row(n - 1).to_owned(),
        Pooling::MaxPool => tokens.fold_axis(Axis(0), f64::NEG_INFINITY, |&acc, &v| acc.max(v)),
        Pooling::UnitNormMean => {
            let mut acc = Array1::zeros(tokens.ncols());
            for row in tokens.rows() {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    acc.scaled_add(1.0 / norm, &row);
                }
            }
            acc / n as f64
        }
    })
}
