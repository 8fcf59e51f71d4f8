use ndarray::{Array1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `|μ₊ − μ₋|` per feature column.
pub fn mean_diff_scores(features: ArrayView2<f64>, labels: &[u8]) -> Result<Array1<f64>> {
    if features.nrows() != labels.len() {
        return Err(Error::dims("labels", features.nrows(), labels.len()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    let mean = |idx: &[usize]| features.select(Axis(0), idx).mean_axis(Axis(0)).expect("nonempty");
    Ok((mean(&pos) - mean(&neg)).mapv(f64::abs))
}

/// Indices of the `q` largest mean-difference scores, best first, ties to the
/// lower index. `q` is clipped to the feature dimension.
pub fn select_mean_diff(features: ArrayView2<f64>, labels: &[u8], q: usize) -> Result<Vec<usize>> {
    let scores = mean_diff_scores(features, labels)?;
    let scores = scores.as_slice().expect("contiguous");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let kept = crate::sae::top_indices(scores, &mut idx, q);
    idx.truncate(kept);
    Ok(idx)
}
