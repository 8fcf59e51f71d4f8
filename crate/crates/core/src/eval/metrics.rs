use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney statistic with midranks for
/// tied scores. `auroc(s) + auroc(-s) == 1` holds exactly.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let pos_in_block = order[i..j].iter().filter(|&&o| labels[o] == 1).count() as u128;
        rank_sum2 += pos_in_block * (i + 1 + j) as u128;
        i = j;
    }
    let np = n_pos as u128;
    let u2 = rank_sum2 - np * (np + 1);
    let n2 = 2 * np * n_neg as u128;
    let (u, n) = (u2 as f64 / 2.0, n2 as f64 / 2.0);
    Ok(if u2 * 2 >= n2 { u / n } else { 1.0 - (n - u) / n })
}
