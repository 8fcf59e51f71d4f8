use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::rng;

pub const DEFAULT_PAIR_CAP: usize = 100_000;
const EIGEN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatConfig {
    /// Use only positive−negative pairs.
    pub supervised: bool,
    pub pair_cap: usize,
    /// Mean-centre the difference rows before extracting the component.
    pub centered: bool,
    pub seed: u64,
}

impl Default for LatConfig {
    fn default() -> Self {
        Self {
            supervised: false,
            pair_cap: DEFAULT_PAIR_CAP,
            centered: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatDirection {
    pub direction: Array1<f64>,
    pub sign: f64,
    pub supervised: bool,
    pub n_pairs: usize,
    /// Set when the pair cap forced a random subsample.
    pub subsampled: bool,
}

impl LatDirection {
    pub fn validate(&self) -> Result<()> {
        let norm = self.direction.dot(&self.direction).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("LAT direction has norm {norm}")));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::Invariant("LAT sign must be ±1".into()));
        }
        Ok(())
    }
}

/// `sign · (direction · x)`
pub fn lat_score(lat: &LatDirection, x: ArrayView1<f64>) -> Result<f64> {
    if x.len() != lat.direction.len() {
        return Err(Error::dims("feature length", lat.direction.len(), x.len()));
    }
    Ok(lat.sign * lat.direction.dot(&x))
}

pub fn lat_scores(lat: &LatDirection, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.ncols() != lat.direction.len() {
        return Err(Error::dims("feature length", lat.direction.len(), x.ncols()));
    }
    Ok(x.dot(&lat.direction).iter().map(|v| lat.sign * v).collect())
}

fn outer_sum(x: ArrayView2<f64>, rows: &[usize]) -> (Array2<f64>, Array1<f64>) {
    let sub = x.select(Axis(0), rows);
    (sub.t().dot(&sub), sub.sum_axis(Axis(0)))
}

/// Second-moment matrix `DᵀD` of the difference rows, their count and mean.
fn difference_moments(
    x: ArrayView2<f64>,
    labels: Option<&[u8]>,
    config: &LatConfig,
) -> Result<(Array2<f64>, usize, Array1<f64>, bool)> {
    let n = x.nrows();
    let pairs: Vec<(usize, usize)>;
    let total: usize;
    if config.supervised {
        let labels = labels.ok_or_else(|| Error::Invalid("supervised LAT needs labels".into()))?;
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::SingleClass);
        }
        total = pos.len() * neg.len();
        if total <= config.pair_cap {
            // Σ_{p,q} (x_p − x_q)(x_p − x_q)ᵀ without materializing the pairs
            let (sp, mp) = outer_sum(x, &pos);
            let (sn, mn) = outer_sum(x, &neg);
            let mp2 = mp.view().insert_axis(Axis(1));
            let mn2 = mn.view().insert_axis(Axis(1));
            let cross = mp2.dot(&mn2.t());
            let a = sp * neg.len() as f64 + sn * pos.len() as f64 - &cross - cross.t();
            let mean = &mp / pos.len() as f64 - &mn / neg.len() as f64;
            return Ok((a, total, mean, false));
        }
        pairs = sample_pairs(total, config, |k| (pos[k / neg.len()], neg[k % neg.len()]));
    } else {
        if n < 2 {
            return Err(Error::Empty("LAT needs at least two examples"));
        }
        total = n * (n - 1) / 2;
        if total <= config.pair_cap {
            let all: Vec<usize> = (0..n).collect();
            let (s, m) = outer_sum(x, &all);
            let m2 = m.view().insert_axis(Axis(1));
            let a = s * n as f64 - m2.dot(&m2.t());
            // Σ_{i<j} (x_i − x_j) = Σ_i (n − 1 − 2i) x_i
            let w: Array1<f64> = (0..n).map(|i| n as f64 - 1.0 - 2.0 * i as f64).collect();
            let mean = x.t().dot(&w) / total as f64;
            return Ok((a, total, mean, false));
        }
        pairs = sample_pairs(total, config, |k| unrank_pair(k, n));
    }
    let d = x.ncols();
    let mut diffs = Array2::zeros((pairs.len(), d));
    for (r, &(i, j)) in pairs.iter().enumerate() {
        diffs.row_mut(r).assign(&(&x.row(i) - &x.row(j)));
    }
    log::warn!("LAT pair cap hit: {} of {total} pairs sampled", pairs.len());
    let mean = diffs.mean_axis(Axis(0)).expect("nonempty");
    Ok((diffs.t().dot(&diffs), pairs.len(), mean, true))
}

fn sample_pairs(total: usize, config: &LatConfig, f: impl Fn(usize) -> (usize, usize)) -> Vec<(usize, usize)> {
    let mut rng = rng::stream(config.seed, "lat/pairs");
    let mut picked = sample(&mut rng, total, config.pair_cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(f).collect()
}

/// Maps `k ∈ [0, n(n−1)/2)` to the k-th pair `(i, j)`, `i < j`, in row-major order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

/// Leading eigenvector of a symmetric PSD matrix. Repeated squaring gives a
/// warm start, then plain power iteration polishes to the residual tolerance.
pub fn leading_eigenvector(a: &Array2<f64>) -> Result<(Array1<f64>, f64)> {
    let d = a.nrows();
    let trace: f64 = a.diag().sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::RankZero);
    }
    let mut p = a / trace;
    for _ in 0..8 {
        p = p.dot(&p);
        let t: f64 = p.diag().sum();
        if !(t > 0.0) {
            break;
        }
        p /= t;
    }
    // start from the column of the squared matrix with the largest norm
    let best = (0..d)
        .max_by(|&i, &j| {
            let ni = p.column(i).dot(&p.column(i));
            let nj = p.column(j).dot(&p.column(j));
            ni.total_cmp(&nj).then(j.cmp(&i))
        })
        .expect("nonempty");
    let mut v = p.column(best).to_owned();
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0) {
        v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    } else {
        v /= norm;
    }
    let max_iter = 100_000;
    for _ in 0..max_iter {
        let av = a.dot(&v);
        let lambda = v.dot(&av);
        if !(lambda > 0.0) {
            return Err(Error::RankZero);
        }
        let resid = (&av - &(lambda * &v)).dot(&(&av - &(lambda * &v))).sqrt() / lambda;
        if resid <= EIGEN_TOLERANCE {
            return Ok((v, lambda));
        }
        let norm = av.dot(&av).sqrt();
        v = av / norm;
    }
    let av = a.dot(&v);
    let lambda = v.dot(&av);
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: (&av - &(lambda * &v)).dot(&(&av - &(lambda * &v))).sqrt() / lambda,
    })
}

/// First principal component of example differences. Labels, when given,
/// choose the sign that maximizes train AUROC; supervised mode also needs them
/// to form positive−negative pairs.
pub fn lat_fit(x: ArrayView2<f64>, labels: Option<&[u8]>, config: &LatConfig) -> Result<LatDirection> {
    if let Some(l) = labels {
        if l.len() != x.nrows() {
            return Err(Error::dims("labels", x.nrows(), l.len()));
        }
    }
    let all_identical = x.rows().into_iter().all(|r| r == x.row(0));
    if all_identical {
        return Err(Error::RankZero);
    }
    let (mut a, n_pairs, mean, subsampled) = difference_moments(x, labels, config)?;
    let trace0 = a.diag().sum();
    if config.centered {
        let m2 = mean.view().insert_axis(Axis(1));
        a = a - m2.dot(&m2.t()) * n_pairs as f64;
    }
    if !(a.diag().sum() > 1e-10 * trace0) {
        return Err(Error::RankZero);
    }
    let (mut direction, _) = leading_eigenvector(&a)?;
    // fix the arbitrary eigenvector sign: largest-magnitude entry positive
    let pivot = direction
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("nonempty");
    if direction[pivot] < 0.0 {
        direction.mapv_inplace(|v| -v);
    }
    let mut sign = 1.0;
    if let Some(l) = labels {
        let proj: Vec<f64> = x.dot(&direction).to_vec();
        if l.contains(&1) && l.iter().any(|&v| v != 1) && auroc(&proj, l)? < 0.5 {
            sign = -1.0;
        }
    }
    Ok(LatDirection {
        direction,
        sign,
        supervised: config.supervised,
        n_pairs,
        subsampled,
    })
}
