//! TopK sparse autoencoders: training, post-hoc JumpReLU conversion, and
//! feature extraction for probing.

mod calibrate;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate_jumprelu, calibrate_on_tokens, mean_active_count, CALIBRATION_TOLERANCE};
pub use train::{
    compute_supports, gather_tokens, gradients, loss_given_supports, resume_on_tokens, resume_training,
    train_on_tokens, train_sae, Adam, LatentStats, SaeGrads, SaeTrainConfig, Supports, TrainOutcome, REFERENCE_K,
    REFERENCE_N_LATENTS,
};

use crate::actstore::{container, ActivationShard};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEM";

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// `n_latents × d_model`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d_model × n_latents`; columns are unit-norm after every training step.
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
    pub k: usize,
    /// Shared JumpReLU threshold; present once calibrated.
    pub theta: Option<f64>,
    pub config: SaeTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    Latent,
    PreActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaeActivation {
    TopK,
    #[default]
    JumpRelu,
}

/// Indices of the `k` largest entries of `values` among `candidates`,
/// ordered by value descending with ties going to the lower index.
pub(crate) fn top_indices(values: &[f64], candidates: &mut [usize], k: usize) -> usize {
    let k = k.min(candidates.len());
    if k == 0 {
        return 0;
    }
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
    candidates[..k].sort_unstable_by(cmp);
    k
}

/// Keeps the `k` largest entries (lowest index wins ties) and zeroes the rest.
pub fn topk_activate(z_pre: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    if k > z_pre.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds vector length {}", z_pre.len())));
    }
    let values = z_pre.to_vec();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let kept = top_indices(&values, &mut idx, k);
    let mut out = Array1::zeros(values.len());
    for &i in &idx[..kept] {
        out[i] = values[i];
    }
    Ok(out)
}

/// `z · H(z − θ)` with the step taken as 0 at `z = θ`.
pub fn jumprelu_activate(z_pre: ArrayView1<f64>, theta: f64) -> Array1<f64> {
    z_pre.mapv(|z| if z > theta { z } else { 0.0 })
}

impl SaeModel {
    pub fn n_latents(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.w_enc.dim();
        if n == 0 || d == 0 {
            return Err(Error::Invariant("SAE dimensions must be positive".into()));
        }
        if self.b_enc.len() != n || self.w_dec.dim() != (d, n) || self.b_pre.len() != d {
            return Err(Error::Invariant("SAE parameter shapes disagree".into()));
        }
        if self.k > n {
            return Err(Error::Invariant(format!("k = {} exceeds n_latents = {n}", self.k)));
        }
        if matches!(self.theta, Some(t) if t.is_nan() || t < 0.0) {
            return Err(Error::Invariant("theta must be nonnegative".into()));
        }
        Ok(())
    }

    /// `W_enc (x − b_pre) + b_enc`
    pub fn encode_pre(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_model() {
            return Err(Error::dims("activation length", self.d_model(), x.len()));
        }
        Ok(self.w_enc.dot(&(&x - &self.b_pre)) + &self.b_enc)
    }

    /// Row-wise [`encode_pre`](Self::encode_pre) for a token-major batch.
    pub fn encode_pre_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_model() {
            return Err(Error::dims("activation width", self.d_model(), x.ncols()));
        }
        let centered = &x - &self.b_pre;
        Ok(centered.dot(&self.w_enc.t()) + &self.b_enc)
    }

    /// `W_dec z + b_pre`
    pub fn decode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.n_latents() {
            return Err(Error::dims("latent length", self.n_latents(), z.len()));
        }
        Ok(self.w_dec.dot(&z) + &self.b_pre)
    }

    /// Per-token features for one token-major matrix.
    pub fn encode_tokens(
        &self,
        tokens: ArrayView2<f64>,
        variant: FeatureVariant,
        inference: SaeActivation,
    ) -> Result<Array2<f64>> {
        let mut z = self.encode_pre_batch(tokens)?;
        match (variant, inference) {
            (FeatureVariant::PreActivation, _) => {}
            (FeatureVariant::Latent, SaeActivation::JumpRelu) => {
                let theta = self.theta.ok_or(Error::Uncalibrated)?;
                z.mapv_inplace(|v| if v > theta { v } else { 0.0 });
            }
            (FeatureVariant::Latent, SaeActivation::TopK) => {
                for mut row in z.rows_mut() {
                    let kept = topk_activate(row.view(), self.k)?;
                    row.assign(&kept);
                }
            }
        }
        Ok(z)
    }

    /// Mean squared reconstruction error per token under TopK encoding.
    pub fn reconstruction_mse(&self, tokens: ArrayView2<f64>) -> Result<f64> {
        if tokens.nrows() == 0 {
            return Err(Error::Empty("reconstruction tokens"));
        }
        let z = self.encode_tokens(tokens, FeatureVariant::Latent, SaeActivation::TopK)?;
        let recon = z.dot(&self.w_dec.t()) + &self.b_pre;
        let err = &recon - &tokens;
        Ok(err.iter().map(|v| v * v).sum::<f64>() / tokens.nrows() as f64)
    }

    /// Mean of all token rows in a shard; used when the model centres inputs per shard.
    pub fn shard_offset(&self, shard: &ActivationShard) -> Option<Array1<f64>> {
        if !self.config.center_inputs || shard.total_tokens() == 0 {
            return None;
        }
        let mut sum = Array1::<f64>::zeros(shard.d_model);
        for m in &shard.matrices {
            sum += &m.mapv(f64::from).sum_axis(Axis(0));
        }
        Some(sum / shard.total_tokens() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = CheckpointHeader {
            n_latents: self.n_latents(),
            d_model: self.d_model(),
            k: self.k,
            theta: self.theta,
            config: self.config.clone(),
        };
        let payload: Vec<f32> = self
            .w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_pre.iter())
            .map(|&v| v as f32)
            .collect();
        container::write(path, CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values) = container::read::<CheckpointHeader>(path, CHECKPOINT_MAGIC, |h| {
            Ok(2 * h.n_latents * h.d_model + h.n_latents + h.d_model)
        })?;
        let (n, d) = (header.n_latents, header.d_model);
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let mut offset = 0;
        let mut take = |len: usize| {
            let s = values[offset..offset + len].to_vec();
            offset += len;
            s
        };
        let w_enc = Array2::from_shape_vec((n, d), take(n * d)).expect("length checked");
        let b_enc = Array1::from(take(n));
        let w_dec = Array2::from_shape_vec((d, n), take(d * n)).expect("length checked");
        let b_pre = Array1::from(take(d));
        let model = Self {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
            k: header.k,
            theta: header.theta,
            config: header.config,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    n_latents: usize,
    d_model: usize,
    k: usize,
    theta: Option<f64>,
    config: SaeTrainConfig,
}

/// Maps every token of every example in `shard` to SAE features.
pub fn encode_features(
    model: &SaeModel,
    shard: &ActivationShard,
    variant: FeatureVariant,
    inference: SaeActivation,
) -> Result<Vec<Array2<f64>>> {
    if shard.d_model != model.d_model() {
        return Err(Error::dims("shard d_model", model.d_model(), shard.d_model));
    }
    if variant == FeatureVariant::Latent && inference == SaeActivation::JumpRelu && model.theta.is_none() {
        return Err(Error::Uncalibrated);
    }
    let offset = model.shard_offset(shard);
    shard
        .matrices
        .iter()
        .map(|m| {
            let mut x = m.mapv(f64::from);
            if let Some(o) = &offset {
                x -= o;
            }
            model.encode_tokens(x.view(), variant, inference)
        })
        .collect()
}
