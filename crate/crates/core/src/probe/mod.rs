//! Pooling, feature selection, logistic probes, LAT scans and stacking.

mod lat;
mod logistic;
mod pool;
mod select;
mod stacked;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lat::{lat_fit, lat_score, lat_scores, leading_eigenvector, LatConfig, LatDirection, DEFAULT_PAIR_CAP};
pub use logistic::{fit_logistic, LinearFit, LogisticObjective, Penalty, ProbeConfig};
pub use pool::{pool, Pooling};
pub use select::{mean_diff_scores, select_mean_diff};
pub use stacked::{train_stacked, LogitsSource, StackedModel};

use crate::actstore::{container, ActivationShard, PromptMode};
use crate::error::{Error, Result};
use crate::sae::{encode_features, FeatureVariant, SaeActivation, SaeModel};

pub const PROBE_MAGIC: &[u8; 4] = b"PRBM";
pub const LAT_MAGIC: &[u8; 4] = b"LATD";
pub const STACKED_MAGIC: &[u8; 4] = b"STCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Raw,
    SaeLatent,
    SaePreActivation,
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Raw => "raw",
            Transform::SaeLatent => "sae_latent",
            Transform::SaePreActivation => "sae_pre_activation",
        }
    }
}

/// Per-feature z-scoring parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Everything needed to turn one shard entry into a probe input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePipeline {
    pub layer: u32,
    pub prompt_mode: PromptMode,
    pub transform: Transform,
    pub pooling: Pooling,
    #[serde(default)]
    pub top_q: Option<usize>,
    #[serde(default)]
    pub selected_indices: Option<Vec<usize>>,
    #[serde(default)]
    pub sae_ref: Option<String>,
    #[serde(default)]
    pub sae_inference: SaeActivation,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub scaler: Option<Scaler>,
}

impl FeaturePipeline {
    pub fn raw(layer: u32, prompt_mode: PromptMode, pooling: Pooling) -> Self {
        Self {
            layer,
            prompt_mode,
            transform: Transform::Raw,
            pooling,
            top_q: None,
            selected_indices: None,
            sae_ref: None,
            sae_inference: SaeActivation::JumpRelu,
            standardize: false,
            scaler: None,
        }
    }

    pub fn sae(
        layer: u32,
        prompt_mode: PromptMode,
        transform: Transform,
        pooling: Pooling,
        top_q: Option<usize>,
        sae_ref: impl Into<String>,
    ) -> Self {
        Self {
            transform,
            top_q,
            sae_ref: Some(sae_ref.into()),
            ..Self::raw(layer, prompt_mode, pooling)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transform != Transform::Raw && self.sae_ref.is_none() {
            return Err(Error::Invariant("SAE transforms need an sae_ref".into()));
        }
        if self.top_q == Some(0) {
            return Err(Error::Invariant("top_q must be positive".into()));
        }
        Ok(())
    }

    /// Transformed and pooled features, one row per shard example, before selection.
    pub fn pooled_features(&self, shard: &ActivationShard, sae: Option<&SaeModel>) -> Result<Array2<f64>> {
        self.validate()?;
        if shard.layer != self.layer || shard.prompt_mode != self.prompt_mode {
            return Err(Error::Invalid(format!(
                "pipeline expects layer {} / {} but shard is layer {} / {}",
                self.layer, self.prompt_mode, shard.layer, shard.prompt_mode
            )));
        }
        let rows: Vec<Array1<f64>> = match self.transform {
            Transform::Raw => shard
                .matrices
                .par_iter()
                .map(|m| pool(m.mapv(f64::from).view(), self.pooling))
                .collect::<Result<_>>()?,
            Transform::SaeLatent | Transform::SaePreActivation => {
                let sae = sae.ok_or_else(|| Error::Invalid("SAE transform requested without a model".into()))?;
                let variant = if self.transform == Transform::SaeLatent {
                    FeatureVariant::Latent
                } else {
                    FeatureVariant::PreActivation
                };
                // encode per example so peak memory stays at one token matrix
                (0..shard.len())
                    .into_par_iter()
                    .map(|i| {
                        let one = single_example(shard, i);
                        let f = encode_features(sae, &one, variant, self.sae_inference)?;
                        pool(f[0].view(), self.pooling)
                    })
                    .collect::<Result<_>>()?
            }
        };
        stack_rows(rows)
    }

    /// Learns the feature subset and optional scaler from training features.
    pub fn fit(&mut self, pooled: ArrayView2<f64>, labels: &[u8]) -> Result<()> {
        self.selected_indices = match self.top_q {
            Some(q) => Some(select_mean_diff(pooled, labels, q)?),
            None => None,
        };
        self.scaler = None;
        if self.standardize {
            let x = self.select(pooled);
            let mean = x.mean_axis(Axis(0)).ok_or(Error::Empty("training features"))?;
            let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
            self.scaler = Some(Scaler {
                mean: mean.to_vec(),
                scale: scale.to_vec(),
            });
        }
        Ok(())
    }

    fn select(&self, pooled: ArrayView2<f64>) -> Array2<f64> {
        match &self.selected_indices {
            Some(idx) => pooled.select(Axis(1), idx),
            None => pooled.to_owned(),
        }
    }

    /// Applies the fitted selection and scaling.
    pub fn apply(&self, pooled: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.top_q.is_some() && self.selected_indices.is_none() {
            return Err(Error::Invalid("pipeline selection has not been fitted".into()));
        }
        if let Some(idx) = &self.selected_indices {
            if let Some(&bad) = idx.iter().find(|&&i| i >= pooled.ncols()) {
                return Err(Error::dims("selected feature index bound", pooled.ncols(), bad + 1));
            }
        }
        let mut x = self.select(pooled);
        if let Some(s) = &self.scaler {
            if s.mean.len() != x.ncols() {
                return Err(Error::dims("scaler width", s.mean.len(), x.ncols()));
            }
            for mut row in x.rows_mut() {
                for ((v, m), sc) in row.iter_mut().zip(&s.mean).zip(&s.scale) {
                    *v = (*v - m) / sc;
                }
            }
        }
        Ok(x)
    }
}

fn single_example(shard: &ActivationShard, i: usize) -> ActivationShard {
    let mut one = ActivationShard::new(
        shard.dataset_name.clone(),
        shard.layer,
        shard.prompt_mode,
        shard.d_model,
    );
    one.push(shard.example_ids[i].clone(), shard.matrices[i].clone());
    one
}

fn stack_rows(rows: Vec<Array1<f64>>) -> Result<Array2<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub pipeline: FeaturePipeline,
    pub config: ProbeConfig,
}

impl ProbeModel {
    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invariant("non-finite probe parameters".into()));
        }
        if let Some(idx) = &self.pipeline.selected_indices {
            if idx.len() != self.weights.len() {
                return Err(Error::Invariant(format!(
                    "{} weights for {} selected features",
                    self.weights.len(),
                    idx.len()
                )));
            }
        }
        Ok(())
    }

    /// Logits for pooled (pre-selection) features.
    pub fn score_pooled(&self, pooled: ArrayView2<f64>) -> Result<Vec<f64>> {
        let x = self.pipeline.apply(pooled)?;
        probe_logits(self, x.view())
    }
}

/// Fits a probe on features that already went through the pipeline.
pub fn train_probe(
    features: ArrayView2<f64>,
    labels: &[u8],
    pipeline: FeaturePipeline,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    let fit = fit_logistic(features, labels, config)?;
    let model = ProbeModel {
        weights: fit.weights,
        bias: fit.bias,
        pipeline,
        config: config.clone(),
    };
    model.validate()?;
    Ok(model)
}

/// Fits selection, scaling and the probe from pooled training features.
pub fn fit_probe(
    mut pipeline: FeaturePipeline,
    pooled: ArrayView2<f64>,
    labels: &[u8],
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    pipeline.fit(pooled, labels)?;
    let x = pipeline.apply(pooled)?;
    train_probe(x.view(), labels, pipeline, config)
}

/// `w · x + b`
pub fn probe_logit(model: &ProbeModel, x: ArrayView1<f64>) -> Result<f64> {
    if x.len() != model.weights.len() {
        return Err(Error::dims("probe input", model.weights.len(), x.len()));
    }
    Ok(model.weights.dot(&x) + model.bias)
}

pub fn probe_logits(model: &ProbeModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.weights.len() {
        return Err(Error::dims("probe input", model.weights.len(), x.ncols()));
    }
    Ok((x.dot(&model.weights) + model.bias).to_vec())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeHeader {
    pipeline: FeaturePipeline,
    config: ProbeConfig,
    dim: usize,
}

pub fn save_probe(path: &Path, model: &ProbeModel) -> Result<()> {
    model.validate()?;
    let header = ProbeHeader {
        pipeline: model.pipeline.clone(),
        config: model.config.clone(),
        dim: model.weights.len(),
    };
    let payload: Vec<f32> = model.weights.iter().chain([&model.bias]).map(|&v| v as f32).collect();
    container::write(path, PROBE_MAGIC, &header, &payload)
}

pub fn load_probe(path: &Path) -> Result<ProbeModel> {
    let (h, v) = container::read::<ProbeHeader>(path, PROBE_MAGIC, |h| Ok(h.dim + 1))?;
    let model = ProbeModel {
        weights: v[..h.dim].iter().map(|&x| f64::from(x)).collect(),
        bias: f64::from(v[h.dim]),
        pipeline: h.pipeline,
        config: h.config,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatHeader {
    pipeline: FeaturePipeline,
    sign: f64,
    supervised: bool,
    n_pairs: usize,
    subsampled: bool,
    dim: usize,
}

pub fn save_lat(path: &Path, pipeline: &FeaturePipeline, lat: &LatDirection) -> Result<()> {
    lat.validate()?;
    let header = LatHeader {
        pipeline: pipeline.clone(),
        sign: lat.sign,
        supervised: lat.supervised,
        n_pairs: lat.n_pairs,
        subsampled: lat.subsampled,
        dim: lat.direction.len(),
    };
    let payload: Vec<f32> = lat.direction.iter().map(|&v| v as f32).collect();
    container::write(path, LAT_MAGIC, &header, &payload)
}

/// Reads a LAT direction; it is renormalized after the f32 round trip.
pub fn load_lat(path: &Path) -> Result<(FeaturePipeline, LatDirection)> {
    let (h, v) = container::read::<LatHeader>(path, LAT_MAGIC, |h| Ok(h.dim))?;
    let mut direction: Array1<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let norm = direction.dot(&direction).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Invariant("zero LAT direction".into()));
    }
    direction /= norm;
    let lat = LatDirection {
        direction,
        sign: h.sign,
        supervised: h.supervised,
        n_pairs: h.n_pairs,
        subsampled: h.subsampled,
    };
    lat.validate()?;
    Ok((h.pipeline, lat))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackedHeader {
    level1_pipeline: FeaturePipeline,
    level1_config: ProbeConfig,
    dim: usize,
    config: ProbeConfig,
    logits: LogitsSource,
}

pub fn save_stacked(path: &Path, model: &StackedModel) -> Result<()> {
    model.validate()?;
    let header = StackedHeader {
        level1_pipeline: model.level1.pipeline.clone(),
        level1_config: model.level1.config.clone(),
        dim: model.level1.weights.len(),
        config: model.config.clone(),
        logits: model.logits,
    };
    let payload: Vec<f32> = model
        .level1
        .weights
        .iter()
        .chain([&model.level1.bias])
        .chain(model.combiner_weights.iter())
        .chain([&model.combiner_bias])
        .map(|&v| v as f32)
        .collect();
    container::write(path, STACKED_MAGIC, &header, &payload)
}

pub fn load_stacked(path: &Path) -> Result<StackedModel> {
    let (h, v) = container::read::<StackedHeader>(path, STACKED_MAGIC, |h| Ok(h.dim + 4))?;
    let f = |i: usize| f64::from(v[i]);
    let d = h.dim;
    let model = StackedModel {
        level1: ProbeModel {
            weights: (0..d).map(f).collect(),
            bias: f(d),
            pipeline: h.level1_pipeline,
            config: h.level1_config,
        },
        combiner_weights: [f(d + 1), f(d + 2)],
        combiner_bias: f(d + 3),
        config: h.config,
        logits: h.logits,
    };
    model.validate()?;
    Ok(model)
}
