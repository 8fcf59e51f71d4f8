use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, ProbeConfig};
use super::ProbeModel;
use crate::actstore::PromptMode;
use crate::error::{Error, Result};

/// Which zero-shot logits feed the combiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsSource {
    pub prompt_mode: PromptMode,
    pub few_shot_n: usize,
}

impl Default for LogitsSource {
    fn default() -> Self {
        Self {
            prompt_mode: PromptMode::PrefixSuffix,
            few_shot_n: 0,
        }
    }
}

/// A frozen probe whose logit is combined with the yes−no logit difference
/// by a two-feature logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub level1: ProbeModel,
    /// Weights on `[probe_logit, yes_no_diff]`.
    pub combiner_weights: [f64; 2],
    pub combiner_bias: f64,
    pub config: ProbeConfig,
    pub logits: LogitsSource,
}

impl StackedModel {
    pub fn score(&self, probe_logit: f64, yes_no_diff: f64) -> f64 {
        self.combiner_weights[0] * probe_logit + self.combiner_weights[1] * yes_no_diff + self.combiner_bias
    }

    pub fn validate(&self) -> Result<()> {
        self.level1.validate()?;
        if !self.combiner_bias.is_finite() || self.combiner_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invariant("non-finite combiner parameters".into()));
        }
        Ok(())
    }
}

pub fn train_stacked(
    probe: &ProbeModel,
    probe_logits: &[f64],
    yes_no_diffs: &[f64],
    labels: &[u8],
    config: &ProbeConfig,
    logits: LogitsSource,
) -> Result<StackedModel> {
    if probe_logits.len() != labels.len() || yes_no_diffs.len() != labels.len() {
        return Err(Error::dims(
            "stacking inputs",
            labels.len(),
            probe_logits.len().min(yes_no_diffs.len()),
        ));
    }
    let x = Array2::from_shape_fn((labels.len(), 2), |(i, j)| {
        if j == 0 {
            probe_logits[i]
        } else {
            yes_no_diffs[i]
        }
    });
    let fit = fit_logistic(x.view(), labels, config)?;
    Ok(StackedModel {
        level1: probe.clone(),
        combiner_weights: [fit.weights[0], fit.weights[1]],
        combiner_bias: fit.bias,
        config: config.clone(),
        logits,
    })
}
