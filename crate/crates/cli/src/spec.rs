use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use actmon_core::actstore::PromptMode;
use actmon_core::eval::{MethodKind, MethodSpec, SweepSpec};
use actmon_core::probe::{FeaturePipeline, LatConfig, LogitsSource, ProbeConfig, Transform};
use actmon_core::prompt::PromptConfig;
use actmon_core::sae::{FeatureVariant, SaeActivation, SaeTrainConfig};
use actmon_core::synth::{MockModelSpec, PassageDatasetSpec, PlantedDictionarySpec, PlantedLinearSpec};
use actmon_core::MAX_FEW_SHOT;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Top-level run configuration. Every block is optional; a subcommand
/// complains when the block it needs is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub ingest: Option<IngestBlock>,
    #[serde(default)]
    pub synth: Option<SynthBlock>,
    #[serde(default)]
    pub capture: Option<CaptureBlock>,
    #[serde(default)]
    pub saes: Vec<SaeBlock>,
    #[serde(default)]
    pub encode: Vec<EncodeBlock>,
    #[serde(default)]
    pub probes: Vec<ProbeBlock>,
    #[serde(default)]
    pub lat: Vec<LatBlock>,
    #[serde(default)]
    pub stack: Vec<StackBlock>,
    #[serde(default)]
    pub sweeps: Vec<SweepBlock>,
    #[serde(default)]
    pub generalize: Vec<GeneralizeBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestBlock {
    /// JSON-lines manifest of labelled examples.
    pub manifest: PathBuf,
    pub name: String,
    pub task_concept: String,
    #[serde(default)]
    pub shards: Vec<PathBuf>,
    /// JSON-lines files of yes/no logits.
    #[serde(default)]
    pub logits: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthBlock {
    Linear {
        spec: PlantedLinearSpec,
        n_examples: usize,
        tokens_per_example: usize,
    },
    Dictionary {
        spec: PlantedDictionarySpec,
        n_examples: usize,
        tokens_per_example: usize,
        concept_atom: usize,
        concept_coeff: f64,
    },
    Passages {
        #[serde(default)]
        spec: PassageDatasetSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureBlock {
    pub prompt_modes: Vec<PromptMode>,
    pub layers: Vec<u32>,
    /// Demonstration counts for yes/no logits in prompted modes.
    #[serde(default = "default_few_shot")]
    pub few_shot: Vec<usize>,
    #[serde(default)]
    pub want_logits: bool,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// In-process mock model, used when no endpoint is configured.
    #[serde(default)]
    pub mock: Option<MockModelSpec>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_few_shot() -> Vec<usize> {
    vec![0]
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeBlock {
    pub name: String,
    pub layer: u32,
    pub prompt_mode: PromptMode,
    pub n_latents: usize,
    pub k: usize,
    #[serde(default)]
    pub train: SaeTrainConfig,
    /// Shards the JumpReLU threshold is fitted on; defaults to the training shard.
    #[serde(default)]
    pub calibration_modes: Vec<PromptMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeBlock {
    pub sae: String,
    pub layer: u32,
    pub prompt_mode: PromptMode,
    pub variant: FeatureVariant,
    #[serde(default)]
    pub inference: SaeActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    pub name: String,
    pub pipeline: FeaturePipeline,
    #[serde(default)]
    pub config: Option<ProbeConfig>,
    #[serde(default)]
    pub n_train_positives: Option<usize>,
}

impl ProbeBlock {
    pub fn method(&self) -> MethodSpec {
        let config = self.config.clone().unwrap_or_else(|| match self.pipeline.transform {
            Transform::Raw => ProbeConfig::raw_default(),
            _ => ProbeConfig::sae_default(),
        });
        MethodSpec::new(
            self.name.clone(),
            MethodKind::Probe {
                pipeline: self.pipeline.clone(),
                config,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatBlock {
    pub name: String,
    pub pipeline: FeaturePipeline,
    #[serde(default)]
    pub lat: LatConfig,
    #[serde(default)]
    pub n_train_positives: Option<usize>,
}

impl LatBlock {
    pub fn method(&self) -> MethodSpec {
        MethodSpec::new(
            self.name.clone(),
            MethodKind::Lat {
                pipeline: self.pipeline.clone(),
                lat: self.lat.clone(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackBlock {
    pub name: String,
    /// Name of a block in `probes`; its stored model is the first level.
    pub probe: String,
    #[serde(default = "combiner_default")]
    pub combiner: ProbeConfig,
    #[serde(default)]
    pub logits: LogitsSource,
}

fn combiner_default() -> ProbeConfig {
    ProbeConfig::raw_default().with_c(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub name: String,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizeBlock {
    pub name: String,
    /// In-distribution tag; its complement is `non_<tag>`.
    pub tag: String,
    pub sizes: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    pub method: MethodSpec,
}

fn default_repeats() -> usize {
    5
}

impl GeneralizeBlock {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }
}

#[derive(Debug)]
pub struct LoadedSpec {
    pub spec: RunSpec,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
}

impl LoadedSpec {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Parses strictly and collects every violation before failing.
pub fn load(path: &Path) -> Result<LoadedSpec, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let spec: RunSpec = serde_json::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedSpec { spec, base };
    let problems = loaded.problems();
    if problems.is_empty() {
        Ok(loaded)
    } else {
        Err(problems)
    }
}

fn duplicates<'a>(what: &str, names: impl Iterator<Item = &'a str>, out: &mut Vec<String>) {
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() {
            out.push(format!("{what}: empty name"));
        } else if !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            out.push(format!("{what} {n:?}: names may only use [A-Za-z0-9_-]"));
        } else if !seen.insert(n) {
            out.push(format!("{what} {n:?}: duplicate name"));
        }
    }
}

impl LoadedSpec {
    pub fn problems(&self) -> Vec<String> {
        let s = &self.spec;
        let mut out = Vec::new();

        if let Some(ing) = &s.ingest {
            for p in std::iter::once(&ing.manifest).chain(&ing.shards).chain(&ing.logits) {
                if !self.resolve(p).is_file() {
                    out.push(format!("ingest: file {} does not exist", p.display()));
                }
            }
            if ing.name.is_empty() || ing.task_concept.is_empty() {
                out.push("ingest: name and task_concept must be non-empty".into());
            }
        }
        if let Some(syn) = &s.synth {
            let r = match syn {
                SynthBlock::Linear {
                    spec,
                    n_examples,
                    tokens_per_example,
                } => {
                    if *n_examples < 2 || *tokens_per_example == 0 {
                        out.push("synth: need at least two examples and one token each".into());
                    }
                    spec.validate()
                }
                SynthBlock::Dictionary {
                    spec,
                    n_examples,
                    tokens_per_example,
                    concept_atom,
                    ..
                } => {
                    if *n_examples < 2 || *tokens_per_example < 2 {
                        out.push("synth: need at least two examples and two tokens each".into());
                    }
                    if *concept_atom >= spec.n_atoms {
                        out.push(format!("synth: concept_atom {concept_atom} out of range"));
                    }
                    spec.validate()
                }
                SynthBlock::Passages { spec } => {
                    if spec.n_per_class < 2 {
                        out.push("synth: n_per_class must be at least 2".into());
                    }
                    Ok(())
                }
            };
            if let Err(e) = r {
                out.push(format!("synth: {e}"));
            }
        }
        if let Some(cap) = &s.capture {
            if cap.prompt_modes.is_empty() {
                out.push("capture: prompt_modes is empty".into());
            }
            if cap.layers.is_empty() {
                out.push("capture: layers is empty".into());
            }
            if let Some(&n) = cap.few_shot.iter().find(|&&n| n > MAX_FEW_SHOT) {
                out.push(format!("capture: few_shot {n} exceeds {MAX_FEW_SHOT}"));
            }
            if let Some(m) = &cap.mock {
                if let Err(e) = m.validate() {
                    out.push(format!("capture.mock: {e}"));
                }
            }
        }

        duplicates("sae", s.saes.iter().map(|b| b.name.as_str()), &mut out);
        let sae_names: BTreeSet<&str> = s.saes.iter().map(|b| b.name.as_str()).collect();
        for b in &s.saes {
            if b.k == 0 || b.k > b.n_latents {
                out.push(format!("sae {:?}: need 0 < k <= n_latents", b.name));
            }
            if let Err(e) = b.train.validate(b.n_latents) {
                out.push(format!("sae {:?}: {e}", b.name));
            }
        }
        for b in &s.encode {
            if !sae_names.contains(b.sae.as_str()) {
                out.push(format!("encode: unknown sae {:?}", b.sae));
            }
        }

        let check_method = |m: &MethodSpec, out: &mut Vec<String>| {
            out.extend(m.problems());
            if let Some(r) = m.pipeline().and_then(|p| p.sae_ref.as_deref()) {
                if !sae_names.contains(r) {
                    out.push(format!("method {:?}: unknown sae_ref {r:?}", m.name));
                }
            }
        };

        let model_names = s
            .probes
            .iter()
            .map(|b| b.name.as_str())
            .chain(s.lat.iter().map(|b| b.name.as_str()))
            .chain(s.stack.iter().map(|b| b.name.as_str()));
        duplicates("model", model_names, &mut out);
        for b in &s.probes {
            check_method(&b.method(), &mut out);
            if b.n_train_positives == Some(0) {
                out.push(format!("probe {:?}: n_train_positives must be positive", b.name));
            }
        }
        for b in &s.lat {
            check_method(&b.method(), &mut out);
            if b.n_train_positives == Some(0) {
                out.push(format!("lat {:?}: n_train_positives must be positive", b.name));
            }
        }
        let probe_names: BTreeSet<&str> = s.probes.iter().map(|b| b.name.as_str()).collect();
        for b in &s.stack {
            if !probe_names.contains(b.probe.as_str()) {
                out.push(format!("stack {:?}: unknown probe {:?}", b.name, b.probe));
            }
            if let Err(e) = b.combiner.validate() {
                out.push(format!("stack {:?}: {e}", b.name));
            }
            if b.logits.prompt_mode == PromptMode::None {
                out.push(format!("stack {:?}: yes/no logits need a prompted mode", b.name));
            }
        }

        duplicates("sweep", s.sweeps.iter().map(|b| b.name.as_str()), &mut out);
        for b in &s.sweeps {
            out.extend(
                b.sweep
                    .problems()
                    .into_iter()
                    .map(|p| format!("sweep {:?}: {p}", b.name)),
            );
            check_method(&b.sweep.method, &mut out);
        }
        duplicates("generalize", s.generalize.iter().map(|b| b.name.as_str()), &mut out);
        for b in &s.generalize {
            if b.tag.is_empty() {
                out.push(format!("generalize {:?}: tag is empty", b.name));
            }
            if b.sizes.is_empty() {
                out.push(format!("generalize {:?}: sizes is empty", b.name));
            }
            if b.sizes.contains(&0) {
                out.push(format!("generalize {:?}: sizes must be positive", b.name));
            }
            if b.sizes.windows(2).any(|w| w[0] >= w[1]) {
                out.push(format!("generalize {:?}: sizes must be strictly increasing", b.name));
            }
            if b.repeats == 0 {
                out.push(format!("generalize {:?}: repeats must be positive", b.name));
            }
            check_method(&b.method, &mut out);
        }
        out
    }

    /// SHA-256 of the canonical JSON of the effective spec.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(&self.spec).expect("spec serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
