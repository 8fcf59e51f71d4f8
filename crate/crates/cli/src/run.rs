use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use actmon_core::actstore::{container, read_manifest, read_shard, write_manifest, Dataset, PromptMode, YesNoLogits};
use actmon_core::eval::{ExperimentData, MethodSpec};
use actmon_core::probe::LogitsSource;
use actmon_core::sae::SaeModel;
use actmon_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Layout of a run directory. Every stage reads and writes here, so a
/// directory on its own is enough to rebuild the report.
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    name: String,
    task_concept: String,
}

/// Sidecar stored next to every trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub method: MethodSpec,
    pub n_train_positives: usize,
    pub seed: u64,
    /// `probe`, `lat` or `stacked`
    pub format: String,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    fn sub(&self, dir: &str) -> Result<PathBuf> {
        let p = self.root.join(dir);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn shard_path(&self, layer: u32, mode: PromptMode) -> Result<PathBuf> {
        Ok(self.sub("shards")?.join(format!("L{layer}-{mode}.acts")))
    }

    pub fn logits_path(&self, source: LogitsSource) -> Result<PathBuf> {
        Ok(self
            .sub("logits")?
            .join(format!("{}-fs{}.jsonl", source.prompt_mode, source.few_shot_n)))
    }

    pub fn sae_path(&self, name: &str) -> Result<PathBuf> {
        Ok(self.sub("sae")?.join(format!("{name}.saem")))
    }

    pub fn encoded_path(&self, file: &str) -> Result<PathBuf> {
        Ok(self.sub("encoded")?.join(file))
    }

    pub fn model_path(&self, name: &str, ext: &str) -> Result<PathBuf> {
        Ok(self.sub("models")?.join(format!("{name}.{ext}")))
    }

    pub fn stage_report_path(&self, stage: &str, name: &str) -> Result<PathBuf> {
        Ok(self.sub("reports")?.join(format!("{stage}-{name}.csv")))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn write_dataset(&self, dataset: &Dataset) -> Result<()> {
        write_manifest(&dataset.examples, &self.manifest_path())?;
        let meta = DatasetMeta {
            name: dataset.name.clone(),
            task_concept: dataset.task_concept.clone(),
        };
        container::write_atomic(&self.root.join("dataset.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let meta_path = self.root.join("dataset.json");
        if !meta_path.is_file() {
            return Err(Error::Invalid(format!(
                "{} has no dataset; run `ingest` or `synth` first",
                self.root.display()
            )));
        }
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
        Dataset::new(meta.name, meta.task_concept, read_manifest(&self.manifest_path())?)
    }

    pub fn write_logits(&self, logits: &[YesNoLogits], path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for l in logits {
            serde_json::to_writer(&mut buf, l)?;
            buf.write_all(b"\n")?;
        }
        container::write_atomic(path, &buf)
    }

    pub fn write_record(&self, name: &str, record: &ModelRecord) -> Result<()> {
        container::write_atomic(&self.model_path(name, "json")?, &serde_json::to_vec_pretty(record)?)
    }

    /// Stored models with their sidecars, in name order.
    pub fn records(&self) -> Result<Vec<(String, ModelRecord)>> {
        let mut out = Vec::new();
        for path in sorted_files(&self.root.join("models"), "json")? {
            let record: ModelRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
            out.push((stem(&path), record));
        }
        Ok(out)
    }

    pub fn stage_reports(&self) -> Result<Vec<PathBuf>> {
        sorted_files(&self.root.join("reports"), "csv")
    }

    /// Dataset plus every stored shard, logits file and SAE checkpoint.
    pub fn experiment(&self) -> Result<ExperimentData> {
        let mut data = ExperimentData::new(self.dataset()?);
        for path in sorted_files(&self.root.join("shards"), "acts")? {
            data.add_shard(read_shard(&path)?)?;
        }
        for path in sorted_files(&self.root.join("logits"), "jsonl")? {
            data.add_logits(&read_logits(&path)?)?;
        }
        for path in sorted_files(&self.root.join("sae"), "saem")? {
            data.add_sae(stem(&path), SaeModel::load(&path)?);
        }
        Ok(data)
    }

    /// Records one stage in `run_manifest.json`, keeping earlier stages.
    pub fn record_stage(&self, stage: &str, config_hash: &str, seeds: Value, outputs: &[PathBuf]) -> Result<()> {
        let path = self.root.join("run_manifest.json");
        let mut manifest: BTreeMap<String, Value> = if path.is_file() {
            serde_json::from_slice(&std::fs::read(&path)?)?
        } else {
            BTreeMap::new()
        };
        manifest.insert("config_hash".into(), json!(config_hash));
        manifest.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        let stages = manifest.entry("stages".into()).or_insert_with(|| json!({}));
        let rel: Vec<String> = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).display().to_string())
            .collect();
        stages[stage] = json!({ "config_hash": config_hash, "seeds": seeds, "outputs": rel });
        container::write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)
    }
}

pub fn read_logits(path: &Path) -> Result<Vec<YesNoLogits>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: YesNoLogits = serde_json::from_str(&line)?;
        l.validate()?;
        out.push(l);
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == ext));
    out.sort();
    Ok(out)
}
