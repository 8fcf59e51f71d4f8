use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Duration;

use actmon_core::actstore::{
    make_balanced_train_subset, read_shard, write_shard, ActivationShard, Dataset, PromptMode, Split,
};
use actmon_core::eval::{
    emit_report, evaluate_on_test, fit_method, max_train_positives, read_report, run_generalization, run_sweep,
    ExperimentData, FittedMethod, MethodKind, MethodSpec,
};
use actmon_core::probe::{load_lat, load_probe, load_stacked, save_lat, save_probe, save_stacked, train_stacked};
use actmon_core::prompt::{capture, CaptureSpec, Fetcher, InferenceBackend};
use actmon_core::sae::{calibrate_jumprelu, encode_features, train_sae, SaeModel};
use actmon_core::synth::{gen_dictionary_dataset, gen_linear_dataset, gen_passage_dataset, MockModel};
use actmon_core::{Error, Result};
use actmon_harness::HttpBackend;
use serde::Serialize;
use serde_json::json;

use crate::run::{read_logits, ModelRecord, RunDir};
use crate::spec::{CaptureBlock, LoadedSpec, SynthBlock};
use crate::CliError;

pub struct Context {
    pub spec: LoadedSpec,
    pub run: RunDir,
    pub hash: String,
    pub endpoint: Option<String>,
}

fn missing(block: &str, command: &str) -> CliError {
    CliError::Config(vec![format!("`{command}` needs a non-empty `{block}` block")])
}

fn tag<T: Serialize>(t: &T) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl Context {
    fn seed(&self) -> u64 {
        self.spec.spec.seed
    }

    fn record(&self, stage: &str, seeds: serde_json::Value, outputs: &[PathBuf]) -> Result<()> {
        self.run.record_stage(stage, &self.hash, seeds, outputs)
    }

    pub fn ingest(&self) -> Result<(), CliError> {
        let b = self
            .spec
            .spec
            .ingest
            .as_ref()
            .ok_or_else(|| missing("ingest", "ingest"))?;
        let examples = actmon_core::actstore::read_manifest(&self.spec.resolve(&b.manifest))?;
        let dataset = Dataset::new(b.name.clone(), b.task_concept.clone(), examples)?;
        self.run.write_dataset(&dataset)?;
        let mut outputs = vec![self.run.manifest_path()];
        for p in &b.shards {
            let shard = read_shard(&self.spec.resolve(p))?;
            shard.validate_against(&dataset)?;
            let out = self.run.shard_path(shard.layer, shard.prompt_mode)?;
            write_shard(&shard, &out)?;
            outputs.push(out);
        }
        let mut data = ExperimentData::new(dataset);
        for p in &b.logits {
            let logits = read_logits(&self.spec.resolve(p))?;
            data.add_logits(&logits)?;
            let sources: BTreeSet<(PromptMode, usize)> =
                logits.iter().map(|l| (l.prompt_mode, l.num_few_shot)).collect();
            for (mode, n) in sources {
                let part: Vec<_> = logits
                    .iter()
                    .filter(|l| l.prompt_mode == mode && l.num_few_shot == n)
                    .cloned()
                    .collect();
                let out = self.run.logits_path(actmon_core::probe::LogitsSource {
                    prompt_mode: mode,
                    few_shot_n: n,
                })?;
                self.run.write_logits(&part, &out)?;
                outputs.push(out);
            }
        }
        self.record("ingest", json!({}), &outputs)?;
        Ok(())
    }

    pub fn synth(&self) -> Result<(), CliError> {
        let b = self.spec.spec.synth.as_ref().ok_or_else(|| missing("synth", "synth"))?;
        let mut outputs = vec![self.run.manifest_path()];
        let (dataset, shard, seed) = match b {
            SynthBlock::Linear {
                spec,
                n_examples,
                tokens_per_example,
            } => {
                let (d, s) = gen_linear_dataset(spec, *n_examples, *tokens_per_example)?;
                (d, Some(s), spec.seed)
            }
            SynthBlock::Dictionary {
                spec,
                n_examples,
                tokens_per_example,
                concept_atom,
                concept_coeff,
            } => {
                let (d, s, _) =
                    gen_dictionary_dataset(spec, *n_examples, *tokens_per_example, *concept_atom, *concept_coeff)?;
                (d, Some(s), spec.seed)
            }
            SynthBlock::Passages { spec } => (gen_passage_dataset(spec)?, None, spec.seed),
        };
        self.run.write_dataset(&dataset)?;
        if let Some(shard) = shard {
            let out = self.run.shard_path(shard.layer, shard.prompt_mode)?;
            write_shard(&shard, &out)?;
            outputs.push(out);
        }
        self.record("synth", json!({ "synth": seed }), &outputs)?;
        Ok(())
    }

    pub fn capture(&self) -> Result<(), CliError> {
        let b = self
            .spec
            .spec
            .capture
            .as_ref()
            .ok_or_else(|| missing("capture", "capture"))?;
        let dataset = self.run.dataset()?;
        let outputs = match (&self.endpoint, &b.mock) {
            (Some(url), _) => self.capture_with(&dataset, b, HttpBackend::new(url)?)?,
            (None, Some(mock)) => self.capture_with(&dataset, b, MockModel::new(mock.clone())?)?,
            (None, None) => {
                return Err(CliError::Config(vec![
                    "capture: no endpoint (flag, environment or config) and no mock model".into(),
                ]))
            }
        };
        self.record("capture", json!({ "few_shot": self.seed() }), &outputs)?;
        Ok(())
    }

    fn capture_with<B: InferenceBackend>(
        &self,
        dataset: &Dataset,
        b: &CaptureBlock,
        backend: B,
    ) -> Result<Vec<PathBuf>> {
        let mut fetcher = Fetcher::new(backend).with_retries(b.max_retries, Duration::from_millis(200));
        if let Some(dir) = &b.cache_dir {
            fetcher = fetcher.with_cache(self.spec.resolve(dir));
        }
        let counts: BTreeSet<usize> = b.few_shot.iter().copied().chain([0]).collect();
        let mut outputs = Vec::new();
        for &mode in &b.prompt_modes {
            for &n in &counts {
                if mode == PromptMode::None && n > 0 {
                    continue;
                }
                let want_logits = b.want_logits && mode != PromptMode::None && b.few_shot.contains(&n);
                let spec = CaptureSpec {
                    prompt_mode: mode,
                    layers: b.layers.clone(),
                    few_shot_n: n,
                    want_logits,
                    prompt: b.prompt.clone(),
                    seed: self.seed(),
                };
                let out = capture(dataset, &fetcher, &spec, None)?;
                if n == 0 {
                    for shard in out.shards.values() {
                        let path = self.run.shard_path(shard.layer, mode)?;
                        write_shard(shard, &path)?;
                        outputs.push(path);
                    }
                }
                if want_logits {
                    let path = self.run.logits_path(actmon_core::probe::LogitsSource {
                        prompt_mode: mode,
                        few_shot_n: n,
                    })?;
                    self.run.write_logits(&out.logits, &path)?;
                    outputs.push(path);
                }
            }
        }
        Ok(outputs)
    }

    fn raw_shard(&self, layer: u32, mode: PromptMode) -> Result<ActivationShard> {
        let path = self.run.shard_path(layer, mode)?;
        if !path.is_file() {
            return Err(Error::Invalid(format!(
                "no shard for layer {layer} in mode {mode}; run `capture` first"
            )));
        }
        read_shard(&path)
    }

    pub fn train_sae(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.saes;
        if blocks.is_empty() {
            return Err(missing("saes", "train-sae"));
        }
        let dataset = self.run.dataset()?;
        let train: BTreeSet<String> = dataset.split_ids(Split::Train).into_iter().collect();
        let mut outputs = Vec::new();
        let mut seeds = serde_json::Map::new();
        for b in blocks {
            let shard = self.raw_shard(b.layer, b.prompt_mode)?;
            let mut train_shard = ActivationShard::new(
                shard.dataset_name.clone(),
                shard.layer,
                shard.prompt_mode,
                shard.d_model,
            );
            for (id, m) in shard.example_ids.iter().zip(&shard.matrices) {
                if train.contains(id) {
                    train_shard.push(id.clone(), m.clone());
                }
            }
            let mut config = b.train.clone();
            config.seed = config.seed.wrapping_add(self.seed());
            seeds.insert(b.name.clone(), json!(config.seed));
            let outcome = train_sae(&[train_shard], b.n_latents, b.k, &config)?;
            let path = self.run.sae_path(&b.name)?;
            outcome.model.save(&path)?;
            let log = path.with_extension("train.json");
            let summary = json!({
                "loss_history": outcome.loss_history,
                "dead_latents": outcome.stats.dead_count(config.dead_token_threshold),
            });
            actmon_core::actstore::container::write_atomic(
                &log,
                &serde_json::to_vec_pretty(&summary).map_err(Error::from)?,
            )?;
            outputs.extend([path, log]);
        }
        self.record("train-sae", seeds.into(), &outputs)?;
        Ok(())
    }

    pub fn calibrate(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.saes;
        if blocks.is_empty() {
            return Err(missing("saes", "calibrate"));
        }
        let mut outputs = Vec::new();
        for b in blocks {
            let path = self.run.sae_path(&b.name)?;
            let mut model = load_sae(&path, &b.name)?;
            let modes = if b.calibration_modes.is_empty() {
                vec![b.prompt_mode]
            } else {
                b.calibration_modes.clone()
            };
            let shards = modes
                .iter()
                .map(|&m| self.raw_shard(b.layer, m))
                .collect::<Result<Vec<_>>>()?;
            let theta = calibrate_jumprelu(&mut model, &shards)?;
            log::info!("sae {}: theta = {theta}", b.name);
            model.save(&path)?;
            outputs.push(path);
        }
        self.record("calibrate", json!({}), &outputs)?;
        Ok(())
    }

    pub fn encode(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.encode;
        if blocks.is_empty() {
            return Err(missing("encode", "encode"));
        }
        let mut outputs = Vec::new();
        for b in blocks {
            let model = load_sae(&self.run.sae_path(&b.sae)?, &b.sae)?;
            let shard = self.raw_shard(b.layer, b.prompt_mode)?;
            let features = encode_features(&model, &shard, b.variant, b.inference)?;
            let mut out = ActivationShard::new(shard.dataset_name.clone(), b.layer, b.prompt_mode, model.n_latents());
            for (id, f) in shard.example_ids.iter().zip(features) {
                out.push(id.clone(), f.mapv(|v| v as f32));
            }
            let file = format!(
                "{}-L{}-{}-{}-{}.acts",
                b.sae,
                b.layer,
                b.prompt_mode,
                tag(&b.variant),
                tag(&b.inference)
            );
            let path = self.run.encoded_path(&file)?;
            write_shard(&out, &path)?;
            outputs.push(path);
        }
        self.record("encode", json!({}), &outputs)?;
        Ok(())
    }

    fn fit_and_store(
        &self,
        data: &ExperimentData,
        method: &MethodSpec,
        n_pos: Option<usize>,
    ) -> Result<(PathBuf, PathBuf)> {
        let seed = self.seed();
        let n_pos = n_pos.unwrap_or_else(|| max_train_positives(&data.dataset));
        let train = make_balanced_train_subset(&data.dataset, n_pos, seed)?;
        let fitted = fit_method(method, data, &train, seed)?;
        let (path, format) = match &fitted {
            FittedMethod::Probe(m) => {
                let p = self.run.model_path(&method.name, "prbm")?;
                save_probe(&p, m)?;
                (p, "probe")
            }
            FittedMethod::Lat(pipeline, lat) => {
                let p = self.run.model_path(&method.name, "latd")?;
                save_lat(&p, pipeline, lat)?;
                (p, "lat")
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "method {:?} is not stored by this stage",
                    method.name
                )))
            }
        };
        let record = ModelRecord {
            method: method.clone(),
            n_train_positives: n_pos,
            seed,
            format: format.into(),
        };
        self.run.write_record(&method.name, &record)?;
        let report = evaluate_on_test(method, &fitted, data, n_pos, seed)?;
        println!("{}\t{:.6}", method.name, report.auroc);
        Ok((path, self.run.model_path(&method.name, "json")?))
    }

    pub fn train_probe(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.probes;
        if blocks.is_empty() {
            return Err(missing("probes", "train-probe"));
        }
        let data = self.run.experiment()?;
        let mut outputs = Vec::new();
        for b in blocks {
            let (m, r) = self.fit_and_store(&data, &b.method(), b.n_train_positives)?;
            outputs.extend([m, r]);
        }
        self.record("train-probe", json!({ "subset": self.seed() }), &outputs)?;
        Ok(())
    }

    pub fn latscan(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.lat;
        if blocks.is_empty() {
            return Err(missing("lat", "latscan"));
        }
        let data = self.run.experiment()?;
        let mut outputs = Vec::new();
        for b in blocks {
            let (m, r) = self.fit_and_store(&data, &b.method(), b.n_train_positives)?;
            outputs.extend([m, r]);
        }
        self.record("latscan", json!({ "subset": self.seed() }), &outputs)?;
        Ok(())
    }

    pub fn stack(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.stack;
        if blocks.is_empty() {
            return Err(missing("stack", "stack"));
        }
        let data = self.run.experiment()?;
        let records = self.run.records()?;
        let mut outputs = Vec::new();
        for b in blocks {
            let (_, rec) = records
                .iter()
                .find(|(name, r)| *name == b.probe && r.format == "probe")
                .ok_or_else(|| Error::Invalid(format!("no stored probe {:?}; run `train-probe` first", b.probe)))?;
            let probe = load_probe(&self.run.model_path(&b.probe, "prbm")?)?;
            let train = make_balanced_train_subset(&data.dataset, rec.n_train_positives, rec.seed)?;
            let labels = data.dataset.labels_for(&train)?;
            let p = probe.score_pooled(data.pooled(&probe.pipeline)?.rows(&train)?.view())?;
            let d = data.diffs(b.logits, &train)?;
            let model = train_stacked(&probe, &p, &d, &labels, &b.combiner, b.logits)?;
            let MethodKind::Probe { pipeline, config } = &rec.method.kind else {
                return Err(Error::Invalid(format!("{:?} is not a probe", b.probe)).into());
            };
            let method = MethodSpec::new(
                b.name.clone(),
                MethodKind::Stacked {
                    pipeline: pipeline.clone(),
                    config: config.clone(),
                    combiner: b.combiner.clone(),
                    logits: b.logits,
                },
            );
            let path = self.run.model_path(&b.name, "stck")?;
            save_stacked(&path, &model)?;
            let record = ModelRecord {
                method: method.clone(),
                n_train_positives: rec.n_train_positives,
                seed: rec.seed,
                format: "stacked".into(),
            };
            self.run.write_record(&b.name, &record)?;
            let report = evaluate_on_test(
                &method,
                &FittedMethod::Stacked(model),
                &data,
                rec.n_train_positives,
                rec.seed,
            )?;
            println!("{}\t{:.6}", b.name, report.auroc);
            outputs.extend([path, self.run.model_path(&b.name, "json")?]);
        }
        self.record("stack", json!({}), &outputs)?;
        Ok(())
    }

    pub fn sweep(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.sweeps;
        if blocks.is_empty() {
            return Err(missing("sweeps", "sweep"));
        }
        let data = self.run.experiment()?;
        let mut outputs = Vec::new();
        let mut seeds = serde_json::Map::new();
        for b in blocks {
            let mut spec = b.sweep.clone();
            spec.seed = spec.seed.wrapping_add(self.seed());
            seeds.insert(b.name.clone(), json!(spec.seeds()));
            let reports = run_sweep(&data, &spec)?;
            let path = self.run.stage_report_path("sweep", &b.name)?;
            emit_report(&reports, &path)?;
            outputs.push(path);
        }
        self.record("sweep", seeds.into(), &outputs)?;
        Ok(())
    }

    pub fn generalize(&self) -> Result<(), CliError> {
        let blocks = &self.spec.spec.generalize;
        if blocks.is_empty() {
            return Err(missing("generalize", "generalize"));
        }
        let data = self.run.experiment()?;
        let mut outputs = Vec::new();
        let mut seeds = serde_json::Map::new();
        for b in blocks {
            let s: Vec<u64> = b.seeds().iter().map(|s| s.wrapping_add(self.seed())).collect();
            seeds.insert(b.name.clone(), json!(s));
            let reports = run_generalization(&data, &b.tag, &b.method, &b.sizes, &s)?;
            let path = self.run.stage_report_path("generalize", &b.name)?;
            emit_report(&reports, &path)?;
            outputs.push(path);
        }
        self.record("generalize", seeds.into(), &outputs)?;
        Ok(())
    }
}

fn load_sae(path: &std::path::Path, name: &str) -> Result<SaeModel> {
    if !path.is_file() {
        return Err(Error::Invalid(format!("no SAE {name:?}; run `train-sae` first")));
    }
    SaeModel::load(path)
}

/// Re-scores every stored model on the test split and appends the stored
/// sweep and generalization rows.
pub fn report(run: &RunDir) -> Result<PathBuf> {
    let data = run.experiment()?;
    let mut rows = Vec::new();
    for (name, rec) in run.records()? {
        let fitted = match rec.format.as_str() {
            "probe" => FittedMethod::Probe(load_probe(&run.model_path(&name, "prbm")?)?),
            "lat" => {
                let (pipeline, lat) = load_lat(&run.model_path(&name, "latd")?)?;
                FittedMethod::Lat(pipeline, lat)
            }
            "stacked" => FittedMethod::Stacked(load_stacked(&run.model_path(&name, "stck")?)?),
            other => return Err(Error::Invalid(format!("model {name:?} has unknown format {other:?}"))),
        };
        rows.push(evaluate_on_test(
            &rec.method,
            &fitted,
            &data,
            rec.n_train_positives,
            rec.seed,
        )?);
    }
    for path in run.stage_reports()? {
        rows.extend(read_report(&path)?);
    }
    let path = run.report_path();
    emit_report(&rows, &path)?;
    Ok(path)
}
