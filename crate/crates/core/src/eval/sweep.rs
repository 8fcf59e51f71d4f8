use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::report::{sort_reports, EvalReport, SplitKind};
use crate::actstore::{
    make_balanced_subset_of, make_balanced_train_subset, split_by_tag, ActivationShard, Dataset, PromptMode, Split,
    YesNoLogits,
};
use crate::error::{Error, Result};
use crate::probe::{
    fit_probe, lat_fit, lat_scores, probe_logits, train_stacked, FeaturePipeline, LatConfig, LatDirection,
    LogitsSource, ProbeConfig, ProbeModel, StackedModel, Transform,
};
use crate::rng;
use crate::sae::SaeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    Probe {
        pipeline: FeaturePipeline,
        config: ProbeConfig,
    },
    ZeroShot {
        logits: LogitsSource,
    },
    Lat {
        pipeline: FeaturePipeline,
        #[serde(default)]
        lat: LatConfig,
    },
    Stacked {
        pipeline: FeaturePipeline,
        config: ProbeConfig,
        #[serde(default = "combiner_default")]
        combiner: ProbeConfig,
        logits: LogitsSource,
    },
}

fn combiner_default() -> ProbeConfig {
    ProbeConfig::raw_default().with_c(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, kind: MethodKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn pipeline(&self) -> Option<&FeaturePipeline> {
        match &self.kind {
            MethodKind::Probe { pipeline, .. }
            | MethodKind::Lat { pipeline, .. }
            | MethodKind::Stacked { pipeline, .. } => Some(pipeline),
            MethodKind::ZeroShot { .. } => None,
        }
    }

    fn pipeline_mut(&mut self) -> Option<&mut FeaturePipeline> {
        match &mut self.kind {
            MethodKind::Probe { pipeline, .. }
            | MethodKind::Lat { pipeline, .. }
            | MethodKind::Stacked { pipeline, .. } => Some(pipeline),
            MethodKind::ZeroShot { .. } => None,
        }
    }

    pub fn logits_source(&self) -> Option<LogitsSource> {
        match &self.kind {
            MethodKind::ZeroShot { logits } | MethodKind::Stacked { logits, .. } => Some(*logits),
            _ => None,
        }
    }

    pub fn trains(&self) -> bool {
        !matches!(self.kind, MethodKind::ZeroShot { .. })
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() {
            out.push("method name is empty".to_string());
        }
        if let Some(p) = self.pipeline() {
            if let Err(e) = p.validate() {
                out.push(format!("method {:?}: {e}", self.name));
            }
        }
        match &self.kind {
            MethodKind::Probe { config, .. } => {
                if let Err(e) = config.validate() {
                    out.push(format!("method {:?}: {e}", self.name));
                }
            }
            MethodKind::Stacked { config, combiner, .. } => {
                for c in [config, combiner] {
                    if let Err(e) = c.validate() {
                        out.push(format!("method {:?}: {e}", self.name));
                    }
                }
            }
            MethodKind::Lat { pipeline, .. } if pipeline.top_q.is_some() => {
                out.push(format!("method {:?}: LAT does not use top_q", self.name));
            }
            _ => {}
        }
        if let Some(l) = self.logits_source() {
            if l.prompt_mode == PromptMode::None {
                out.push(format!("method {:?}: yes/no logits need a prompted mode", self.name));
            }
            if l.few_shot_n > crate::MAX_FEW_SHOT {
                out.push(format!(
                    "method {:?}: few_shot_n above {}",
                    self.name,
                    crate::MAX_FEW_SHOT
                ));
            }
        }
        out
    }

    fn base_report(&self, dataset: &str, split_kind: SplitKind, n_pos: usize, seed: u64, auroc: f64) -> EvalReport {
        let p = self.pipeline();
        let c = match &self.kind {
            MethodKind::Probe { config, .. } | MethodKind::Stacked { config, .. } => Some(config.c),
            _ => None,
        };
        EvalReport {
            method: self.name.clone(),
            dataset: dataset.to_string(),
            split_kind,
            n_train_positives: if self.trains() { n_pos } else { 0 },
            layer: p.map(|p| p.layer),
            prompt_mode: p.map(|p| p.prompt_mode).or(self.logits_source().map(|l| l.prompt_mode)),
            transform: p.map(|p| p.transform),
            pooling: p.map(|p| p.pooling),
            q: p.and_then(|p| p.top_q),
            c,
            few_shot_n: self.logits_source().map(|l| l.few_shot_n),
            seed,
            auroc,
        }
    }
}

/// Pooled features for every example of one shard.
#[derive(Debug)]
pub struct PooledFeatures {
    pub matrix: Array2<f64>,
    rows: HashMap<String, usize>,
}

impl PooledFeatures {
    pub fn rows(&self, ids: &[String]) -> Result<Array2<f64>> {
        let idx = ids
            .iter()
            .map(|id| {
                self.rows
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::UnknownExample(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.matrix.select(Axis(0), &idx))
    }
}

/// Everything a sweep reads: the dataset, captured shards, zero-shot logits
/// and SAE checkpoints referenced by name.
pub struct ExperimentData {
    pub dataset: Dataset,
    shards: HashMap<(u32, PromptMode), ActivationShard>,
    logits: HashMap<LogitsSource, HashMap<String, f64>>,
    saes: BTreeMap<String, SaeModel>,
    cache: Mutex<HashMap<String, Arc<PooledFeatures>>>,
}

impl ExperimentData {
    pub fn new(dataset: Dataset) -> Self {
        Self {
            dataset,
            shards: HashMap::new(),
            logits: HashMap::new(),
            saes: BTreeMap::new(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn add_shard(&mut self, shard: ActivationShard) -> Result<()> {
        shard.validate_against(&self.dataset)?;
        self.cache.lock().expect("cache lock").clear();
        self.shards.insert((shard.layer, shard.prompt_mode), shard);
        Ok(())
    }

    pub fn add_logits(&mut self, logits: &[YesNoLogits]) -> Result<()> {
        for l in logits {
            l.validate()?;
            if self.dataset.get(&l.example_id).is_none() {
                return Err(Error::UnknownExample(l.example_id.clone()));
            }
            let key = LogitsSource {
                prompt_mode: l.prompt_mode,
                few_shot_n: l.num_few_shot,
            };
            self.logits
                .entry(key)
                .or_default()
                .insert(l.example_id.clone(), l.diff());
        }
        Ok(())
    }

    pub fn add_sae(&mut self, name: impl Into<String>, model: SaeModel) {
        self.cache.lock().expect("cache lock").clear();
        self.saes.insert(name.into(), model);
    }

    pub fn has_logits(&self, source: LogitsSource) -> bool {
        self.logits.contains_key(&source)
    }

    pub fn shard(&self, layer: u32, mode: PromptMode) -> Result<&ActivationShard> {
        self.shards
            .get(&(layer, mode))
            .ok_or_else(|| Error::Invalid(format!("no shard for layer {layer} in mode {mode}")))
    }

    pub fn pooled(&self, pipeline: &FeaturePipeline) -> Result<Arc<PooledFeatures>> {
        let key = serde_json::to_string(&(
            pipeline.layer,
            pipeline.prompt_mode,
            pipeline.transform,
            pipeline.pooling,
            &pipeline.sae_ref,
            pipeline.sae_inference,
        ))?;
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let shard = self.shard(pipeline.layer, pipeline.prompt_mode)?;
        let sae = match (&pipeline.sae_ref, pipeline.transform) {
            (_, Transform::Raw) => None,
            (Some(name), _) => Some(
                self.saes
                    .get(name)
                    .ok_or_else(|| Error::Invalid(format!("unknown SAE {name:?}")))?,
            ),
            (None, _) => return Err(Error::Invariant("SAE transforms need an sae_ref".into())),
        };
        let matrix = pipeline.pooled_features(shard, sae)?;
        let rows = shard
            .example_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let pooled = Arc::new(PooledFeatures { matrix, rows });
        self.cache.lock().expect("cache lock").insert(key, pooled.clone());
        Ok(pooled)
    }

    /// Yes−no logit differences for `ids`.
    pub fn diffs(&self, source: LogitsSource, ids: &[String]) -> Result<Vec<f64>> {
        let table = self.logits.get(&source).ok_or_else(|| {
            Error::Invalid(format!(
                "no yes/no logits for mode {} with {} few-shot examples",
                source.prompt_mode, source.few_shot_n
            ))
        })?;
        ids.iter()
            .map(|id| table.get(id).copied().ok_or_else(|| Error::UnknownExample(id.clone())))
            .collect()
    }
}

/// A method after training, ready to score examples.
#[derive(Debug, Clone)]
pub enum FittedMethod {
    Probe(ProbeModel),
    ZeroShot(LogitsSource),
    Lat(FeaturePipeline, LatDirection),
    Stacked(StackedModel),
}

pub fn fit_method(method: &MethodSpec, data: &ExperimentData, train_ids: &[String], seed: u64) -> Result<FittedMethod> {
    let labels = || data.dataset.labels_for(train_ids);
    Ok(match &method.kind {
        MethodKind::Probe { pipeline, config } => {
            let x = data.pooled(pipeline)?.rows(train_ids)?;
            FittedMethod::Probe(fit_probe(pipeline.clone(), x.view(), &labels()?, config)?)
        }
        MethodKind::ZeroShot { logits } => FittedMethod::ZeroShot(*logits),
        MethodKind::Lat { pipeline, lat } => {
            let x = data.pooled(pipeline)?.rows(train_ids)?;
            let config = LatConfig {
                seed: rng::derive(seed, "lat"),
                ..lat.clone()
            };
            FittedMethod::Lat(pipeline.clone(), lat_fit(x.view(), Some(&labels()?), &config)?)
        }
        MethodKind::Stacked {
            pipeline,
            config,
            combiner,
            logits,
        } => {
            let labels = labels()?;
            let pooled = data.pooled(pipeline)?.rows(train_ids)?;
            let probe = fit_probe(pipeline.clone(), pooled.view(), &labels, config)?;
            let p = probe.score_pooled(pooled.view())?;
            let d = data.diffs(*logits, train_ids)?;
            FittedMethod::Stacked(train_stacked(&probe, &p, &d, &labels, combiner, *logits)?)
        }
    })
}

impl FittedMethod {
    pub fn score(&self, data: &ExperimentData, ids: &[String]) -> Result<Vec<f64>> {
        match self {
            FittedMethod::Probe(m) => m.score_pooled(data.pooled(&m.pipeline)?.rows(ids)?.view()),
            FittedMethod::ZeroShot(source) => data.diffs(*source, ids),
            FittedMethod::Lat(pipeline, lat) => lat_scores(lat, data.pooled(pipeline)?.rows(ids)?.view()),
            FittedMethod::Stacked(m) => {
                let x = m
                    .level1
                    .pipeline
                    .apply(data.pooled(&m.level1.pipeline)?.rows(ids)?.view())?;
                let p = probe_logits(&m.level1, x.view())?;
                let d = data.diffs(m.logits, ids)?;
                Ok(p.iter().zip(&d).map(|(&p, &d)| m.score(p, d)).collect())
            }
        }
    }

    pub fn auroc_on(&self, data: &ExperimentData, ids: &[String]) -> Result<f64> {
        let scores = self.score(data, ids)?;
        auroc(&scores, &data.dataset.labels_for(ids)?)
    }
}

struct Cell {
    method: MethodSpec,
    n_pos: usize,
    seed: u64,
}

fn full_test_ids(data: &ExperimentData) -> Result<Vec<String>> {
    let ids = data.dataset.split_ids(Split::Test);
    if ids.is_empty() {
        return Err(Error::Empty("test split"));
    }
    Ok(ids)
}

fn run_cells(data: &ExperimentData, cells: Vec<Cell>) -> Result<Vec<EvalReport>> {
    let test = full_test_ids(data)?;
    let mut reports = cells
        .par_iter()
        .map(|cell| {
            let train = make_balanced_train_subset(&data.dataset, cell.n_pos, cell.seed)?;
            let fitted = fit_method(&cell.method, data, &train, cell.seed)?;
            let a = fitted.auroc_on(data, &test)?;
            Ok(cell
                .method
                .base_report(&data.dataset.name, SplitKind::Full, cell.n_pos, cell.seed, a))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_reports(&mut reports);
    Ok(reports)
}

/// Scores an already fitted method on the full test split.
pub fn evaluate_on_test(
    method: &MethodSpec,
    fitted: &FittedMethod,
    data: &ExperimentData,
    n_pos: usize,
    seed: u64,
) -> Result<EvalReport> {
    let a = fitted.auroc_on(data, &full_test_ids(data)?)?;
    Ok(method.base_report(&data.dataset.name, SplitKind::Full, n_pos, seed, a))
}

/// Largest balanced training size the train split supports.
pub fn max_train_positives(dataset: &Dataset) -> usize {
    let (mut pos, mut neg) = (0, 0);
    for ex in dataset.examples.iter().filter(|e| e.split == Split::Train) {
        if ex.is_positive() {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    pos.min(neg)
}

/// One report per (size, seed); subsets for a seed are nested across sizes
/// and the test split never changes.
pub fn run_scaling_sweep(
    data: &ExperimentData,
    method: &MethodSpec,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let cells = sizes
        .iter()
        .flat_map(|&n_pos| {
            seeds.iter().map(move |&seed| Cell {
                method: method.clone(),
                n_pos,
                seed,
            })
        })
        .collect();
    run_cells(data, cells)
}

/// Trains on the tagged in-distribution train portion only and reports on
/// both the in- and out-of-distribution test portions.
pub fn run_generalization(
    data: &ExperimentData,
    tag: &str,
    method: &MethodSpec,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let split = split_by_tag(&data.dataset, tag)?;
    if split.test_in.is_empty() {
        return Err(Error::Empty("in-distribution test portion"));
    }
    if split.test_out.is_empty() {
        return Err(Error::Empty("out-of-distribution test portion"));
    }
    let cells: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let nested = cells
        .par_iter()
        .map(|&(n_pos, seed)| {
            let train = make_balanced_subset_of(&data.dataset, &split.train_in, n_pos, seed)?;
            let fitted = fit_method(method, data, &train, seed)?;
            let name = &data.dataset.name;
            Ok(vec![
                method.base_report(
                    name,
                    SplitKind::InDistribution,
                    n_pos,
                    seed,
                    fitted.auroc_on(data, &split.test_in)?,
                ),
                method.base_report(
                    name,
                    SplitKind::OutOfDistribution,
                    n_pos,
                    seed,
                    fitted.auroc_on(data, &split.test_out)?,
                ),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports: Vec<EvalReport> = nested.into_iter().flatten().collect();
    sort_reports(&mut reports);
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainPositives,
    Layer,
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "C")]
    C,
    FewShotN,
}

impl SweepAxis {
    fn integral(self) -> bool {
        !matches!(self, SweepAxis::C)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Optional second axis; every pair of values becomes a cell.
    #[serde(default)]
    pub grid_with: Option<GridAxis>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub method: MethodSpec,
    /// Training size for axes other than `train_positives`; defaults to the
    /// largest balanced subset.
    #[serde(default)]
    pub n_train_positives: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn axis_problems(axis: SweepAxis, values: &[f64], method: &MethodSpec, what: &str) -> Vec<String> {
    let mut out = Vec::new();
    if values.is_empty() {
        out.push(format!("{what}: axis values are empty"));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        out.push(format!("{what}: axis values must be strictly increasing"));
    }
    for &v in values {
        if !v.is_finite() || v < 0.0 {
            out.push(format!("{what}: value {v} is not a finite non-negative number"));
        } else if axis.integral() && v.fract() != 0.0 {
            out.push(format!("{what}: value {v} must be an integer"));
        }
    }
    let applies = match axis {
        SweepAxis::TrainPositives => method.trains(),
        SweepAxis::Layer => method.pipeline().is_some(),
        SweepAxis::Q => method.pipeline().is_some_and(|p| p.transform != Transform::Raw),
        SweepAxis::C => matches!(method.kind, MethodKind::Probe { .. } | MethodKind::Stacked { .. }),
        SweepAxis::FewShotN => method.logits_source().is_some(),
    };
    if !applies {
        out.push(format!(
            "{what}: axis {axis:?} does not apply to method {:?}",
            method.name
        ));
    }
    match axis {
        SweepAxis::TrainPositives | SweepAxis::Q if values.contains(&0.0) => {
            out.push(format!("{what}: {axis:?} values must be positive"));
        }
        SweepAxis::C if values.contains(&0.0) => out.push(format!("{what}: C values must be positive")),
        SweepAxis::FewShotN if values.iter().any(|&v| v > crate::MAX_FEW_SHOT as f64) => {
            out.push(format!("{what}: few_shot_n above {}", crate::MAX_FEW_SHOT));
        }
        _ => {}
    }
    out
}

impl SweepSpec {
    /// Every violation, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.method.problems();
        out.extend(axis_problems(self.axis, &self.values, &self.method, "sweep"));
        if let Some(g) = &self.grid_with {
            out.extend(axis_problems(g.axis, &g.values, &self.method, "grid_with"));
            if g.axis == self.axis {
                out.push("grid_with repeats the primary axis".to_string());
            }
        }
        if self.repeats == 0 {
            out.push("repeats must be at least 1".to_string());
        }
        if self.n_train_positives == Some(0) {
            out.push("n_train_positives must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(p.join("; ")))
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

/// Substitutes one axis value into a copy of `method`.
pub fn substitute(method: &MethodSpec, axis: SweepAxis, value: f64) -> Result<MethodSpec> {
    let mut m = method.clone();
    let missing = || Error::Invalid(format!("axis {axis:?} does not apply to method {:?}", method.name));
    match axis {
        SweepAxis::TrainPositives => {}
        SweepAxis::Layer => m.pipeline_mut().ok_or_else(missing)?.layer = value as u32,
        SweepAxis::Q => m.pipeline_mut().ok_or_else(missing)?.top_q = Some(value as usize),
        SweepAxis::C => match &mut m.kind {
            MethodKind::Probe { config, .. } | MethodKind::Stacked { config, .. } => config.c = value,
            _ => return Err(missing()),
        },
        SweepAxis::FewShotN => match &mut m.kind {
            MethodKind::ZeroShot { logits } | MethodKind::Stacked { logits, .. } => logits.few_shot_n = value as usize,
            _ => return Err(missing()),
        },
    }
    Ok(m)
}

/// Runs a one- or two-axis sweep with `repeats` seeds per cell.
pub fn run_sweep(data: &ExperimentData, spec: &SweepSpec) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    let default_n = spec
        .n_train_positives
        .unwrap_or_else(|| max_train_positives(&data.dataset));
    let primary: Vec<(SweepAxis, f64)> = spec.values.iter().map(|&v| (spec.axis, v)).collect();
    let secondary: Vec<Option<(SweepAxis, f64)>> = match &spec.grid_with {
        None => vec![None],
        Some(g) => g.values.iter().map(|&v| Some((g.axis, v))).collect(),
    };
    let mut cells = Vec::new();
    for &(a, v) in &primary {
        for extra in &secondary {
            let mut method = substitute(&spec.method, a, v)?;
            let mut n_pos = if a == SweepAxis::TrainPositives {
                v as usize
            } else {
                default_n
            };
            if let Some((a2, v2)) = *extra {
                method = substitute(&method, a2, v2)?;
                if a2 == SweepAxis::TrainPositives {
                    n_pos = v2 as usize;
                }
            }
            for seed in spec.seeds() {
                cells.push(Cell {
                    method: method.clone(),
                    n_pos,
                    seed,
                });
            }
        }
    }
    run_cells(data, cells)
}

fn single_axis(axis: SweepAxis, values: &[f64], method: &MethodSpec, n_pos: usize, seeds: &[u64]) -> SweepSpec {
    SweepSpec {
        axis,
        values: values.to_vec(),
        grid_with: None,
        repeats: seeds.len(),
        method: method.clone(),
        n_train_positives: Some(n_pos),
        seed: seeds.first().copied().unwrap_or(0),
    }
}

fn run_axis(data: &ExperimentData, spec: SweepSpec, seeds: &[u64]) -> Result<Vec<EvalReport>> {
    // explicit seed lists need not be contiguous
    if spec.seeds() == seeds {
        return run_sweep(data, &spec);
    }
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(run_sweep(
            data,
            &SweepSpec {
                repeats: 1,
                seed,
                ..spec.clone()
            },
        )?);
    }
    sort_reports(&mut out);
    Ok(out)
}

pub fn run_layer_sweep(
    data: &ExperimentData,
    method: &MethodSpec,
    layers: &[u32],
    n_pos: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let values: Vec<f64> = layers.iter().map(|&l| l as f64).collect();
    run_axis(
        data,
        single_axis(SweepAxis::Layer, &values, method, n_pos, seeds),
        seeds,
    )
}

pub fn run_q_sweep(
    data: &ExperimentData,
    method: &MethodSpec,
    qs: &[usize],
    n_pos: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let values: Vec<f64> = qs.iter().map(|&q| q as f64).collect();
    run_axis(data, single_axis(SweepAxis::Q, &values, method, n_pos, seeds), seeds)
}

pub fn run_c_sweep(
    data: &ExperimentData,
    method: &MethodSpec,
    cs: &[f64],
    n_pos: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    run_axis(data, single_axis(SweepAxis::C, cs, method, n_pos, seeds), seeds)
}

/// Needs logits captured for each few-shot count (see `prompt::capture`).
pub fn run_few_shot_sweep(
    data: &ExperimentData,
    method: &MethodSpec,
    counts: &[usize],
    n_pos: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let values: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    run_axis(
        data,
        single_axis(SweepAxis::FewShotN, &values, method, n_pos, seeds),
        seeds,
    )
}

/// Joint C × Q grid.
pub fn run_cq_grid(
    data: &ExperimentData,
    method: &MethodSpec,
    cs: &[f64],
    qs: &[usize],
    n_pos: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let mut spec = single_axis(SweepAxis::C, cs, method, n_pos, seeds);
    spec.grid_with = Some(GridAxis {
        axis: SweepAxis::Q,
        values: qs.iter().map(|&q| q as f64).collect(),
    });
    run_axis(data, spec, seeds)
}

/// Mean AUROC per distinct coordinate tuple, ignoring seeds.
pub fn mean_over_seeds(reports: &[EvalReport]) -> Vec<EvalReport> {
    let mut groups: Vec<(EvalReport, Vec<f64>)> = Vec::new();
    for r in reports {
        let key = EvalReport {
            seed: 0,
            auroc: 0.0,
            ..r.clone()
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.auroc),
            None => groups.push((key, vec![r.auroc])),
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| EvalReport {
            auroc: v.iter().sum::<f64>() / v.len() as f64,
            ..k
        })
        .collect()
}
