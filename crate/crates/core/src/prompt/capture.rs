use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fetch::{Fetcher, InferenceBackend};
use super::template::{render, PromptConfig, PromptTemplate};
use crate::actstore::{ActivationShard, Dataset, LabeledExample, Passage, PromptMode, Split, YesNoLogits};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSpec {
    pub prompt_mode: PromptMode,
    pub layers: Vec<u32>,
    #[serde(default)]
    pub few_shot_n: usize,
    #[serde(default)]
    pub want_logits: bool,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CaptureOutput {
    pub shards: BTreeMap<u32, ActivationShard>,
    pub logits: Vec<YesNoLogits>,
}

/// Demonstrations for `query`: drawn from the train split with labels
/// alternating, a fixed seeded order, and the query itself never included.
pub fn few_shot_for(dataset: &Dataset, n: usize, seed: u64, query: &str) -> Result<Vec<(Passage, u8)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut pools: [Vec<&LabeledExample>; 2] = [Vec::new(), Vec::new()];
    for ex in dataset
        .examples
        .iter()
        .filter(|e| e.split == Split::Train && e.id != query)
    {
        pools[ex.label as usize].push(ex);
    }
    for (label, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng::stream(seed, &format!("few-shot/{label}")));
    }
    let mut out = Vec::with_capacity(n);
    let (mut i0, mut i1) = (0, 0);
    for k in 0..n {
        // start with a positive, then alternate
        let want = if k % 2 == 0 { 1 } else { 0 };
        let ex = if want == 1 && i1 < pools[1].len() {
            i1 += 1;
            pools[1][i1 - 1]
        } else if i0 < pools[0].len() {
            i0 += 1;
            pools[0][i0 - 1]
        } else if i1 < pools[1].len() {
            i1 += 1;
            pools[1][i1 - 1]
        } else {
            return Err(Error::InsufficientExamples {
                class: "few-shot",
                needed: n,
                available: k,
            });
        };
        out.push((ex.passage.clone(), ex.label));
    }
    Ok(out)
}

/// Renders every example (or the listed ones), queries the backend and
/// assembles one shard per layer plus optional yes/no logits.
pub fn capture<B: InferenceBackend>(
    dataset: &Dataset,
    fetcher: &Fetcher<B>,
    spec: &CaptureSpec,
    ids: Option<&[String]>,
) -> Result<CaptureOutput> {
    if spec.layers.is_empty() {
        return Err(Error::Invalid("capture needs at least one layer".into()));
    }
    if spec.prompt_mode == PromptMode::None && spec.want_logits {
        return Err(Error::Template("zero-shot logits need a prompted template".into()));
    }
    let index = dataset.index();
    let selected: Vec<&LabeledExample> = match ids {
        None => dataset.examples.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &dataset.examples[i])
                    .ok_or_else(|| Error::UnknownExample(id.clone()))
            })
            .collect::<Result<_>>()?,
    };
    let results: Vec<_> = selected
        .par_iter()
        .map(|ex| {
            let shots = few_shot_for(dataset, spec.few_shot_n, spec.seed, &ex.id)?;
            let template = PromptTemplate::new(spec.prompt_mode, dataset.task_concept.clone()).with_few_shot(shots);
            let rendered = render(&template, &ex.passage, &spec.prompt)?;
            fetcher.fetch(&rendered, &spec.layers, spec.want_logits)
        })
        .collect::<Result<_>>()?;

    let mut shards = BTreeMap::new();
    let mut logits = Vec::new();
    for (ex, result) in selected.iter().zip(results) {
        for (layer, m) in result.activations {
            shards
                .entry(layer)
                .or_insert_with(|| ActivationShard::new(dataset.name.clone(), layer, spec.prompt_mode, m.ncols()))
                .push(ex.id.clone(), m);
        }
        if spec.want_logits {
            let l = YesNoLogits {
                example_id: ex.id.clone(),
                yes_logit: result.yes_logit.ok_or(Error::MissingLogits)?,
                no_logit: result.no_logit.ok_or(Error::MissingLogits)?,
                prompt_mode: spec.prompt_mode,
                num_few_shot: spec.few_shot_n,
            };
            l.validate()?;
            logits.push(l);
        }
    }
    for shard in shards.values() {
        shard.validate()?;
    }
    Ok(CaptureOutput { shards, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_passage_dataset, MockModel, MockModelSpec, PassageDatasetSpec};

    #[test]
    fn capture_builds_aligned_shards() {
        let ds = gen_passage_dataset(&PassageDatasetSpec {
            n_per_class: 5,
            ..PassageDatasetSpec::default()
        })
        .unwrap();
        let model = MockModel::new(MockModelSpec::default()).unwrap();
        let fetcher = Fetcher::new(&model);
        let spec = CaptureSpec {
            prompt_mode: PromptMode::SuffixOnly,
            layers: vec![8, 4],
            few_shot_n: 2,
            want_logits: true,
            prompt: PromptConfig::default(),
            seed: 1,
        };
        let out = capture(&ds, &fetcher, &spec, None).unwrap();
        assert_eq!(out.shards.keys().copied().collect::<Vec<_>>(), vec![4, 8]);
        for shard in out.shards.values() {
            shard.validate_against(&ds).unwrap();
            assert_eq!(shard.len(), 10);
        }
        assert_eq!(out.logits.len(), 10);
        assert!(out.logits.iter().all(|l| l.num_few_shot == 2));
        let again = capture(&ds, &fetcher, &spec, None).unwrap();
        assert!(out.shards[&8].bit_eq(&again.shards[&8]));
    }

    #[test]
    fn few_shot_excludes_query_and_alternates() {
        let ds = gen_passage_dataset(&PassageDatasetSpec {
            n_per_class: 10,
            ..PassageDatasetSpec::default()
        })
        .unwrap();
        let q = ds.examples[0].id.clone();
        let shots = few_shot_for(&ds, 4, 0, &q).unwrap();
        assert_eq!(shots.iter().map(|s| s.1).collect::<Vec<_>>(), vec![1, 0, 1, 0]);
        assert!(shots.iter().all(|(p, _)| *p != ds.examples[0].passage));
        assert!(few_shot_for(&ds, 50, 0, &q).is_err());
    }
}
