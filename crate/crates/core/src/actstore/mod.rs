//! Dataset and activation data model: manifests, shards, balanced
//! subsampling and subgroup bookkeeping.

pub mod container;
mod shard;
mod types;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

pub use shard::{read_shard, write_shard, ActivationShard, SHARD_MAGIC};
pub use types::{ChatMessage, Dataset, LabeledExample, Passage, PromptMode, Role, Split, YesNoLogits};

use crate::error::{Error, Result};
use crate::rng;

pub fn read_manifest(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_manifest(examples: &[LabeledExample], path: &Path) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.write_all(b"\n")?;
    }
    let bytes = buf.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    container::write_atomic(path, &bytes)
}

/// Samples `n_positives` positive and `n_positives` negative train ids.
///
/// Each class is shuffled once per seed and truncated, so subsets for the
/// same seed are nested across sizes. Positives come first in the result.
pub fn make_balanced_train_subset(dataset: &Dataset, n_positives: usize, seed: u64) -> Result<Vec<String>> {
    balanced_subset(
        dataset.examples.iter().filter(|ex| ex.split == Split::Train),
        n_positives,
        seed,
    )
}

/// Same as [`make_balanced_train_subset`] but drawing only from `pool`.
pub fn make_balanced_subset_of(
    dataset: &Dataset,
    pool: &[String],
    n_positives: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let index = dataset.index();
    let members = pool
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &dataset.examples[i])
                .ok_or_else(|| Error::UnknownExample(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    balanced_subset(members.into_iter(), n_positives, seed)
}

fn balanced_subset<'a>(
    examples: impl Iterator<Item = &'a LabeledExample>,
    n_positives: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let (mut pos, mut neg): (Vec<&LabeledExample>, Vec<&LabeledExample>) = examples.partition(|ex| ex.is_positive());
    if pos.len() < n_positives {
        return Err(Error::InsufficientExamples {
            class: "positive",
            needed: n_positives,
            available: pos.len(),
        });
    }
    if neg.len() < n_positives {
        return Err(Error::InsufficientExamples {
            class: "negative",
            needed: n_positives,
            available: neg.len(),
        });
    }
    pos.shuffle(&mut rng::stream(seed, "balanced-subset/positive"));
    neg.shuffle(&mut rng::stream(seed, "balanced-subset/negative"));
    Ok(pos[..n_positives]
        .iter()
        .chain(&neg[..n_positives])
        .map(|ex| ex.id.clone())
        .collect())
}

/// In-distribution / out-of-distribution partition of both splits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSplit {
    pub train_in: Vec<String>,
    pub train_out: Vec<String>,
    pub test_in: Vec<String>,
    pub test_out: Vec<String>,
}

/// `"english"` ↔ `"non_english"`, `"chat"` ↔ `"non_chat"`.
pub fn complement_tag(tag: &str) -> String {
    match tag.strip_prefix("non_") {
        Some(base) => base.to_string(),
        None => format!("non_{tag}"),
    }
}

pub fn split_by_tag(dataset: &Dataset, tag: &str) -> Result<TagSplit> {
    let other = complement_tag(tag);
    let mut out = TagSplit::default();
    for ex in &dataset.examples {
        let inside = if ex.tags.contains(tag) {
            true
        } else if ex.tags.contains(&other) {
            false
        } else {
            return Err(Error::MissingTag {
                id: ex.id.clone(),
                tag: tag.to_string(),
            });
        };
        let bucket = match (ex.split, inside) {
            (Split::Train, true) => &mut out.train_in,
            (Split::Train, false) => &mut out.train_out,
            (Split::Test, true) => &mut out.test_in,
            (Split::Test, false) => &mut out.test_out,
        };
        bucket.push(ex.id.clone());
    }
    Ok(out)
}

/// Assigns splits so roughly `test_fraction` of each label goes to test.
///
/// Examples sharing a `group` key move together; ungrouped examples are
/// their own group. Groups are stratified by the label of their first member.
pub fn assign_splits(examples: &mut [LabeledExample], test_fraction: f64, seed: u64) {
    let mut groups: BTreeMap<String, (u8, Vec<usize>)> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let key = ex.group.clone().unwrap_or_else(|| format!("\u{0}{}", ex.id));
        groups.entry(key).or_insert_with(|| (ex.label, Vec::new())).1.push(i);
    }
    for label in [0u8, 1] {
        let mut members: Vec<&Vec<usize>> = groups.values().filter(|(l, _)| *l == label).map(|(_, m)| m).collect();
        members.shuffle(&mut rng::stream(seed, &format!("assign-splits/{label}")));
        let total: usize = members.iter().map(|m| m.len()).sum();
        let target = (total as f64 * test_fraction).round() as usize;
        let mut in_test = 0;
        for m in members {
            let split = if in_test < target { Split::Test } else { Split::Train };
            if split == Split::Test {
                in_test += m.len();
            }
            for &i in m {
                examples[i].split = split;
            }
        }
    }
}
