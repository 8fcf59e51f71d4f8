//! Synthetic datasets, activations and a mock model with known ground truth.

mod mock;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use mock::{mock_yes_no, mock_yes_no_with_noise, tokenize, MockConcept, MockModel, MockModelSpec};

use crate::actstore::{
    assign_splits, complement_tag, ActivationShard, Dataset, LabeledExample, Passage, PromptMode, Split,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalTokenPolicy {
    #[default]
    LastOnly,
    RandomMiddleToken,
    AllTokens,
}

/// Class signal `±gap/2 · direction` on top of isotropic Gaussian token noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedLinearSpec {
    pub d_model: usize,
    pub direction: Vec<f64>,
    pub gap: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub signal_token_policy: SignalTokenPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_linear_name")]
    pub dataset_name: String,
    #[serde(default = "default_concept")]
    pub concept: String,
    #[serde(default)]
    pub layer: u32,
    #[serde(default = "default_mode")]
    pub prompt_mode: PromptMode,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_linear_name() -> String {
    "planted_linear".into()
}
fn default_concept() -> String {
    "violence".into()
}
fn default_mode() -> PromptMode {
    PromptMode::None
}
fn default_test_fraction() -> f64 {
    0.5
}

impl PlantedLinearSpec {
    /// Signal along the standard basis vector `e_axis`.
    pub fn axis(d_model: usize, axis: usize, gap: f64, noise_sigma: f64, policy: SignalTokenPolicy, seed: u64) -> Self {
        let mut direction = vec![0.0; d_model];
        if axis < d_model {
            direction[axis] = 1.0;
        }
        Self {
            d_model,
            direction,
            gap,
            noise_sigma,
            signal_token_policy: policy,
            seed,
            dataset_name: default_linear_name(),
            concept: default_concept(),
            layer: 0,
            prompt_mode: PromptMode::None,
            test_fraction: default_test_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.direction.len() != self.d_model || self.d_model == 0 {
            problems.push(format!(
                "direction has length {} for d_model {}",
                self.direction.len(),
                self.d_model
            ));
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            problems.push(format!("direction norm is {norm}, expected 1"));
        }
        if !(self.gap >= 0.0) || !(self.noise_sigma >= 0.0) {
            problems.push("gap and noise_sigma must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            problems.push("test_fraction must be in [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }
}

/// Random unit vector drawn from `seed`.
pub fn random_unit(d: usize, seed: u64, label: &str) -> Vec<f64> {
    let mut rng = rng::stream(seed, label);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn synthetic_examples(name: &str, n_examples: usize, test_fraction: f64, seed: u64) -> Vec<LabeledExample> {
    let mut examples: Vec<LabeledExample> = (0..n_examples)
        .map(|i| LabeledExample {
            id: format!("{name}-{i:06}"),
            passage: Passage::Text(format!("synthetic passage {i}")),
            label: (i % 2 == 0) as u8,
            tags: BTreeSet::new(),
            split: Split::Train,
            group: None,
        })
        .collect();
    assign_splits(&mut examples, test_fraction, rng::derive(seed, "splits"));
    examples
}

/// Balanced labelled examples with planted activations; labels alternate
/// starting with a positive.
pub fn gen_linear_dataset(
    spec: &PlantedLinearSpec,
    n_examples: usize,
    tokens_per_example: usize,
) -> Result<(Dataset, ActivationShard)> {
    spec.validate()?;
    if n_examples < 2 || tokens_per_example == 0 {
        return Err(Error::Invalid("need at least two examples and one token each".into()));
    }
    let examples = synthetic_examples(&spec.dataset_name, n_examples, spec.test_fraction, spec.seed);
    let mut shard = ActivationShard::new(spec.dataset_name.clone(), spec.layer, spec.prompt_mode, spec.d_model);
    let dir = Array1::from(spec.direction.clone());
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, &format!("linear/{i}"));
        let mut m = Array2::from_shape_simple_fn((tokens_per_example, spec.d_model), || noise.sample(&mut rng));
        let sign = if ex.label == 1 { 0.5 } else { -0.5 };
        let t = tokens_per_example;
        let rows: Vec<usize> = match spec.signal_token_policy {
            SignalTokenPolicy::LastOnly => vec![t - 1],
            SignalTokenPolicy::AllTokens => (0..t).collect(),
            SignalTokenPolicy::RandomMiddleToken => vec![if t > 1 { rng.gen_range(0..t - 1) } else { 0 }],
        };
        for r in rows {
            m.row_mut(r).scaled_add(sign * spec.gap, &dir);
        }
        shard.push(ex.id.clone(), m.mapv(|v| v as f32));
    }
    let dataset = Dataset::new(spec.dataset_name.clone(), spec.concept.clone(), examples)?;
    shard.validate_against(&dataset)?;
    Ok((dataset, shard))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedDictionarySpec {
    pub d_model: usize,
    pub n_atoms: usize,
    /// `d_model × n_atoms` with unit columns; drawn from the seed when absent.
    #[serde(default)]
    pub atoms: Option<Vec<Vec<f64>>>,
    pub sparsity: usize,
    pub coeff_min: f64,
    pub coeff_max: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedDictionarySpec {
    pub fn new(d_model: usize, n_atoms: usize, sparsity: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_atoms,
            atoms: None,
            sparsity,
            coeff_min: 1.0,
            coeff_max: 2.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_atoms == 0 {
            return Err(Error::Invalid("d_model and n_atoms must be positive".into()));
        }
        if self.sparsity > self.n_atoms {
            return Err(Error::Invalid(format!(
                "sparsity {} exceeds n_atoms {}",
                self.sparsity, self.n_atoms
            )));
        }
        if !(0.0 < self.coeff_min && self.coeff_min <= self.coeff_max) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid(
                "need 0 < coeff_min ≤ coeff_max and noise_sigma ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// Atom matrix with unit-norm columns.
    pub fn atom_matrix(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let mut a = match &self.atoms {
            Some(cols) => {
                if cols.len() != self.n_atoms || cols.iter().any(|c| c.len() != self.d_model) {
                    return Err(Error::Invalid("atoms must be n_atoms columns of length d_model".into()));
                }
                Array2::from_shape_fn((self.d_model, self.n_atoms), |(i, j)| cols[j][i])
            }
            None => {
                let mut rng = rng::stream(self.seed, "dictionary/atoms");
                Array2::from_shape_simple_fn((self.d_model, self.n_atoms), || StandardNormal.sample(&mut rng))
            }
        };
        for mut col in a.columns_mut() {
            let n = col.dot(&col).sqrt();
            if n == 0.0 {
                return Err(Error::Invalid("zero atom".into()));
            }
            col /= n;
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryTokens {
    /// `n_tokens × d_model`
    pub tokens: Array2<f64>,
    /// `d_model × n_atoms`
    pub atoms: Array2<f64>,
    /// Ground-truth `(atom, coefficient)` pairs per token.
    pub codes: Vec<Vec<(usize, f64)>>,
}

impl DictionaryTokens {
    /// Mean squared reconstruction error of the true codes.
    pub fn oracle_mse(&self) -> f64 {
        let mut total = 0.0;
        for (row, code) in self.tokens.rows().into_iter().zip(&self.codes) {
            let mut r = row.to_owned();
            for &(a, c) in code {
                r.scaled_add(-c, &self.atoms.column(a));
            }
            total += r.dot(&r);
        }
        total / self.tokens.nrows() as f64
    }
}

fn sample_code(spec: &PlantedDictionarySpec, rng: &mut impl Rng, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let pool: Vec<usize> = (0..spec.n_atoms).filter(|&a| Some(a) != exclude).collect();
    let mut chosen: Vec<usize> = pool
        .choose_multiple(rng, spec.sparsity.min(pool.len()))
        .copied()
        .collect();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|a| (a, rng.gen_range(spec.coeff_min..=spec.coeff_max)))
        .collect()
}

fn render_code(atoms: &Array2<f64>, code: &[(usize, f64)], noise: f64, rng: &mut impl Rng) -> Array1<f64> {
    let mut x = Array1::zeros(atoms.nrows());
    for &(a, c) in code {
        x.scaled_add(c, &atoms.column(a));
    }
    if noise > 0.0 {
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
    }
    x
}

/// Tokens that are sparse positive combinations of planted atoms.
pub fn gen_dictionary_tokens(spec: &PlantedDictionarySpec, n_tokens: usize) -> Result<DictionaryTokens> {
    let atoms = spec.atom_matrix()?;
    let mut rng = rng::stream(spec.seed, "dictionary/tokens");
    let mut tokens = Array2::zeros((n_tokens, spec.d_model));
    let mut codes = Vec::with_capacity(n_tokens);
    for mut row in tokens.rows_mut() {
        let code = sample_code(spec, &mut rng, None);
        row.assign(&render_code(&atoms, &code, spec.noise_sigma, &mut rng));
        codes.push(code);
    }
    Ok(DictionaryTokens { tokens, atoms, codes })
}

/// Labelled dataset in which positives carry `concept_atom` (coefficient
/// `concept_coeff`) on one random non-final token. Background tokens never
/// use the concept atom.
pub fn gen_dictionary_dataset(
    spec: &PlantedDictionarySpec,
    n_examples: usize,
    tokens_per_example: usize,
    concept_atom: usize,
    concept_coeff: f64,
) -> Result<(Dataset, ActivationShard, Array2<f64>)> {
    let atoms = spec.atom_matrix()?;
    if concept_atom >= spec.n_atoms || tokens_per_example < 2 || n_examples < 2 {
        return Err(Error::Invalid("bad concept atom or sizes".into()));
    }
    let name = "planted_dictionary";
    let examples = synthetic_examples(name, n_examples, 0.5, spec.seed);
    let mut shard = ActivationShard::new(name, 0, PromptMode::None, spec.d_model);
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, &format!("dictionary/example/{i}"));
        let mut m = Array2::zeros((tokens_per_example, spec.d_model));
        for mut row in m.rows_mut() {
            let code = sample_code(spec, &mut rng, Some(concept_atom));
            row.assign(&render_code(&atoms, &code, spec.noise_sigma, &mut rng));
        }
        if ex.label == 1 {
            let t = rng.gen_range(0..tokens_per_example - 1);
            m.row_mut(t).scaled_add(concept_coeff, &atoms.column(concept_atom));
        }
        shard.push(ex.id.clone(), m.mapv(|v| v as f32));
    }
    let dataset = Dataset::new(name, "planted concept", examples)?;
    Ok((dataset, shard, atoms))
}

/// Greedy one-to-one matching of true atoms to learned decoder columns by
/// cosine similarity; returns the matched cosine for each true atom.
pub fn atom_recovery(true_atoms: ArrayView2<f64>, learned: ArrayView2<f64>) -> Vec<f64> {
    let unit = |m: ArrayView2<f64>| {
        let mut m = m.to_owned();
        for mut c in m.columns_mut() {
            let n = c.dot(&c).sqrt();
            if n > 0.0 {
                c /= n;
            }
        }
        m
    };
    let t = unit(true_atoms);
    let l = unit(learned);
    let sims = t.t().dot(&l);
    let mut pairs: Vec<(f64, usize, usize)> = sims.indexed_iter().map(|((i, j), &s)| (s, i, j)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![f64::NEG_INFINITY; t.ncols()];
    let mut used_t = vec![false; t.ncols()];
    let mut used_l = vec![false; l.ncols()];
    for (s, i, j) in pairs {
        if !used_t[i] && !used_l[j] {
            used_t[i] = true;
            used_l[j] = true;
            out[i] = s;
        }
    }
    out
}

/// Text passages whose label is carried by one marker word at a random
/// non-final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassageDatasetSpec {
    pub name: String,
    pub concept: String,
    pub n_per_class: usize,
    pub words_per_passage: usize,
    pub positive_markers: Vec<String>,
    pub negative_markers: Vec<String>,
    pub test_fraction: f64,
    /// Tag carried by this fraction of examples; the rest carry its complement
    /// and use a disjoint filler vocabulary.
    pub tag: Option<String>,
    pub tag_fraction: f64,
    pub seed: u64,
}

impl Default for PassageDatasetSpec {
    fn default() -> Self {
        let concept = MockConcept::default();
        Self {
            name: "synthetic_passages".into(),
            concept: concept.name,
            n_per_class: 100,
            words_per_passage: 12,
            positive_markers: concept.positive_markers,
            negative_markers: concept.negative_markers,
            test_fraction: 0.5,
            tag: None,
            tag_fraction: 0.6,
            seed: 0,
        }
    }
}

const FILLER_IN: &[&str] = &[
    "the", "a", "river", "morning", "table", "window", "quiet", "green", "walked", "later", "garden", "letter",
    "small", "city", "across", "bright", "paper", "song", "under", "yellow", "market", "slowly", "bread", "train",
    "cloud", "corner", "friend", "stone", "summer", "lamp", "door", "field",
];
const FILLER_OUT: &[&str] = &[
    "le", "la", "maison", "chemin", "soleil", "jardin", "rue", "nuit", "livre", "porte", "vent", "fleur", "mer",
    "arbre", "pain", "ville", "etoile", "montagne", "ciel", "route", "pierre", "lune", "champ", "riviere",
];

pub fn gen_passage_dataset(spec: &PassageDatasetSpec) -> Result<Dataset> {
    if spec.words_per_passage < 3 || spec.n_per_class == 0 {
        return Err(Error::Invalid(
            "need at least 3 words per passage and one example per class".into(),
        ));
    }
    if spec.positive_markers.is_empty() || spec.negative_markers.is_empty() {
        return Err(Error::Invalid("marker lists must be nonempty".into()));
    }
    let mut rng = rng::stream(spec.seed, "passages");
    let n = 2 * spec.n_per_class;
    let n_tagged = (n as f64 * spec.tag_fraction).round() as usize;
    let mut tagged: Vec<bool> = (0..n).map(|i| i < n_tagged).collect();
    tagged.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(n);
    for (i, &is_tagged) in tagged.iter().enumerate() {
        let label = (i % 2 == 0) as u8;
        let in_dist = spec.tag.is_none() || is_tagged;
        let filler = if in_dist { FILLER_IN } else { FILLER_OUT };
        let mut words: Vec<String> = (0..spec.words_per_passage)
            .map(|_| filler.choose(&mut rng).expect("nonempty").to_string())
            .collect();
        let markers = if label == 1 {
            &spec.positive_markers
        } else {
            &spec.negative_markers
        };
        let pos = rng.gen_range(1..spec.words_per_passage - 1);
        words[pos] = markers.choose(&mut rng).expect("nonempty").clone();
        let mut tags = BTreeSet::new();
        if let Some(tag) = &spec.tag {
            tags.insert(if in_dist { tag.clone() } else { complement_tag(tag) });
        }
        examples.push(LabeledExample {
            id: format!("{}-{i:06}", spec.name),
            passage: Passage::Text(words.join(" ") + "."),
            label,
            tags,
            split: Split::Train,
            group: None,
        });
    }
    assign_splits(
        &mut examples,
        spec.test_fraction,
        rng::derive(spec.seed, "passage-splits"),
    );
    Dataset::new(spec.name.clone(), spec.concept.clone(), examples)
}

/// Mean of the pooled rows; handy for quick checks on shards.
pub fn token_mean(shard: &ActivationShard) -> Option<Array1<f64>> {
    let rows: Vec<Array1<f64>> = shard
        .matrices
        .iter()
        .filter(|m| m.nrows() > 0)
        .map(|m| m.mapv(f64::from).mean_axis(Axis(0)).expect("nonempty"))
        .collect();
    if rows.is_empty() {
        return None;
    }
    let mut acc = Array1::zeros(shard.d_model);
    for r in &rows {
        acc += r;
    }
    Some(acc / rows.len() as f64)
}
