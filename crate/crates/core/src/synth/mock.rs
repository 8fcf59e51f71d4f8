use std::collections::BTreeMap;

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::random_unit;
use crate::actstore::{ChatMessage, LabeledExample, PromptMode, Role, YesNoLogits};
use crate::error::{Error, Result};
use crate::prompt::{
    ActivationsRequest, ActivationsResponse, InferenceBackend, LogitsRequest, LogitsResponse, NO, YES,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConcept {
    pub name: String,
    pub positive_markers: Vec<String>,
    pub negative_markers: Vec<String>,
}

impl Default for MockConcept {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            name: "violence".into(),
            positive_markers: v(&["punches", "stabs", "attacks", "kicks"]),
            negative_markers: v(&["hugs", "greets", "thanks", "helps"]),
        }
    }
}

/// A deterministic stand-in for a chat model. Marker words write a concept
/// direction into their own token; when a prompt names the concept, the final
/// token of a prompt awaiting the assistant also receives that signal, and the
/// yes/no logits follow it with strength `fidelity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockModelSpec {
    pub d_model: usize,
    /// Layer → signal gain; only listed layers can be requested.
    pub layer_gains: BTreeMap<u32, f64>,
    pub gap: f64,
    pub noise_sigma: f64,
    /// Gain applied to the signal routed to the final token by a prompt.
    pub prompt_routing: f64,
    /// Standard deviation of a per-passage offset along a fixed nuisance direction.
    pub nuisance_sigma: f64,
    pub fidelity: f64,
    pub logit_noise: f64,
    pub concepts: Vec<MockConcept>,
    pub seed: u64,
}

impl Default for MockModelSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            layer_gains: [(4, 0.5), (8, 1.0), (12, 0.75)].into_iter().collect(),
            gap: 4.0,
            noise_sigma: 1.0,
            prompt_routing: 1.0,
            nuisance_sigma: 0.0,
            fidelity: 1.0,
            logit_noise: 1.0,
            concepts: vec![MockConcept::default()],
            seed: 0,
        }
    }
}

impl MockModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 {
            problems.push("d_model must be positive".to_string());
        }
        if self.layer_gains.is_empty() {
            problems.push("layer_gains must list at least one layer".into());
        }
        for (name, v) in [
            ("gap", self.gap),
            ("noise_sigma", self.noise_sigma),
            ("nuisance_sigma", self.nuisance_sigma),
            ("logit_noise", self.logit_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be a nonnegative number"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }
}

/// One header token per message (`<|role|>`), then word runs and single
/// punctuation characters.
pub fn tokenize(messages: &[ChatMessage]) -> Vec<String> {
    let mut out = Vec::new();
    for m in messages {
        out.push(format!("<|{}|>", m.role.as_str()));
        let mut word = String::new();
        for ch in m.content.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockModelSpec,
    directions: Vec<Array1<f64>>,
    nuisance: Array1<f64>,
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Result<Self> {
        spec.validate()?;
        let directions = spec
            .concepts
            .iter()
            .map(|c| {
                Array1::from(random_unit(
                    spec.d_model,
                    spec.seed,
                    &format!("mock/concept/{}", c.name),
                ))
            })
            .collect();
        let nuisance = Array1::from(random_unit(spec.d_model, spec.seed, "mock/nuisance"));
        Ok(Self {
            spec,
            directions,
            nuisance,
        })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    pub fn concept_direction(&self, name: &str) -> Option<&Array1<f64>> {
        self.spec
            .concepts
            .iter()
            .position(|c| c.name == name)
            .map(|i| &self.directions[i])
    }

    fn marker_sign(concept: &MockConcept, token: &str) -> f64 {
        let t = token.to_lowercase();
        if concept.positive_markers.contains(&t) {
            1.0
        } else if concept.negative_markers.contains(&t) {
            -1.0
        } else {
            0.0
        }
    }

    /// Concepts named in the final user message, with the sign of the markers it contains.
    fn prompted_signs(&self, messages: &[ChatMessage]) -> Vec<(usize, f64)> {
        let Some(query) = messages.iter().rev().find(|m| m.role == Role::User) else {
            return Vec::new();
        };
        let words = tokenize(std::slice::from_ref(query));
        self.spec
            .concepts
            .iter()
            .enumerate()
            .filter(|(_, c)| query.content.contains(&c.name))
            .map(|(i, c)| {
                let s: f64 = words.iter().map(|w| Self::marker_sign(c, w)).sum();
                (i, s.signum())
            })
            .collect()
    }

    fn awaits_assistant(messages: &[ChatMessage]) -> bool {
        matches!(messages.last(), Some(m) if m.role == Role::Assistant && m.content.is_empty())
    }

    fn nuisance_offset(&self, messages: &[ChatMessage]) -> f64 {
        if self.spec.nuisance_sigma == 0.0 {
            return 0.0;
        }
        let text = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let z: f64 = StandardNormal.sample(&mut rng::stream(self.spec.seed, &format!("mock/nuisance/{text}")));
        self.spec.nuisance_sigma * z
    }

    pub fn forward(&self, messages: &[ChatMessage], layers: &[u32]) -> Result<ActivationsResponse> {
        let tokens = tokenize(messages);
        let signs = if Self::awaits_assistant(messages) {
            self.prompted_signs(messages)
        } else {
            Vec::new()
        };
        let nuisance = self.nuisance_offset(messages);
        let last = tokens.len() - 1;
        let mut activations = BTreeMap::new();
        for &layer in layers {
            let gain = *self
                .spec
                .layer_gains
                .get(&layer)
                .ok_or_else(|| Error::Protocol(format!("mock model has no layer {layer}")))?;
            let mut rows = Vec::with_capacity(tokens.len());
            for (pos, tok) in tokens.iter().enumerate() {
                let mut rng = rng::stream(self.spec.seed, &format!("mock/noise/{layer}/{pos}/{tok}"));
                let mut v: Array1<f64> = (0..self.spec.d_model)
                    .map(|_| self.spec.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
                    .into();
                for (c, dir) in self.spec.concepts.iter().zip(&self.directions) {
                    let s = Self::marker_sign(c, tok);
                    if s != 0.0 {
                        v.scaled_add(s * self.spec.gap / 2.0 * gain, dir);
                    }
                }
                if pos == last {
                    for &(c, s) in &signs {
                        v.scaled_add(
                            s * self.spec.gap / 2.0 * gain * self.spec.prompt_routing,
                            &self.directions[c],
                        );
                    }
                }
                v.scaled_add(nuisance, &self.nuisance);
                rows.push(v.iter().map(|&x| x as f32).collect());
            }
            activations.insert(layer.to_string(), rows);
        }
        Ok(ActivationsResponse { tokens, activations })
    }

    /// Yes-minus-No logit difference for a prompt.
    pub fn yes_no_diff(&self, messages: &[ChatMessage]) -> f64 {
        let s: f64 = self
            .prompted_signs(messages)
            .iter()
            .map(|&(_, s)| s)
            .sum::<f64>()
            .clamp(-1.0, 1.0);
        let transcript = serde_json::to_string(messages).expect("messages serialize");
        let z: f64 = StandardNormal.sample(&mut rng::stream(self.spec.seed, &format!("mock/logits/{transcript}")));
        self.spec.fidelity * s + self.spec.logit_noise * z
    }
}

impl InferenceBackend for MockModel {
    fn activations(&self, request: &ActivationsRequest) -> Result<ActivationsResponse> {
        if request.messages.is_empty() {
            return Err(Error::Protocol("empty message list".into()));
        }
        self.forward(&request.messages, &request.layers)
    }

    fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        if request.messages.is_empty() {
            return Err(Error::Protocol("empty message list".into()));
        }
        let diff = self.yes_no_diff(&request.messages);
        let mut logits = BTreeMap::new();
        for t in &request.targets {
            let v = match t.as_str() {
                YES => diff / 2.0,
                NO => -diff / 2.0,
                _ => 0.0,
            };
            logits.insert(t.clone(), v as f32);
        }
        Ok(LogitsResponse { logits })
    }
}

/// Label-driven zero-shot logits: `yes − no = fidelity·(2·label − 1) + N(0, 1)`.
pub fn mock_yes_no(example: &LabeledExample, concept: &str, fidelity: f64, seed: u64) -> YesNoLogits {
    mock_yes_no_with_noise(example, concept, fidelity, 1.0, seed)
}

pub fn mock_yes_no_with_noise(
    example: &LabeledExample,
    concept: &str,
    fidelity: f64,
    noise_std: f64,
    seed: u64,
) -> YesNoLogits {
    let z: f64 = StandardNormal.sample(&mut rng::stream(seed, &format!("mock-yes-no/{concept}/{}", example.id)));
    let diff = fidelity * (2.0 * example.label as f64 - 1.0) + noise_std * z;
    YesNoLogits {
        example_id: example.id.clone(),
        yes_logit: diff / 2.0,
        no_logit: -diff / 2.0,
        prompt_mode: PromptMode::PrefixSuffix,
        num_few_shot: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actstore::Passage;
    use crate::eval::auroc;
    use crate::prompt::{render, Fetcher, PromptConfig, PromptTemplate};
    use crate::synth::{gen_passage_dataset, PassageDatasetSpec};

    #[test]
    fn tokenizer_examples() {
        let msgs = [ChatMessage::user("Bob punches Joe."), ChatMessage::assistant("")];
        assert_eq!(
            tokenize(&msgs),
            ["<|user|>", "Bob", "punches", "Joe", ".", "<|assistant|>"]
        );
    }

    fn examples(n: usize) -> Vec<LabeledExample> {
        let ds = gen_passage_dataset(&PassageDatasetSpec {
            n_per_class: n,
            ..PassageDatasetSpec::default()
        })
        .unwrap();
        ds.examples
    }

    #[test]
    fn yes_no_auroc_tracks_fidelity() {
        let ex = examples(1000);
        let labels: Vec<u8> = ex.iter().map(|e| e.label).collect();
        let score = |f: f64, noise: f64| {
            let s: Vec<f64> = ex
                .iter()
                .map(|e| mock_yes_no_with_noise(e, "violence", f, noise, 3).diff())
                .collect();
            auroc(&s, &labels).unwrap()
        };
        assert!((score(0.0, 1.0) - 0.5).abs() < 0.05);
        assert!(score(5.0, 1.0) > 0.99);
        assert_eq!(score(0.5, 0.0), 1.0);
    }

    #[test]
    fn closed_form_overlap() {
        // diff ~ N(±f, 1) ⇒ AUROC = Φ(2f/√2) = Φ(√2·f)
        use statrs::distribution::{ContinuousCDF, Normal as SNormal};
        let ex = examples(4000);
        let labels: Vec<u8> = ex.iter().map(|e| e.label).collect();
        let f = 0.5;
        let s: Vec<f64> = ex.iter().map(|e| mock_yes_no(e, "violence", f, 9).diff()).collect();
        let want = SNormal::new(0.0, 1.0).unwrap().cdf(2f64.sqrt() * f);
        assert!((auroc(&s, &labels).unwrap() - want).abs() < 0.02);
    }

    #[test]
    fn prompting_routes_signal_to_last_token() {
        let model = MockModel::new(MockModelSpec {
            noise_sigma: 0.0,
            ..MockModelSpec::default()
        })
        .unwrap();
        let dir = model.concept_direction("violence").unwrap().clone();
        let passage = Passage::Text("Bob punches Joe".into());
        let cfg = PromptConfig::default();
        let prompted = render(
            &PromptTemplate::new(PromptMode::PrefixSuffix, "violence"),
            &passage,
            &cfg,
        )
        .unwrap();
        let plain = render(&PromptTemplate::new(PromptMode::None, ""), &passage, &cfg).unwrap();
        let fetch = Fetcher::new(&model);
        let p = fetch.fetch(&prompted, &[8], true).unwrap();
        let u = fetch.fetch(&plain, &[8], false).unwrap();
        let proj = |m: &ndarray::Array2<f32>, i: usize| m.row(i).mapv(f64::from).dot(&dir);
        let pm = &p.activations[&8];
        let um = &u.activations[&8];
        assert!((proj(pm, p.probe_token_index()) - 2.0).abs() < 1e-5);
        assert!(proj(um, u.probe_token_index()).abs() < 1e-5);
        // the marker token itself carries the signal in both
        let marker = u.tokens.iter().position(|t| t == "punches").unwrap();
        assert!((proj(um, marker) - 2.0).abs() < 1e-5);
        assert!(model.forward(&plain.messages, &[99]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = MockModel::new(MockModelSpec::default()).unwrap();
        let msgs = [ChatMessage::user("a b c")];
        assert_eq!(
            model.forward(&msgs, &[4, 8]).unwrap(),
            model.forward(&msgs, &[4, 8]).unwrap()
        );
    }
}
