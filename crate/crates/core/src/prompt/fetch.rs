use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::RenderedPrompt;
use crate::actstore::{container, ChatMessage};
use crate::error::{Error, Result};

pub const YES: &str = "Yes";
pub const NO: &str = "No";

/// `POST /v1/activations` request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationsRequest {
    pub messages: Vec<ChatMessage>,
    pub layers: Vec<u32>,
}

/// `POST /v1/activations` response body; activations are keyed by the layer number as a string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationsResponse {
    pub tokens: Vec<String>,
    pub activations: BTreeMap<String, Vec<Vec<f32>>>,
}

/// `POST /v1/logits` request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsRequest {
    pub messages: Vec<ChatMessage>,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: BTreeMap<String, f32>,
}

/// Anything that speaks the activations/logits protocol.
pub trait InferenceBackend: Send + Sync {
    fn activations(&self, request: &ActivationsRequest) -> Result<ActivationsResponse>;
    fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse>;
}

impl<B: InferenceBackend + ?Sized> InferenceBackend for &B {
    fn activations(&self, request: &ActivationsRequest) -> Result<ActivationsResponse> {
        (**self).activations(request)
    }
    fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        (**self).logits(request)
    }
}

impl<B: InferenceBackend + ?Sized> InferenceBackend for std::sync::Arc<B> {
    fn activations(&self, request: &ActivationsRequest) -> Result<ActivationsResponse> {
        (**self).activations(request)
    }
    fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        (**self).logits(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub tokens: Vec<String>,
    pub activations: BTreeMap<u32, Array2<f32>>,
    pub yes_logit: Option<f64>,
    pub no_logit: Option<f64>,
}

impl InferenceResult {
    /// The probed position: the final prompt token.
    pub fn probe_token_index(&self) -> usize {
        self.tokens.len() - 1
    }

    fn from_wire(layers: &[u32], acts: ActivationsResponse, logits: Option<LogitsResponse>) -> Result<Self> {
        if acts.tokens.is_empty() {
            return Err(Error::Protocol("response contains no tokens".into()));
        }
        let mut activations = BTreeMap::new();
        let mut width = None;
        for (key, rows) in acts.activations {
            let layer: u32 = key
                .parse()
                .map_err(|_| Error::Protocol(format!("layer key {key:?} is not an integer")))?;
            if !layers.contains(&layer) {
                return Err(Error::Protocol(format!("unrequested layer {layer} in response")));
            }
            if rows.len() != acts.tokens.len() {
                return Err(Error::Protocol(format!(
                    "layer {layer} has {} rows for {} tokens",
                    rows.len(),
                    acts.tokens.len()
                )));
            }
            let d = *width.get_or_insert(rows[0].len());
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Protocol(format!("layer {layer} has ragged or empty rows")));
            }
            let flat: Vec<f32> = rows.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((acts.tokens.len(), d), flat).expect("validated shape");
            activations.insert(layer, m);
        }
        if let Some(missing) = layers.iter().find(|l| !activations.contains_key(l)) {
            return Err(Error::Protocol(format!(
                "requested layer {missing} missing from response"
            )));
        }
        let (yes_logit, no_logit) = match logits {
            None => (None, None),
            Some(resp) => {
                let get = |t: &str| {
                    resp.logits
                        .get(t)
                        .copied()
                        .filter(|v| v.is_finite())
                        .map(f64::from)
                        .ok_or_else(|| Error::Protocol(format!("logit for {t:?} missing or non-finite")))
                };
                (Some(get(YES)?), Some(get(NO)?))
            }
        };
        Ok(Self {
            tokens: acts.tokens,
            activations,
            yes_logit,
            no_logit,
        })
    }
}

/// Yes-logit minus No-logit.
pub fn zero_shot_score(result: &InferenceResult) -> Result<f64> {
    match (result.yes_logit, result.no_logit) {
        (Some(y), Some(n)) => Ok(y - n),
        _ => Err(Error::MissingLogits),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    activations: ActivationsResponse,
    logits: Option<LogitsResponse>,
}

/// Validating, retrying, caching front end over an [`InferenceBackend`].
pub struct Fetcher<B> {
    backend: B,
    cache_dir: Option<PathBuf>,
    max_retries: u32,
    backoff: Duration,
}

impl<B: InferenceBackend> Fetcher<B> {
    pub fn new(backend: B) -> Self {
        Self {
            backend,
            cache_dir: None,
            max_retries: 3,
            backoff: Duration::from_millis(50),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn cache_key(messages: &[ChatMessage], layers: &[u32], want_logits: bool) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(messages).expect("messages serialize"));
        h.update(serde_json::to_vec(layers).expect("layers serialize"));
        h.update([want_logits as u8]);
        hex::encode(h.finalize())
    }

    fn retry<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    log::warn!("transient inference failure (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn fetch(&self, rendered: &RenderedPrompt, layers: &[u32], want_logits: bool) -> Result<InferenceResult> {
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        let cache_path = self.cache_dir.as_ref().map(|d| {
            d.join(format!(
                "{}.json",
                Self::cache_key(&rendered.messages, &layers, want_logits)
            ))
        });
        if let Some(path) = &cache_path {
            if let Ok(bytes) = std::fs::read(path) {
                if let Ok(entry) = serde_json::from_slice::<CacheEntry>(&bytes) {
                    return InferenceResult::from_wire(&layers, entry.activations, entry.logits);
                }
                log::warn!("ignoring unreadable cache entry {}", path.display());
            }
        }
        let act_req = ActivationsRequest {
            messages: rendered.messages.clone(),
            layers: layers.clone(),
        };
        let activations = self.retry(|| self.backend.activations(&act_req))?;
        let logits = if want_logits {
            let req = LogitsRequest {
                messages: rendered.messages.clone(),
                targets: vec![YES.to_string(), NO.to_string()],
            };
            Some(self.retry(|| self.backend.logits(&req))?)
        } else {
            None
        };
        let entry = CacheEntry { activations, logits };
        if let Some(path) = &cache_path {
            std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
            container::write_atomic(path, &serde_json::to_vec(&entry)?)?;
        }
        InferenceResult::from_wire(&layers, entry.activations, entry.logits)
    }
}
