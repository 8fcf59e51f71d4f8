use std::time::Duration;

use actmon_core::prompt::{ActivationsRequest, ActivationsResponse, InferenceBackend, LogitsRequest, LogitsResponse};
use actmon_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use url::Url;

pub struct HttpBackend {
    base: Url,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base: &str) -> Result<Self> {
        Self::with_timeout(base, Duration::from_secs(60))
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Result<Self> {
        let mut base = Url::parse(base).map_err(|e| Error::Invalid(format!("bad endpoint {base:?}: {e}")))?;
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(Self { base, client })
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    fn post<Q: Serialize, R: DeserializeOwned>(&self, path: &str, body: &Q) -> Result<R> {
        let url = self.base.join(path).map_err(|e| Error::Invalid(e.to_string()))?;
        let resp = self
            .client
            .post(url.clone())
            .json(body)
            .send()
            .map_err(|e| Error::Transport {
                message: format!("{url}: {e}"),
                transient: e.is_timeout() || e.is_connect() || e.is_request(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::Transport {
                message: format!("{url}: HTTP {status}: {}", text.trim()),
                transient: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let bytes = resp.bytes().map_err(|e| Error::Transport {
            message: format!("{url}: {e}"),
            transient: true,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Protocol(format!("{url}: malformed response: {e}")))
    }
}

impl InferenceBackend for HttpBackend {
    fn activations(&self, request: &ActivationsRequest) -> Result<ActivationsResponse> {
        self.post("v1/activations", request)
    }

    fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        self.post("v1/logits", request)
    }
}
