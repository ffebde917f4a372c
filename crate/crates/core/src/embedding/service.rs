//! Client for the companion model service.
//!
//! Requests and responses are JSON envelopes carrying a `request_id`; tensors
//! travel as base64 little-endian float32 with an explicit shape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::store::{f32_bytes, read_f32s};
use super::{require_continuation, EmbeddingMatrix, EmbeddingProvider, SurprisalResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    pub data: String,
}

fn default_dtype() -> String {
    "float32".to_string()
}

pub fn encode_tensor(matrix: &Array2<f64>) -> WireTensor {
    WireTensor {
        shape: vec![matrix.nrows(), matrix.ncols()],
        dtype: default_dtype(),
        data: STANDARD.encode(f32_bytes(matrix.iter().copied())),
    }
}

pub fn decode_tensor(tensor: &WireTensor) -> Result<Array2<f64>> {
    if tensor.dtype != "float32" {
        return Err(Error::Service(format!("unsupported dtype `{}`", tensor.dtype)));
    }
    let &[rows, cols] = tensor.shape.as_slice() else {
        return Err(Error::Service(format!(
            "expected a 2-d tensor, got shape {:?}",
            tensor.shape
        )));
    };
    let bytes = STANDARD
        .decode(&tensor.data)
        .map_err(|e| Error::Service(format!("bad base64 payload: {e}")))?;
    let values = read_f32s(&bytes)?;
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|_| Error::Service(format!("payload does not match shape {:?}", tensor.shape)))
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    request_id: String,
    model: &'a str,
    words: &'a [String],
    layers: &'a [usize],
}

#[derive(Deserialize)]
struct LayerStates {
    layer: usize,
    states: WireTensor,
}

#[derive(Deserialize)]
struct EmbedResponse {
    request_id: String,
    layers: Vec<LayerStates>,
}

#[derive(Serialize)]
struct SurprisalRequest<'a> {
    request_id: String,
    model: &'a str,
    prefix: &'a [String],
    continuation: &'a [String],
}

#[derive(Serialize)]
struct ForwardFromRequest<'a> {
    request_id: String,
    model: &'a str,
    layer: usize,
    prefix: &'a [String],
    hidden_states: WireTensor,
    continuation: &'a [String],
}

#[derive(Deserialize)]
struct SurprisalResponse {
    request_id: String,
    tokens: Vec<String>,
    surprisal: Vec<f64>,
    total: f64,
}

/// `GET /health` body: served model names with per-model layers and widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub models: Vec<String>,
    pub layers: BTreeMap<String, Vec<usize>>,
    pub dims: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// HTTP client for one model served by the companion service.
pub struct ServiceClient {
    endpoint: String,
    model: String,
    layers: Vec<usize>,
    dim: usize,
    http: reqwest::blocking::Client,
    next_id: AtomicU64,
}

impl ServiceClient {
    /// Connects and reads the model's layers and width from `GET /health`.
    pub fn connect(endpoint: &str, model: &str) -> Result<ServiceClient> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Service(e.to_string()))?;
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let response = http
            .get(format!("{endpoint}/health"))
            .send()
            .map_err(|e| Error::Service(format!("{endpoint} unreachable: {e}")))?;
        let mut health: Health = read_json(response)?;
        let missing = || Error::Service(format!("service does not serve model `{model}`"));
        if !health.models.iter().any(|m| m == model) {
            return Err(missing());
        }
        let layers = health.layers.remove(model).ok_or_else(missing)?;
        let dim = health.dims.remove(model).ok_or_else(missing)?;
        Ok(ServiceClient {
            endpoint,
            model: model.to_string(),
            layers,
            dim,
            http,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn request_id(&self) -> String {
        format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let response = self
            .http
            .post(format!("{}/{route}", self.endpoint))
            .json(body)
            .send()
            .map_err(|e| Error::Service(format!("{} unreachable: {e}", self.endpoint)))?;
        read_json(response)
    }

    /// Word-aligned states for several layers in one request.
    pub fn embed(&self, id: &str, words: &[String], layers: &[usize]) -> Result<Vec<EmbeddingMatrix>> {
        for &layer in layers {
            self.check_layer(layer)?;
        }
        let request_id = self.request_id();
        let response: EmbedResponse = self.post(
            "embed",
            &EmbedRequest {
                request_id: request_id.clone(),
                model: &self.model,
                words,
                layers,
            },
        )?;
        check_id(&request_id, &response.request_id)?;
        layers
            .iter()
            .map(|&layer| {
                let entry = response
                    .layers
                    .iter()
                    .find(|l| l.layer == layer)
                    .ok_or_else(|| Error::Service(format!("response lacks layer {layer}")))?;
                let vectors = decode_tensor(&entry.states)?;
                if vectors.nrows() != words.len() {
                    return Err(Error::Service(format!(
                        "expected {} word rows, got {}",
                        words.len(),
                        vectors.nrows()
                    )));
                }
                EmbeddingMatrix::new(id, layer, self.model.clone(), vectors)
            })
            .collect()
    }

    fn to_result(&self, request_id: &str, response: SurprisalResponse) -> Result<SurprisalResult> {
        check_id(request_id, &response.request_id)?;
        let result = SurprisalResult::from_per_token(response.tokens, response.surprisal)?;
        if (result.total - response.total).abs() > 1e-6 {
            return Err(Error::Service(format!(
                "reported total {} differs from per-token sum {}",
                response.total, result.total
            )));
        }
        Ok(result)
    }
}

fn check_id(sent: &str, received: &str) -> Result<()> {
    if sent == received {
        Ok(())
    } else {
        Err(Error::Service(format!(
            "response for `{received}` does not match request `{sent}`"
        )))
    }
}

fn read_json<R: DeserializeOwned>(response: reqwest::blocking::Response) -> Result<R> {
    let status = response.status();
    let text = response.text().map_err(|e| Error::Service(e.to_string()))?;
    if !status.is_success() {
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        return Err(Error::Service(format!("HTTP {status}: {message}")));
    }
    serde_json::from_str(&text).map_err(|e| Error::Service(format!("malformed response: {e}")))
}

impl EmbeddingProvider for ServiceClient {
    fn model_tag(&self) -> &str {
        &self.model
    }

    fn layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        Ok(self.embed(id, words, &[layer])?.remove(0))
    }

    fn surprisal(&self, prefix: &[String], continuation: &[String]) -> Result<SurprisalResult> {
        require_continuation(continuation)?;
        let request_id = self.request_id();
        let response = self.post(
            "surprisal",
            &SurprisalRequest {
                request_id: request_id.clone(),
                model: &self.model,
                prefix,
                continuation,
            },
        )?;
        self.to_result(&request_id, response)
    }

    fn forward_from(
        &self,
        layer: usize,
        prefix: &[String],
        states: &EmbeddingMatrix,
        continuation: &[String],
    ) -> Result<SurprisalResult> {
        require_continuation(continuation)?;
        self.check_layer(layer)?;
        if states.n_words() != prefix.len() {
            return Err(Error::DimMismatch {
                expected: prefix.len(),
                found: states.n_words(),
            });
        }
        let request_id = self.request_id();
        let response = self.post(
            "forward_from",
            &ForwardFromRequest {
                request_id: request_id.clone(),
                model: &self.model,
                layer,
                prefix,
                hidden_states: encode_tensor(&states.vectors().to_owned()),
                continuation,
            },
        )?;
        self.to_result(&request_id, response)
    }
}
