use std::time::Duration;

use log::warn;
use serde::{de::DeserializeOwned, Serialize};

use super::wire::{
    ImageGuidanceRequest, ImageGuidanceResponse, ModelEntry, ModelsResponse, TextEmbeddingRequest,
    TextEmbeddingResponse, WireImageBatch,
};
use super::{GuidanceError, GuidanceProvider, GuidanceResponse, ImageBatch, TextEmbedding};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Client for a guidance server speaking the `/v1` JSON protocol.
pub struct RemoteProvider {
    base: String,
    entry: ModelEntry,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base", &self.base)
            .field("entry", &self.entry)
            .finish()
    }
}

enum Attempt {
    Retry(GuidanceError),
    Fail(GuidanceError),
}

impl RemoteProvider {
    /// Lists the server's models and binds to `model_id`.
    pub fn connect(base_url: &str, model_id: &str) -> Result<Self, GuidanceError> {
        Self::connect_with(base_url, model_id, RetryPolicy::default())
    }

    pub fn connect_with(base_url: &str, model_id: &str, retry: RetryPolicy) -> Result<Self, GuidanceError> {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(600))
            .build();
        let base = base_url.trim_end_matches('/').to_string();
        let models = list_models_with(&agent, &base, retry)?;
        let entry = models
            .into_iter()
            .find(|m| m.model_id == model_id)
            .ok_or_else(|| GuidanceError::UnknownModel(model_id.to_string()))?;
        Ok(Self {
            base,
            entry,
            agent,
            retry,
        })
    }

    pub fn entry(&self) -> &ModelEntry {
        &self.entry
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, GuidanceError> {
        let url = format!("{}{path}", self.base);
        let body = serde_json::to_value(body).map_err(|e| GuidanceError::Protocol(e.to_string()))?;
        with_retry(self.retry, &url, || self.agent.post(&url).send_json(body.clone()))
    }
}

pub fn list_models(base_url: &str) -> Result<Vec<ModelEntry>, GuidanceError> {
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
    list_models_with(&agent, base_url.trim_end_matches('/'), RetryPolicy::default())
}

fn list_models_with(agent: &ureq::Agent, base: &str, retry: RetryPolicy) -> Result<Vec<ModelEntry>, GuidanceError> {
    let url = format!("{base}/v1/models");
    let resp: ModelsResponse = with_retry(retry, &url, || agent.get(&url).call())?;
    Ok(resp.into_models())
}

fn classify(url: &str, result: Result<ureq::Response, ureq::Error>) -> Result<ureq::Response, Attempt> {
    match result {
        Ok(r) => Ok(r),
        Err(ureq::Error::Status(code, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            let err = match code {
                404 => GuidanceError::UnknownModel(body),
                413 => GuidanceError::BatchTooLarge { batch: 0, max: 0 },
                _ => GuidanceError::Http { status: code, body },
            };
            if code >= 500 {
                Err(Attempt::Retry(err))
            } else {
                Err(Attempt::Fail(err))
            }
        }
        Err(ureq::Error::Transport(t)) => Err(Attempt::Retry(GuidanceError::Transport(format!("{url}: {t}")))),
    }
}

fn with_retry<T: DeserializeOwned>(
    policy: RetryPolicy,
    url: &str,
    mut send: impl FnMut() -> Result<ureq::Response, ureq::Error>,
) -> Result<T, GuidanceError> {
    let mut attempt = 0;
    loop {
        match classify(url, send()) {
            Ok(resp) => {
                return resp
                    .into_json::<T>()
                    .map_err(|e| GuidanceError::Protocol(format!("{url}: {e}")))
            }
            Err(Attempt::Fail(e)) => return Err(e),
            Err(Attempt::Retry(e)) if attempt < policy.retries => {
                let delay = policy.base_delay * 2u32.pow(attempt);
                warn!("guidance request failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(Attempt::Retry(e)) => {
                return Err(GuidanceError::RetriesExhausted {
                    attempts: attempt + 1,
                    last: Box::new(e),
                })
            }
        }
    }
}

impl GuidanceProvider for RemoteProvider {
    fn model_id(&self) -> &str {
        &self.entry.model_id
    }

    fn max_batch(&self) -> Option<usize> {
        self.entry.max_batch
    }

    fn text_embed(&self, prompt: &str) -> Result<TextEmbedding, GuidanceError> {
        if prompt.is_empty() {
            return Err(GuidanceError::EmptyPrompt);
        }
        let resp: TextEmbeddingResponse = self.post(
            "/v1/text_embedding",
            &TextEmbeddingRequest {
                model_id: self.entry.model_id.clone(),
                prompt: prompt.to_string(),
            },
        )?;
        if resp.vector.len() != resp.dim || resp.dim != self.entry.embed_dim {
            return Err(GuidanceError::Protocol(format!(
                "embedding of length {} (dim {}) from a model declaring {}",
                resp.vector.len(),
                resp.dim,
                self.entry.embed_dim
            )));
        }
        let norm = resp.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GuidanceError::Protocol("embedding has zero or non-finite norm".into()));
        }
        Ok(TextEmbedding {
            model_id: self.entry.model_id.clone(),
            vector: resp.vector.iter().map(|x| x / norm).collect(),
        })
    }

    fn score_with_grad(&self, images: &ImageBatch, text: &TextEmbedding) -> Result<GuidanceResponse, GuidanceError> {
        images.check(self.entry.max_batch)?;
        let resp: ImageGuidanceResponse = self
            .post(
                "/v1/image_guidance",
                &ImageGuidanceRequest {
                    model_id: self.entry.model_id.clone(),
                    text_vector: text.vector.clone(),
                    images: WireImageBatch::encode(images),
                },
            )
            .map_err(|e| match e {
                GuidanceError::BatchTooLarge { .. } => GuidanceError::BatchTooLarge {
                    batch: images.shape[0],
                    max: self.entry.max_batch.unwrap_or(0),
                },
                other => other,
            })?;
        let grads = resp.grads.decode()?;
        if grads.shape != images.shape || resp.scores.len() != images.shape[0] {
            return Err(GuidanceError::Protocol(format!(
                "response with {} scores and grads {:?} for images {:?}",
                resp.scores.len(),
                grads.shape,
                images.shape
            )));
        }
        Ok(GuidanceResponse {
            scores: resp.scores,
            grads: grads.data,
            shape: images.shape,
        })
    }
}
