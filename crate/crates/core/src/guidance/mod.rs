//! Image-text similarity models behind a vector-Jacobian interface.
//!
//! A provider returns, for each image, a similarity score and the gradient
//! of that score with respect to the image pixels. The training graph never
//! sees inside the encoder: the combined pixel gradient is injected with
//! [`Graph::external`](crate::tensor::Graph::external).

mod remote;
mod toy;
pub mod wire;

pub use remote::{list_models, RemoteProvider, RetryPolicy};
pub use toy::{disk_target, prompt_color, Resize, ToyProvider, TOY_DISK_RADIUS, TOY_EMBED_DIM};
pub use wire::ModelEntry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::Window;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("guidance server returned {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("batch of {batch} exceeds the provider maximum of {max}")]
    BatchTooLarge { batch: usize, max: usize },
    #[error("image batch contains non-finite pixels")]
    NonFinite,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("guidance configuration error: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GuidanceError> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub model_id: String,
    /// Unit norm.
    pub vector: Vec<f64>,
}

/// Row-major `[B, H, W, 3]` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self, GuidanceError> {
        if shape[3] != 3 || shape.iter().product::<usize>() != data.len() {
            return Err(GuidanceError::Protocol(format!(
                "{} values for image batch {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    fn check(&self, max_batch: Option<usize>) -> Result<(), GuidanceError> {
        if let Some(max) = max_batch {
            if self.len() > max {
                return Err(GuidanceError::BatchTooLarge { batch: self.len(), max });
            }
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(GuidanceError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    pub scores: Vec<f64>,
    /// `d score_i / d image_i`, same layout as the request.
    pub grads: Vec<f64>,
    pub shape: [usize; 4],
}

pub trait GuidanceProvider {
    fn model_id(&self) -> &str;
    fn max_batch(&self) -> Option<usize>;
    fn text_embed(&self, prompt: &str) -> Result<TextEmbedding, GuidanceError>;
    fn score_with_grad(&self, images: &ImageBatch, text: &TextEmbedding) -> Result<GuidanceResponse, GuidanceError>;
}

/// Builds a provider from `toy` or an `http(s)://` base URL. Toy providers
/// get one disk target per prompt at `toy_resolution`.
pub fn open_provider(
    endpoint: &str,
    model_id: &str,
    prompts: &[&str],
    toy_resolution: usize,
) -> Result<Box<dyn GuidanceProvider>, GuidanceError> {
    if endpoint == "toy" {
        if prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(GuidanceError::EmptyPrompt);
        }
        Ok(Box::new(ToyProvider::disk_prompts_for(model_id, toy_resolution, prompts)))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(RemoteProvider::connect(endpoint, model_id)?))
    } else {
        Err(GuidanceError::Config(format!(
            "provider {endpoint:?} is neither `toy` nor an http(s) URL"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub primary_model: String,
    pub secondary_model: Option<String>,
    pub lambda_clip2: f64,
    pub secondary_window: Window,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            primary_model: "vit-b-32".into(),
            secondary_model: None,
            lambda_clip2: 0.5,
            secondary_window: Window::new(0, 0),
        }
    }
}

impl EnsembleConfig {
    pub fn secondary_active(&self, iteration: u64) -> bool {
        self.secondary_model.is_some() && self.secondary_window.contains(iteration)
    }
}

/// Similarity loss and the pixel gradient to inject into the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTerms {
    /// `-mean(primary scores)`.
    pub clip: f64,
    /// `-mean(secondary scores)`, zero when inactive.
    pub clip2: f64,
    /// `clip + lambda_clip2 * clip2`.
    pub loss: f64,
    /// `d loss / d pixels`, same layout as the scored batch.
    pub grad: Vec<f64>,
}

/// Combines the primary response and, inside the ensemble window, the
/// secondary one. Outside the window the secondary response is ignored.
pub fn clip_loss_terms(
    primary: &GuidanceResponse,
    secondary: Option<&GuidanceResponse>,
    ensemble: &EnsembleConfig,
    iteration: u64,
) -> Result<ClipTerms, GuidanceError> {
    let b = primary.scores.len();
    if b == 0 {
        return Err(GuidanceError::Protocol("empty guidance response".into()));
    }
    let inv = 1.0 / b as f64;
    let clip = -primary.scores.iter().sum::<f64>() * inv;
    let mut grad: Vec<f64> = primary.grads.iter().map(|g| -g * inv).collect();
    let mut clip2 = 0.0;
    if ensemble.secondary_active(iteration) {
        let s = secondary.ok_or_else(|| {
            GuidanceError::Config(format!("iteration {iteration} needs the secondary model but none was scored"))
        })?;
        if s.shape != primary.shape {
            return Err(GuidanceError::Protocol("primary and secondary batches differ".into()));
        }
        clip2 = -s.scores.iter().sum::<f64>() * inv;
        let k = ensemble.lambda_clip2 * inv;
        for (g, s) in grad.iter_mut().zip(&s.grads) {
            *g -= k * s;
        }
    }
    Ok(ClipTerms {
        clip,
        clip2,
        loss: clip + ensemble.lambda_clip2 * clip2,
        grad,
    })
}
