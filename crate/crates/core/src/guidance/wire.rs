//! JSON bodies of the guidance HTTP protocol.

use base64::{engine::general_purpose::STANDARD, Engine};
use serde::{Deserialize, Serialize};

use super::{GuidanceError, ImageBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub native_resolution: usize,
    pub embed_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelsResponse {
    Wrapped { models: Vec<ModelEntry> },
    Bare(Vec<ModelEntry>),
}

impl ModelsResponse {
    pub fn into_models(self) -> Vec<ModelEntry> {
        match self {
            ModelsResponse::Wrapped { models } | ModelsResponse::Bare(models) => models,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEmbeddingRequest {
    pub model_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEmbeddingResponse {
    pub vector: Vec<f64>,
    pub dim: usize,
}

/// Row-major `[B, H, W, 3]` float32 little-endian buffer, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImageBatch {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl WireImageBatch {
    pub fn encode(batch: &ImageBatch) -> Self {
        let mut bytes = Vec::with_capacity(batch.data.len() * 4);
        for &x in &batch.data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        Self {
            shape: batch.shape.to_vec(),
            dtype: "float32".into(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<ImageBatch, GuidanceError> {
        if self.dtype != "float32" {
            return Err(GuidanceError::Protocol(format!("unsupported dtype {:?}", self.dtype)));
        }
        let shape: [usize; 4] = self.shape.as_slice().try_into().map_err(|_| {
            GuidanceError::Protocol(format!("image batch shape {:?} is not [B, H, W, 3]", self.shape))
        })?;
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| GuidanceError::Protocol(format!("bad base64: {e}")))?;
        let n: usize = shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(GuidanceError::Protocol(format!(
                "{} payload bytes for shape {shape:?} (expected {})",
                bytes.len(),
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        ImageBatch::new(shape, data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageGuidanceRequest {
    pub model_id: String,
    pub text_vector: Vec<f64>,
    pub images: WireImageBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageGuidanceResponse {
    pub scores: Vec<f64>,
    pub grads: WireImageBatch,
}
