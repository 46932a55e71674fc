//! R-Precision retrieval over rendered views.

use thiserror::Error;

use crate::guidance::{GuidanceError, GuidanceProvider, ImageBatch};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{objects} objects but {prompts} prompts")]
    CountMismatch { objects: usize, prompts: usize },
    #[error("need at least one prompt")]
    Empty,
    #[error("duplicate prompt {0:?}")]
    DuplicatePrompt(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `scores[i][j]` is the similarity of object `i` to prompt `j`. Object `i`
/// counts as retrieved when prompt `i` has the top score in its row.
pub fn r_precision_from_scores(scores: &[Vec<f64>]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0;
    for (i, row) in scores.iter().enumerate() {
        if row.len() != scores.len() {
            return Err(EvalError::CountMismatch {
                objects: scores.len(),
                prompts: row.len(),
            });
        }
        if argmax(row) == Some(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Per-object retrieval result.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Retrieval {
    pub prompt: String,
    pub retrieved: String,
    /// Mean score over views for every prompt.
    pub scores: Vec<f64>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub model_id: String,
    pub r_precision: f64,
    pub objects: Vec<Retrieval>,
}

/// Scores each object's views against every prompt and averages over views.
/// `views[i]` holds the rendered images of the object generated from
/// `prompts[i]`.
pub fn r_precision(
    provider: &dyn GuidanceProvider,
    prompts: &[String],
    views: &[ImageBatch],
) -> Result<EvalReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::Empty);
    }
    if views.len() != prompts.len() {
        return Err(EvalError::CountMismatch {
            objects: views.len(),
            prompts: prompts.len(),
        });
    }
    for (i, p) in prompts.iter().enumerate() {
        if prompts[..i].contains(p) {
            return Err(EvalError::DuplicatePrompt(p.clone()));
        }
    }
    let texts = prompts
        .iter()
        .map(|p| provider.text_embed(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut matrix = Vec::with_capacity(views.len());
    for batch in views {
        let mut row = Vec::with_capacity(texts.len());
        for t in &texts {
            let r = provider.score_with_grad(batch, t)?;
            row.push(r.scores.iter().sum::<f64>() / r.scores.len().max(1) as f64);
        }
        matrix.push(row);
    }
    let r = r_precision_from_scores(&matrix)?;
    let objects = matrix
        .into_iter()
        .enumerate()
        .map(|(i, scores)| {
            let best = argmax(&scores).unwrap_or(0);
            Retrieval {
                prompt: prompts[i].clone(),
                retrieved: prompts[best].clone(),
                hit: best == i,
                scores,
            }
        })
        .collect();
    Ok(EvalReport {
        model_id: provider.model_id().to_string(),
        r_precision: r,
        objects,
    })
}
