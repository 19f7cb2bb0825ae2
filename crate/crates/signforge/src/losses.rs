//! Attack objective: detection loss on filtered proposals, prompt
//! similarity loss, and their weighted sum.
//!
//! Both losses return analytic gradients alongside their values so the
//! optimizer can chain them through the detector and embedder backward
//! passes.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};

/// Per-term values of the attack objective at one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub detection: f64,
    pub total: f64,
}

/// Mean squared hinge pushing the target-class score of every filtered
/// proposal up to `t_score`:
/// `L_d = mean_i relu(t_score - s_i)^2` where `s_i` is proposal `i`'s
/// score for `target_class`. Returns the loss and `dL/ds_i` per proposal.
/// Proposals already at or above `t_score` contribute nothing.
pub fn detection_loss(
    filtered: &DetectionSet,
    target_class: usize,
    t_score: f64,
) -> Result<(f64, Vec<f64>)> {
    if filtered.is_empty() {
        return Err(Error::EmptyFilteredSet);
    }
    let n = filtered.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(filtered.len());
    for p in &filtered.proposals {
        let s = *p.class_scores.get(target_class).ok_or_else(|| {
            Error::Config(format!(
                "target class {target_class} out of range for {}-class proposal",
                p.class_scores.len()
            ))
        })?;
        let gap = (t_score - s).max(0.0);
        loss += gap * gap / n;
        grads.push(-2.0 * gap / n);
    }
    Ok((loss, grads))
}

/// One minus cosine similarity between an image embedding and a text
/// embedding, in `[0, 2]`. Returns the loss and its gradient with
/// respect to the image embedding.
pub fn similarity_loss(
    image_emb: &Array1<f64>,
    text_emb: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let ni = image_emb.dot(image_emb).sqrt();
    let nt = text_emb.dot(text_emb).sqrt();
    if ni < 1e-12 || nt < 1e-12 {
        return Err(Error::ZeroNormEmbedding);
    }
    let dot = image_emb.dot(text_emb);
    let cos = dot / (ni * nt);
    let loss = 1.0 - cos;
    // d(1 - cos)/d e = -(t_hat - cos * e_hat) / |e|
    let grad = image_emb.mapv(|e| cos * e / (ni * ni)) - text_emb.mapv(|t| t / (ni * nt));
    Ok((loss, grad))
}

/// Weighted total `L = L_s + lambda * L_d`.
pub fn total_loss(similarity: f64, detection: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        similarity,
        detection,
        total: similarity + lambda * detection,
    }
}
