//! Latent rollouts: the sender-side message substrate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vlm::{FrozenBackbone, PromptState};

pub const DEFAULT_EPS: f64 = 1e-6;
/// Clip applied to every latent value.
pub const LATENT_CLIP: f64 = 1e4;

/// Rescales vectors to the backbone's mean token-embedding norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMatcher {
    pub alpha: f64,
    pub eps: f64,
}

impl NormMatcher {
    pub fn new(alpha: f64, eps: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Contract(format!(
                "norm matcher needs positive alpha and eps, got {alpha}, {eps}"
            )));
        }
        Ok(NormMatcher { alpha, eps })
    }

    /// Mean L2 norm over every row of the token embedding table.
    pub fn fit(backbone: &FrozenBackbone, eps: f64) -> Result<Self> {
        Self::from_embedding_table(backbone.token_embeddings(), eps)
    }

    pub fn from_embedding_table(table: &Tensor, eps: f64) -> Result<Self> {
        let alpha = (0..table.rows())
            .map(|r| table.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / table.rows() as f64;
        NormMatcher::new(alpha, eps)
    }

    /// `alpha * h / (|h| + eps)`; the zero vector maps to itself.
    pub fn apply(&self, h: &Tensor) -> Tensor {
        let norm = h.frobenius_norm();
        let s = self.alpha / (norm + self.eps);
        h.map(|v| v * s)
    }
}

/// `T x d` matrix of norm-matched pseudo-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRollout {
    pub steps: Tensor,
    pub source_agent: String,
    /// Backbone position-steps spent producing the rollout.
    pub backbone_steps: u64,
}

impl LatentRollout {
    pub fn len(&self) -> usize {
        self.steps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Feed `T` pseudo-tokens back through the backbone over a copy of `state`'s
/// cache. Row `t` is `NormMatch(h_t)` where `h_0` is the prompt boundary and
/// `h_{t+1}` is the hidden state after appending row `t`. Costs exactly `T`
/// backbone steps.
pub fn latent_rollout(
    backbone: &FrozenBackbone,
    state: &PromptState,
    matcher: &NormMatcher,
    t: usize,
) -> Result<LatentRollout> {
    if t == 0 {
        return Err(Error::Contract("rollout length must be at least 1".into()));
    }
    let d = backbone.d();
    let mut work = state.clone();
    let start_steps = work.steps();
    let mut rows = Vec::with_capacity(t * d);
    let mut h = state.boundary_hidden.clone();
    for step in 0..t {
        if !h.is_finite() {
            return Err(Error::Rollout {
                step,
                detail: "hidden state is not finite".into(),
            });
        }
        let x = matcher.apply(&h).map(|v| v.clamp(-LATENT_CLIP, LATENT_CLIP));
        rows.extend_from_slice(x.data());
        h = backbone
            .step_with_embedding(&mut work, &x)
            .map_err(|e| Error::Rollout {
                step,
                detail: e.to_string(),
            })?;
    }
    Ok(LatentRollout {
        steps: Tensor::matrix(t, d, rows),
        source_agent: backbone.model_id().to_string(),
        backbone_steps: work.steps() - start_steps,
    })
}
