//! Layer-wise local differential privacy.
//!
//! The total budget `(epsilon, delta)` is split across layers, each layer's
//! gradient is clipped to its own L2 threshold and perturbed with the Gaussian
//! mechanism. Under simple composition the per-layer guarantees add up to the
//! total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamBlock;
use crate::rng::NoiseStream;
use crate::sensitivity::PsiScores;
use crate::tensor::Tensor;

pub const DEFAULT_S_FLOOR: f64 = 1e-6;
pub const EPSILON_TOLERANCE: f64 = 1e-9;
pub const DELTA_TOLERANCE: f64 = 1e-12;

/// How the total budget is split across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// Inversely proportional to each layer's PSI score.
    Psi,
    /// Equal share per layer.
    Uniform,
}

impl std::str::FromStr for Allocation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "psi" => Ok(Allocation::Psi),
            "uniform" => Ok(Allocation::Uniform),
            other => Err(format!(
                "unknown allocation {other:?}, expected psi or uniform"
            )),
        }
    }
}

impl std::fmt::Display for Allocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Allocation::Psi => "psi",
            Allocation::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Total budget; `f64::INFINITY` disables noise (clipping still applies).
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: usize,
    /// One threshold per layer.
    pub clip: Vec<f64>,
    pub s_floor: f64,
}

impl PrivacySpec {
    pub fn is_noiseless(&self) -> bool {
        self.epsilon.is_infinite()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon > 0.0) || self.epsilon == f64::NEG_INFINITY {
            return bad(format!(
                "epsilon must be positive or inf, got {}",
                self.epsilon
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clip.len() != layers {
            return bad(format!(
                "{} clipping thresholds given for a {layers}-layer model",
                self.clip.len()
            ));
        }
        if let Some(c) = self.clip.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return bad(format!("clipping threshold {c} is not positive"));
        }
        if !(self.s_floor >= 0.0 && self.s_floor.is_finite()) {
            return bad(format!("s_floor {} must be non-negative", self.s_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub per_layer_epsilon: Vec<f64>,
    pub per_layer_delta: Vec<f64>,
    pub per_layer_sigma: Vec<f64>,
}

impl LayerBudget {
    pub fn len(&self) -> usize {
        self.per_layer_epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer_epsilon.is_empty()
    }
}

/// Gaussian noise multiplier for `rounds` releases at per-layer `(epsilon, delta)`.
pub fn noise_multiplier(epsilon: f64, delta: f64, rounds: usize) -> f64 {
    if epsilon.is_infinite() {
        return 0.0;
    }
    (2.0 * rounds as f64 * (1.0 / delta).ln()).sqrt() / epsilon
}

/// Splits the budget inversely to the PSI scores (floored at `s_floor`).
pub fn allocate_budget(scores: &PsiScores, spec: &PrivacySpec) -> Result<LayerBudget> {
    let l = scores.len();
    spec.validate(l)?;
    if l == 0 {
        return Err(Error::InvalidArgument("no layers to allocate".into()));
    }
    if let Some(s) = scores
        .per_layer
        .iter()
        .find(|s| !(s.is_finite() && **s >= 0.0))
    {
        return Err(Error::InvalidArgument(format!(
            "PSI score {s} is not a finite non-negative value"
        )));
    }
    let inv: Vec<f64> = scores
        .per_layer
        .iter()
        .map(|&s| 1.0 / s.max(spec.s_floor))
        .collect();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "zero PSI score with s_floor = 0 makes the allocation undefined".into(),
        ));
    }
    let total: f64 = inv.iter().sum();
    Ok(finish(
        inv.iter().map(|w| spec.epsilon * w / total).collect(),
        spec,
    ))
}

/// Equal split of the budget across `layers`.
pub fn allocate_uniform(layers: usize, spec: &PrivacySpec) -> Result<LayerBudget> {
    spec.validate(layers)?;
    if layers == 0 {
        return Err(Error::InvalidArgument("no layers to allocate".into()));
    }
    Ok(finish(vec![spec.epsilon / layers as f64; layers], spec))
}

fn finish(per_layer_epsilon: Vec<f64>, spec: &PrivacySpec) -> LayerBudget {
    let l = per_layer_epsilon.len();
    let delta_l = spec.delta / l as f64;
    let per_layer_sigma = per_layer_epsilon
        .iter()
        .map(|&e| noise_multiplier(e, delta_l, spec.rounds))
        .collect();
    LayerBudget {
        per_layer_epsilon,
        per_layer_delta: vec![delta_l; l],
        per_layer_sigma,
    }
}

/// Simple composition: the per-layer guarantees must not exceed the total.
pub fn compose_check(budget: &LayerBudget, spec: &PrivacySpec) -> bool {
    let eps: f64 = budget.per_layer_epsilon.iter().sum();
    let delta: f64 = budget.per_layer_delta.iter().sum();
    let eps_ok = if spec.epsilon.is_infinite() {
        true
    } else {
        eps <= spec.epsilon + EPSILON_TOLERANCE
    };
    eps_ok && delta <= spec.delta + DELTA_TOLERANCE
}

fn clip_factor(norm: f64, threshold: f64) -> f64 {
    if norm > threshold {
        threshold / norm
    } else {
        1.0
    }
}

/// Rescales `g` onto the L2 ball of radius `threshold` if it lies outside.
pub fn clip(g: &Tensor, threshold: f64) -> Tensor {
    let mut out = g.clone();
    out.scale(clip_factor(g.norm(), threshold));
    out
}

/// Clips a whole layer (weight and bias jointly); also returns the clipped norm.
pub fn clip_block(g: &ParamBlock, threshold: f64) -> (ParamBlock, f64) {
    let mut out = g.clone();
    out.scale(clip_factor(g.norm(), threshold));
    let norm = out.norm();
    (out, norm)
}

/// Adds `N(0, (threshold * sigma)^2)` noise to every coordinate.
pub fn perturb(g: &Tensor, threshold: f64, sigma: f64, noise: &mut NoiseStream) -> Tensor {
    let std = threshold * sigma;
    if std == 0.0 {
        return g.clone();
    }
    let data = g
        .data()
        .iter()
        .map(|&v| v + std * noise.standard_normal())
        .collect();
    Tensor::from_vec(g.shape(), data).expect("same shape")
}

pub fn perturb_block(
    g: &ParamBlock,
    threshold: f64,
    sigma: f64,
    noise: &mut NoiseStream,
) -> ParamBlock {
    ParamBlock {
        weight: perturb(&g.weight, threshold, sigma, noise),
        bias: g.bias.as_ref().map(|b| perturb(b, threshold, sigma, noise)),
    }
}
