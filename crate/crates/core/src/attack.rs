//! Gradient-inversion attack.
//!
//! The attacker knows the broadcast model, the uploaded gradient and the
//! sample's label mask, and searches for an input whose gradient matches the
//! upload. The search is plain gradient descent on the squared gradient
//! distance; its input gradient is taken by central differences so the
//! attacker never touches the trainer's second-order path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Rect, Sample};
use crate::error::{Error, Result};
use crate::federation::{simulate_upload, PsiSettings};
use crate::metrics::{region_mse, region_psnr, region_ssim};
use crate::nn::{GradientSet, Model, DEFAULT_FD_STEP};
use crate::privacy::{clip_block, Allocation, PrivacySpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub seed: u64,
    pub fd_step: f64,
    /// When set, the attacker clips its candidate gradient per layer the way
    /// the client does before comparing.
    pub clip: Option<Vec<f64>>,
    /// Project every iterate onto the valid pixel range `[0, 1]`.
    pub box_constraint: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 2000,
            step_size: 0.1,
            seed: 0,
            fd_step: DEFAULT_FD_STEP,
            clip: None,
            box_constraint: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack step size {} is not positive",
                self.step_size
            )));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack finite-difference step {} is not positive",
                self.fd_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub image: Tensor,
    /// Gradient-match loss of `image`, the best iterate seen.
    pub match_loss: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    /// Best-so-far match loss after each iteration, starting with the initial guess.
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub reconstructed: Tensor,
    pub match_loss: f64,
    pub iterations: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Squared L2 distance between the (optionally clipped) gradient at `x` and `target`.
pub fn match_loss(
    model: &Model,
    x: &Tensor,
    mask: &Tensor,
    target: &GradientSet,
    clip: Option<&[f64]>,
) -> Result<f64> {
    let g = model.backward(x, mask)?;
    let mut total = 0.0;
    for (l, (gb, tb)) in g.per_layer.iter().zip(&target.per_layer).enumerate() {
        let gb = match clip {
            Some(c) => clip_block(gb, c[l]).0,
            None => gb.clone(),
        };
        total += gb
            .flat()
            .iter()
            .zip(tb.flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Seeded uniform `[0, 1)` starting image.
pub fn initial_guess(model: &Model, seed: u64) -> Tensor {
    let shape = model.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen::<f64>())
        .collect();
    Tensor::from_vec(&shape, data).expect("positive extents")
}

/// Reconstructs an input from its (possibly protected) gradient.
pub fn invert_gradient(
    model: &Model,
    target: &GradientSet,
    true_mask: &Tensor,
    cfg: &AttackConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    target.check_matches(model)?;
    if let Some(c) = &cfg.clip {
        if c.len() != model.layer_count() {
            return Err(Error::InvalidArgument(format!(
                "{} attack clip thresholds for {} layers",
                c.len(),
                model.layer_count()
            )));
        }
    }
    let clip = cfg.clip.as_deref();
    let mut x = initial_guess(model, cfg.seed);
    let loss_at = |x: &Tensor, it: usize| -> Result<f64> {
        let v = match_loss(model, x, true_mask, target, clip)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "match loss is not finite at iteration {it}"
            )));
        }
        Ok(v)
    };

    let mut current = loss_at(&x, 0)?;
    let mut best = (current, x.clone(), 0usize);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(current);
    let n = x.len();
    let mut grad = vec![0.0; n];
    let h = cfg.fd_step;
    for it in 1..=cfg.iterations {
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let plus = loss_at(&x, it)?;
            x.data_mut()[i] = orig - h;
            let minus = loss_at(&x, it)?;
            x.data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        for (v, g) in x.data_mut().iter_mut().zip(&grad) {
            *v -= cfg.step_size * g;
            if cfg.box_constraint {
                *v = v.clamp(0.0, 1.0);
            }
        }
        current = loss_at(&x, it)?;
        if current < best.0 {
            best = (current, x.clone(), it);
        }
        trace.push(best.0);
    }
    Ok(Reconstruction {
        image: best.1,
        match_loss: best.0,
        best_iteration: best.2,
        iterations: cfg.iterations,
        loss_trace: trace,
    })
}

/// Scores a reconstruction against the original over the sensitive regions.
pub fn assess(recon: &Reconstruction, original: &Tensor, regions: &[Rect]) -> Result<AttackResult> {
    Ok(AttackResult {
        reconstructed: recon.image.clone(),
        match_loss: recon.match_loss,
        iterations: recon.iterations,
        mse: region_mse(original, &recon.image, regions)?,
        psnr: region_psnr(original, &recon.image, regions)?,
        ssim: region_ssim(original, &recon.image, regions)?,
    })
}

/// One defense trial on a single sample: the upload is the raw gradient when
/// `protection` is `None`, otherwise the client's clipped and perturbed upload
/// under it. The attacker mirrors the clipping when `cfg.clip` is set.
pub fn attack_sample(
    model: &Model,
    sample: &Sample,
    protection: Option<(&PrivacySpec, Allocation, &PsiSettings)>,
    cfg: &AttackConfig,
    noise_seed: u64,
) -> Result<AttackResult> {
    let target = match protection {
        None => model.backward(&sample.image, &sample.tamper_mask)?,
        Some((spec, allocation, psi)) => {
            simulate_upload(model, sample, spec, allocation, psi, noise_seed)?.gradients
        }
    };
    let recon = invert_gradient(model, &target, &sample.tamper_mask, cfg)?;
    assess(&recon, &sample.image, &sample.psi_regions)
}
