//! Privacy-sensitive-information (PSI) scores.
//!
//! For layer `l` the score is the mean, over the pixels of a sensitive region,
//! of the Frobenius norm of `d g_l / d x` at that pixel (taken across all of
//! the layer's parameters and all channels). Layers whose gradients move most
//! when sensitive pixels move leak the most about them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Rect, Sample};
use crate::error::{Error, Result};
use crate::nn::{input_jacobians, Model};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Default number of samples scored per call.
pub const DEFAULT_MAX_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiScores {
    pub per_layer: Vec<f64>,
    pub n_samples_used: usize,
}

impl PsiScores {
    pub fn uniform(layers: usize) -> Self {
        PsiScores {
            per_layer: vec![1.0; layers],
            n_samples_used: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

/// Per-pixel sensitivity over `region` of a `(P, c, H, W)` Jacobian; result is `(w, h)`.
pub fn align_region(jacobian: &Tensor, region: &Rect) -> Result<Tensor> {
    let shape = jacobian.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected a (P, c, H, W) Jacobian, got shape {shape:?}"
        )));
    }
    let (p, c, height, width) = (shape[0], shape[1], shape[2], shape[3]);
    region.check(height, width)?;
    let plane = height * width;
    let data = jacobian.data();
    let mut out = Vec::with_capacity(region.area());
    for (r, q) in region.pixels() {
        let pix = r * width + q;
        let mut sq = 0.0;
        for pi in 0..p {
            for ch in 0..c {
                let v = data[(pi * c + ch) * plane + pix];
                sq += v * v;
            }
        }
        out.push(sq.sqrt());
    }
    Tensor::from_vec(&[region.w, region.h], out)
}

/// Mean of an aligned sensitivity map.
pub fn psi_score(aligned: &Tensor) -> Result<f64> {
    if aligned.is_empty() {
        return Err(Error::InvalidArgument("empty sensitivity map".into()));
    }
    Ok(aligned.data().iter().sum::<f64>() / aligned.len() as f64)
}

/// Picks `min(max_samples, n)` distinct indices in increasing order.
pub fn select_indices(n: usize, max_samples: usize, seed: u64) -> Vec<usize> {
    if max_samples >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9517));
    let mut idx = rand::seq::index::sample(&mut rng, n, max_samples).into_vec();
    idx.sort_unstable();
    idx
}

/// PSI scores of one sample; `None` when it has no sensitive region.
///
/// Regions are weighted equally regardless of their area.
pub fn sample_scores(model: &Model, sample: &Sample, h: f64) -> Result<Option<Vec<f64>>> {
    if sample.psi_regions.is_empty() {
        return Ok(None);
    }
    let pixels = sample.psi_pixels();
    let jacs = input_jacobians(model, &sample.image, &sample.tamper_mask, Some(&pixels), h)?;
    let scores = jacs
        .iter()
        .map(|j| {
            let mut total = 0.0;
            for region in &sample.psi_regions {
                total += psi_score(&align_region(j, region)?)?;
            }
            Ok(total / sample.psi_regions.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(scores))
}

/// Layer-wise PSI scores averaged over a seeded subset of `samples`.
pub fn psi_scores_for_model(
    model: &Model,
    samples: &[Sample],
    max_samples: usize,
    h: f64,
    seed: u64,
) -> Result<PsiScores> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    if max_samples == 0 {
        return Err(Error::InvalidArgument(
            "max_samples must be at least 1".into(),
        ));
    }
    let chosen = select_indices(samples.len(), max_samples, seed);
    let per_sample: Vec<Option<Vec<f64>>> = chosen
        .par_iter()
        .map(|&i| sample_scores(model, &samples[i], h))
        .collect::<Result<_>>()?;

    let mut sums = vec![0.0; model.layer_count()];
    let mut used = 0usize;
    for s in per_sample.into_iter().flatten() {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "none of the selected samples has a sensitive region".into(),
        ));
    }
    Ok(PsiScores {
        per_layer: sums.into_iter().map(|s| s / used as f64).collect(),
        n_samples_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jacobian_aligns_to_zero() {
        let j = Tensor::zeros(&[3, 1, 4, 4]);
        let a = align_region(&j, &Rect::new(1, 1, 2, 3)).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_and_two_channel_norms() {
        let j = Tensor::from_vec(&[1, 1, 1, 1], vec![-3.0]).unwrap();
        assert_eq!(
            align_region(&j, &Rect::new(0, 0, 1, 1)).unwrap().data(),
            &[3.0]
        );
        let j = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(
            align_region(&j, &Rect::new(0, 0, 1, 1)).unwrap().data(),
            &[5.0]
        );
    }

    #[test]
    fn out_of_bounds_region_rejected() {
        let j = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(
            align_region(&j, &Rect::new(3, 0, 2, 1)),
            Err(Error::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn score_is_mean() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(psi_score(&a).unwrap(), 2.5);
        assert_eq!(psi_score(&Tensor::filled(&[3, 2], 1.0)).unwrap(), 1.0);
        assert_eq!(psi_score(&Tensor::zeros(&[1, 5])).unwrap(), 0.0);
    }

    #[test]
    fn index_selection() {
        assert_eq!(select_indices(5, 10, 0), vec![0, 1, 2, 3, 4]);
        let a = select_indices(100, 10, 1);
        assert_eq!(a.len(), 10);
        assert_eq!(a, select_indices(100, 10, 1));
        assert_ne!(a, select_indices(100, 10, 2));
    }
}
