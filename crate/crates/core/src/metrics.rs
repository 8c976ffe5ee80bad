//! Reconstruction metrics restricted to sensitive regions, and pixel-level
//! segmentation scores.

use serde::{Deserialize, Serialize};

use crate::datagen::{region_union, Rect};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported when the MSE is below `PSNR_MSE_FLOOR`.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `(channels, height, width)` of an image given as `(c, H, W)` or `(H, W)`.
fn layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "expected an image tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn region_pixels(
    orig: &Tensor,
    recon: &Tensor,
    regions: &[Rect],
) -> Result<((usize, usize, usize), Vec<(usize, usize)>)> {
    if !orig.same_extent(recon) {
        return Err(Error::shape(orig.shape(), recon.shape()));
    }
    let dims = layout(orig)?;
    for r in regions {
        r.check(dims.1, dims.2)?;
    }
    let px = region_union(regions);
    if px.is_empty() {
        return Err(Error::InvalidArgument("region union is empty".into()));
    }
    Ok((dims, px))
}

/// Mean squared difference over the union of `regions`, all channels.
pub fn region_mse(orig: &Tensor, recon: &Tensor, regions: &[Rect]) -> Result<f64> {
    let ((c, h, w), px) = region_pixels(orig, recon, regions)?;
    let (a, b) = (orig.data(), recon.data());
    let mut sum = 0.0;
    for ch in 0..c {
        for &(r, q) in &px {
            let i = ch * h * w + r * w + q;
            sum += (a[i] - b[i]).powi(2);
        }
    }
    Ok(sum / (c * px.len()) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in dB for unit peak signal.
pub fn region_psnr(orig: &Tensor, recon: &Tensor, regions: &[Rect]) -> Result<f64> {
    region_mse(orig, recon, regions).map(psnr_from_mse)
}

fn window_weights() -> [f64; SSIM_WINDOW] {
    // Taps at offsets -3..=4 around the pixel, centred half a pixel to the right.
    let mut g = [0.0; SSIM_WINDOW];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - 3.5;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Single-scale SSIM with a Gaussian window; only pixels inside the region
/// union enter the local statistics, and the map is averaged over that union.
pub fn region_ssim(orig: &Tensor, recon: &Tensor, regions: &[Rect]) -> Result<f64> {
    let ((c, h, w), px) = region_pixels(orig, recon, regions)?;
    let mut inside = vec![false; h * w];
    for &(r, q) in &px {
        inside[r * w + q] = true;
    }
    let g = window_weights();
    let (a, b) = (orig.data(), recon.data());
    let mut total = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        for &(r, q) in &px {
            let (mut sw, mut mx, mut my) = (0.0, 0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for (ki, gi) in g.iter().enumerate() {
                let rr = r as isize + ki as isize - 3;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (kj, gj) in g.iter().enumerate() {
                    let qq = q as isize + kj as isize - 3;
                    if qq < 0 || qq >= w as isize {
                        continue;
                    }
                    let p = rr as usize * w + qq as usize;
                    if !inside[p] {
                        continue;
                    }
                    let wt = gi * gj;
                    let (x, y) = (a[base + p], b[base + p]);
                    sw += wt;
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = (sxx / sw - mx * mx).max(0.0);
            let vy = (syy / sw - my * my).max(0.0);
            let cxy = sxy / sw - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (c * px.len()) as f64)
}

/// Pixel confusion counts for binary segmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl SegCounts {
    /// Thresholds `pred` at 0.5 and counts against the binary `truth`.
    pub fn from_masks(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        if !pred.same_extent(truth) {
            return Err(Error::shape(truth.shape(), pred.shape()));
        }
        let mut c = SegCounts::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p >= 0.5, t >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: SegCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> SegMetrics {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp + fp + fn_ == 0.0 {
            // Both masks empty.
            return SegMetrics {
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
                f_score: 1.0,
            };
        }
        let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        SegMetrics {
            iou: tp / (tp + fp + fn_),
            precision,
            recall,
            f_score: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

/// IoU, precision, recall and F-score of a thresholded prediction.
pub fn segmentation_metrics(pred: &Tensor, truth: &Tensor) -> Result<SegMetrics> {
    Ok(SegCounts::from_masks(pred, truth)?.metrics())
}
