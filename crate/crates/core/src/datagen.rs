//! Synthetic annotated "document" images.
//!
//! Each sample is a textured single-channel page in one of four layouts, with
//! 1–4 rectangles of dark pseudo-text marked as privacy-sensitive, and one
//! rectangular patch that has been brightened ("tampered") and recorded in a
//! binary mask. Tampered patches and sensitive regions are placed
//! independently and may overlap.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Number of document layouts; `format_id` ranges over `0..FORMAT_COUNT`.
pub const FORMAT_COUNT: u8 = 4;
pub const FORMAT_NAMES: [&str; 4] = ["contract", "invoice", "page", "receipt"];

/// Axis-aligned rectangle: origin `(a, b)` = (row, col), extent `w` rows by `h` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub a: usize,
    pub b: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(a: usize, b: usize, w: usize, h: usize) -> Self {
        Rect { a, b, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.a + self.w <= height && self.b + self.h <= width
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::RegionOutOfBounds {
                rect: *self,
                height,
                width,
            })
        }
    }

    /// `(row, col)` of every covered pixel in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.a..self.a + self.w).flat_map(move |r| (self.b..self.b + self.h).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `(c, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `(H, W)`, values in `{0, 1}`.
    pub tamper_mask: Tensor,
    pub psi_regions: Vec<Rect>,
    pub format_id: u8,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.tamper_mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tamper_mask.shape()[1]
    }

    /// Sorted, de-duplicated pixels covered by any sensitive region.
    pub fn psi_pixels(&self) -> Vec<(usize, usize)> {
        region_union(&self.psi_regions)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let is = self.image.shape();
        if is.len() != 3 || is[1] != h || is[2] != w {
            return Err(Error::shape(&[1, h, w], is));
        }
        if self.format_id >= FORMAT_COUNT {
            return Err(Error::InvalidArgument(format!(
                "format id {} out of range",
                self.format_id
            )));
        }
        if self
            .tamper_mask
            .data()
            .iter()
            .any(|&v| v != 0.0 && v != 1.0)
        {
            return Err(Error::InvalidArgument("tamper mask is not binary".into()));
        }
        for r in &self.psi_regions {
            r.check(h, w)?;
        }
        Ok(())
    }
}

pub fn region_union(regions: &[Rect]) -> Vec<(usize, usize)> {
    let mut px: Vec<(usize, usize)> = regions.iter().flat_map(|r| r.pixels()).collect();
    px.sort_unstable();
    px.dedup();
    px
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive side-length range of the tampered patch.
    pub tamper_size: (usize, usize),
    /// Inclusive range of sensitive regions per sample.
    pub psi_count: (usize, usize),
    /// Inclusive side-length range of each sensitive region.
    pub psi_size: (usize, usize),
    pub texture_seed: u64,
    /// Half-width of the uniform pixel noise.
    pub noise_amplitude: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 240,
            height: 16,
            width: 16,
            channels: 1,
            tamper_size: (4, 8),
            psi_count: (1, 4),
            psi_size: (2, 5),
            texture_seed: 0,
            noise_amplitude: 0.03,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("image extents must be positive".into());
        }
        if self.channels != 1 {
            return bad(format!(
                "only single-channel images are generated, got {}",
                self.channels
            ));
        }
        let side = self.height.min(self.width);
        for (name, (lo, hi)) in [
            ("tamper_size", self.tamper_size),
            ("psi_size", self.psi_size),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} range {lo}..={hi} is empty or starts at zero"
                ));
            }
            if hi > side {
                return bad(format!("{name} upper bound {hi} exceeds image side {side}"));
            }
        }
        let (lo, hi) = self.psi_count;
        if lo == 0 || lo > hi {
            return bad(format!(
                "psi_count range {lo}..={hi} is empty or starts at zero"
            ));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude <= 0.2) {
            return bad(format!(
                "noise_amplitude {} outside [0, 0.2]",
                self.noise_amplitude
            ));
        }
        Ok(())
    }
}

/// Per-layout texture parameters, fixed by the texture seed.
struct Texture {
    base: f64,
    period: usize,
    phase: usize,
}

fn textures(seed: u64) -> [Texture; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7E57));
    let bases = [0.30, 0.26, 0.34, 0.28];
    bases.map(|base| {
        let period = rng.gen_range(3..6);
        Texture {
            base: base + rng.gen_range(-0.02..0.02),
            period,
            phase: rng.gen_range(0..period),
        }
    })
}

fn background(tex: &Texture, format: u8, r: usize, c: usize, width: usize) -> f64 {
    let on_line = |i: usize| (i + tex.phase) % tex.period == 0;
    match format {
        // Ruled lines.
        0 => tex.base - if on_line(r) { 0.08 } else { 0.0 },
        // Table grid.
        1 => tex.base - if on_line(r) || on_line(c) { 0.06 } else { 0.0 },
        // Plain page with a faint vertical gradient.
        2 => tex.base - 0.1 * (r as f64) / (width.max(2) as f64),
        // Narrow receipt strip on a darker surround.
        _ => {
            let margin = width / 4;
            if c < margin || c >= width - margin {
                tex.base - 0.1
            } else {
                tex.base + 0.05
            }
        }
    }
}

fn random_rect(
    rng: &mut ChaCha8Rng,
    (lo, hi): (usize, usize),
    height: usize,
    width: usize,
) -> Rect {
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let a = rng.gen_range(0..=height - w);
    let b = rng.gen_range(0..=width - h);
    Rect { a, b, w, h }
}

/// Deterministic corpus for `(spec, seed)`. Sample `i` has layout `i % 4`.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let tex = textures(spec.texture_seed);
    let (hh, ww) = (spec.height, spec.width);
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let format_id = (i % FORMAT_COUNT as usize) as u8;
            let t = &tex[format_id as usize];
            let mut img = vec![0.0; hh * ww];
            for r in 0..hh {
                for c in 0..ww {
                    let noise = spec.noise_amplitude * rng.gen_range(-1.0..=1.0);
                    img[r * ww + c] = background(t, format_id, r, c, ww) + noise;
                }
            }

            let count = rng.gen_range(spec.psi_count.0..=spec.psi_count.1);
            let regions: Vec<Rect> = (0..count)
                .map(|_| random_rect(&mut rng, spec.psi_size, hh, ww))
                .collect();
            // Pseudo-text: roughly half the pixels of each region are dark ink.
            for reg in &regions {
                for (r, c) in reg.pixels() {
                    if rng.gen_bool(0.5) {
                        img[r * ww + c] = 0.05 + 0.05 * rng.gen::<f64>();
                    }
                }
            }

            let patch = random_rect(&mut rng, spec.tamper_size, hh, ww);
            let mut mask = vec![0.0; hh * ww];
            for (r, c) in patch.pixels() {
                let v = &mut img[r * ww + c];
                *v = 0.75 + 0.25 * *v;
                mask[r * ww + c] = 1.0;
            }
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

            Sample {
                image: Tensor::from_vec(&[1, hh, ww], img).expect("sized"),
                tamper_mask: Tensor::from_vec(&[hh, ww], mask).expect("sized"),
                psi_regions: regions,
                format_id,
            }
        })
        .collect();
    Ok(samples)
}

/// Moves `per_format` samples of every layout into a public set.
///
/// Both returned lists keep the input order.
pub fn split_public(
    samples: Vec<Sample>,
    per_format: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B11));
    let mut public_idx = Vec::new();
    for f in 0..FORMAT_COUNT {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.format_id == f)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < per_format {
            return Err(Error::InvalidArgument(format!(
                "format {} ({}) has {} samples, {per_format} requested for the public set",
                f,
                FORMAT_NAMES[f as usize],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        public_idx.extend_from_slice(&idx[..per_format]);
    }
    let mut is_public = vec![false; samples.len()];
    for i in public_idx {
        is_public[i] = true;
    }
    let (mut private, mut public) = (Vec::new(), Vec::new());
    for (s, p) in samples.into_iter().zip(is_public) {
        if p {
            public.push(s);
        } else {
            private.push(s);
        }
    }
    Ok((private, public))
}
