//! Little-endian binary formats for datasets, checkpoints and gradients.
//!
//! ```text
//! dataset    "FEDRE-D1" u32:count { u32:record_len record }*
//!   record   u8:format u32:c u32:H u32:W u32:n_regions {u32 a,b,w,h}* f64[c*H*W] u8[H*W]
//! checkpoint "FEDRE-M1" u32:c u32:H u32:W u8:loss u32:n_layers layer* block*
//!   layer    u8:tag (0 dense: u32 in, u32 out, u8 bias | 1 conv: u32 in, out, k, pad | 2 relu | 3 sigmoid)
//!   block    f64[weight] f64[bias]   (sizes implied by the layer list)
//! gradients  "FEDRE-G1" u32:sample_count u32:L { u32:rank u32[rank] f64[..] u8:has_bias [u32:n f64[n]] }*
//! ```
//!
//! Readers report the byte offset of the first malformed field.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datagen::{Rect, Sample};
use crate::error::{Error, Result};
use crate::nn::{GradientSet, Layer, LossKind, Model, ParamBlock};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"FEDRE-D1";
pub const MODEL_MAGIC: &[u8; 8] = b"FEDRE-M1";
pub const GRADIENT_MAGIC: &[u8; 8] = b"FEDRE-G1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let start = self.pos;
        let got = self.take(8, "magic")?;
        if got != expected {
            self.pos = start;
            return self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                std::str::from_utf8(expected).expect("ascii magic")
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("{what} length overflows"),
        })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    let shape = s.image.shape();
    out.push(s.format_id);
    for &d in shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, s.psi_regions.len());
    for r in &s.psi_regions {
        for v in [r.a, r.b, r.w, r.h] {
            put_u32(&mut out, v);
        }
    }
    put_f64s(&mut out, s.image.data());
    out.extend(s.tamper_mask.data().iter().map(|&v| v as u8));
    out
}

fn decode_sample(r: &mut Reader) -> Result<Sample> {
    let format_id = r.u8("format id")?;
    let (c, h, w) = (r.u32("channels")?, r.u32("height")?, r.u32("width")?);
    if c == 0 || h == 0 || w == 0 {
        return r.err(format!("zero image extent ({c}, {h}, {w})"));
    }
    let (plane, volume) = match h.checked_mul(w).and_then(|p| Some((p, p.checked_mul(c)?))) {
        Some(v) => v,
        None => return r.err(format!("image extent ({c}, {h}, {w}) overflows")),
    };
    let n_regions = r.u32("region count")?;
    let mut regions = Vec::with_capacity(n_regions.min(64));
    for _ in 0..n_regions {
        let at = r.pos;
        let rect = Rect::new(
            r.u32("region")?,
            r.u32("region")?,
            r.u32("region")?,
            r.u32("region")?,
        );
        if !rect.fits(h, w) {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("region {rect:?} outside {h}x{w} image"),
            });
        }
        regions.push(rect);
    }
    let image = r.f64s(volume, "image block")?;
    let mask_at = r.pos;
    let mask = r.take(plane, "mask block")?;
    if mask.iter().any(|&b| b > 1) {
        return Err(Error::Parse {
            offset: mask_at as u64,
            message: "mask byte is not 0 or 1".into(),
        });
    }
    let sample = Sample {
        image: Tensor::from_vec(&[c, h, w], image)?,
        tamper_mask: Tensor::from_vec(&[h, w], mask.iter().map(|&b| f64::from(b)).collect())?,
        psi_regions: regions,
        format_id,
    };
    Ok(sample)
}

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, samples.len());
    for s in samples {
        let rec = encode_sample(s);
        put_u32(&mut out, rec.len());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let count = r.u32("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("record length")?;
        let start = r.pos;
        let rec = r.take(len, "sample record")?;
        let mut sub = Reader::new(rec);
        let s = decode_sample(&mut sub)
            .and_then(|s| sub.finish().map(|_| s))
            .map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse {
                    offset: start as u64 + offset,
                    message: format!("sample {i}: {message}"),
                },
                other => other,
            })?;
        samples.push(s);
    }
    r.finish()?;
    Ok(samples)
}

pub fn save_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(samples))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode_dataset(&fs::read(path)?)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    for d in model.input_shape() {
        put_u32(&mut out, d);
    }
    out.push(match model.loss_kind() {
        LossKind::BinaryCrossEntropy => 0,
        LossKind::HalfSquaredError => 1,
    });
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        match *layer {
            Layer::Dense {
                in_features,
                out_features,
                bias,
            } => {
                out.push(0);
                put_u32(&mut out, in_features);
                put_u32(&mut out, out_features);
                out.push(bias as u8);
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                out.push(1);
                for v in [in_channels, out_channels, kernel, padding] {
                    put_u32(&mut out, v);
                }
            }
            Layer::Relu => out.push(2),
            Layer::SigmoidHead => out.push(3),
        }
    }
    for p in model.params() {
        put_f64s(&mut out, &p.flat());
    }
    out
}

pub fn decode_model(buf: &[u8]) -> Result<Model> {
    let mut r = Reader::new(buf);
    r.magic(MODEL_MAGIC)?;
    let shape = [
        r.u32("input shape")?,
        r.u32("input shape")?,
        r.u32("input shape")?,
    ];
    let loss = match r.u8("loss kind")? {
        0 => LossKind::BinaryCrossEntropy,
        1 => LossKind::HalfSquaredError,
        k => {
            r.pos -= 1;
            return r.err(format!("unknown loss kind {k}"));
        }
    };
    let n = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let layer = match r.u8("layer tag")? {
            0 => Layer::Dense {
                in_features: r.u32("dense inputs")?,
                out_features: r.u32("dense outputs")?,
                bias: r.u8("dense bias flag")? != 0,
            },
            1 => Layer::Conv2d {
                in_channels: r.u32("conv channels")?,
                out_channels: r.u32("conv channels")?,
                kernel: r.u32("conv kernel")?,
                padding: r.u32("conv padding")?,
            },
            2 => Layer::Relu,
            3 => Layer::SigmoidHead,
            t => {
                r.pos -= 1;
                return r.err(format!("unknown layer tag {t}"));
            }
        };
        layers.push(layer);
    }
    let layers_end = r.pos;
    // Refuse to allocate more parameters than the remaining bytes can hold.
    let room = (buf.len() - layers_end) / 8;
    for layer in &layers {
        let weights = match *layer {
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => in_features.checked_mul(out_features),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels
                .checked_mul(out_channels)
                .and_then(|v| v.checked_mul(kernel))
                .and_then(|v| v.checked_mul(kernel)),
            _ => Some(0),
        };
        if weights.map_or(true, |n| n > room) {
            return Err(Error::Parse {
                offset: layers_end as u64,
                message: format!("layer {layer:?} needs more parameters than the file holds"),
            });
        }
    }
    let mut model = Model::zeroed(shape, layers, loss).map_err(|e| Error::Parse {
        offset: layers_end as u64,
        message: e.to_string(),
    })?;
    for l in 0..model.layer_count() {
        let n = model.param_count(l);
        let values = r.f64s(n, "parameter block")?;
        model.params_mut()[l].set_flat(&values)?;
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    put_f64s(out, t.data());
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let rank = r.u32("tensor rank")?;
    if rank == 0 || rank > 8 {
        r.pos -= 4;
        return r.err(format!("unsupported tensor rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor extent")?);
    }
    if shape.contains(&0) {
        return r.err(format!("zero extent in {shape:?}"));
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(n) = n else {
        return r.err("tensor size overflows");
    };
    let data = r.f64s(n, "tensor data")?;
    Tensor::from_vec(&shape, data)
}

pub fn encode_gradients(g: &GradientSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GRADIENT_MAGIC);
    put_u32(&mut out, g.sample_count);
    put_u32(&mut out, g.per_layer.len());
    for p in &g.per_layer {
        put_tensor(&mut out, &p.weight);
        match &p.bias {
            Some(b) => {
                out.push(1);
                put_tensor(&mut out, b);
            }
            None => out.push(0),
        }
    }
    out
}

pub fn decode_gradients(buf: &[u8]) -> Result<GradientSet> {
    let mut r = Reader::new(buf);
    r.magic(GRADIENT_MAGIC)?;
    let sample_count = r.u32("sample count")?;
    let n = r.u32("layer count")?;
    let mut per_layer = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let weight = read_tensor(&mut r)?;
        let bias = match r.u8("bias flag")? {
            0 => None,
            1 => Some(read_tensor(&mut r)?),
            f => {
                r.pos -= 1;
                return r.err(format!("bias flag {f} is not 0 or 1"));
            }
        };
        per_layer.push(ParamBlock { weight, bias });
    }
    r.finish()?;
    Ok(GradientSet {
        per_layer,
        sample_count,
    })
}

pub fn save_gradients(g: &GradientSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_gradients(g))
}

pub fn load_gradients(path: impl AsRef<Path>) -> Result<GradientSet> {
    decode_gradients(&fs::read(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};

    fn corpus() -> Vec<Sample> {
        generate(
            &DatasetSpec {
                n_samples: 8,
                ..DatasetSpec::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let s = corpus();
        let back = decode_dataset(&encode_dataset(&s)).unwrap();
        assert_eq!(s, back);
        for (a, b) in s.iter().zip(&back) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.image), bits(&b.image));
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = encode_dataset(&corpus());
        bytes[..8].copy_from_slice(b"FEDRE-X9");
        let msg = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(msg.contains("FEDRE-D1"), "{msg}");
        assert!(msg.contains("byte 0"), "{msg}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&corpus());
        match decode_dataset(&bytes[..12]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        match decode_dataset(&bytes[..200]) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 16 && offset <= 200),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_round_trip() {
        let m = Model::segmentation(16, 16, 3).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], MODEL_MAGIC);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_model(&encode_dataset(&[])).is_err());
    }

    #[test]
    fn gradient_round_trip() {
        let m = Model::segmentation(6, 6, 3).unwrap();
        let s = &corpus()[0];
        let x = Tensor::from_vec(&[1, 16, 16], s.image.data().to_vec()).unwrap();
        let m16 = Model::segmentation(16, 16, 3).unwrap();
        let g = m16.backward(&x, &s.tamper_mask).unwrap();
        assert_eq!(decode_gradients(&encode_gradients(&g)).unwrap(), g);
        let z = GradientSet::zeros_like(&m);
        assert_eq!(decode_gradients(&encode_gradients(&z)).unwrap(), z);
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("fedre-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.bin");
        save_dataset(&corpus(), &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), corpus());
        fs::remove_dir_all(&dir).unwrap();
    }
}
