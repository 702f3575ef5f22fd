//! Image datasets: a seeded synthetic generator and a small binary format.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "CMAD" | u32 version | u32 count | u16 H | u16 W | u8 channels | u8 label_width
//! count × ( label_width label bytes | H·W·C pixel bytes, row-major, channel-last )
//! ```
//!
//! Pixels are stored as `u8` and mapped to `[-1, 1]` on load.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"CMAD";
pub const DATASET_VERSION: u32 = 1;

/// In-memory images, channel-first per sample, values roughly in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::Dataset(format!(
                "{} pixel values do not split into {channels}x{height}x{width} images",
                pixels.len()
            )));
        }
        let count = pixels.len() / per;
        if labels.as_ref().is_some_and(|l| l.len() != count) {
            return Err(Error::Dataset("label count differs from image count".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Number of distinct label values, `max + 1`.
    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// Stack the selected samples into `[B, C, H, W]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data).expect("consistent batch shape")
    }

    /// Split off the last `fraction` of samples.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let held = ((self.len() as f64) * fraction).round() as usize;
        if held == 0 || held >= self.len() {
            return Err(Error::config(format!("split fraction {fraction} leaves an empty side")));
        }
        let cut = self.len() - held;
        let n = self.sample_len();
        let part = |lo: usize, hi: usize| Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels[lo * n..hi * n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[lo..hi].to_vec()),
        };
        Ok((part(0, cut), part(cut, self.len())))
    }

    /// Write in the binary layout. Pixels are clamped and quantized.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let label_width: u8 = if self.labels.is_some() { 4 } else { 0 };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.height as u16).to_le_bytes())?;
        w.write_all(&(self.width as u16).to_le_bytes())?;
        w.write_all(&[self.channels as u8, label_width])?;
        let (h, wd, c) = (self.height, self.width, self.channels);
        let mut buf = vec![0u8; h * wd * c];
        for i in 0..self.len() {
            if let Some(l) = &self.labels {
                w.write_all(&l[i].to_le_bytes())?;
            }
            let img = self.image(i);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..wd {
                        buf[(y * wd + x) * c + ch] = quantize(img[(ch * h + y) * wd + x]);
                    }
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 18];
        read_exact(&mut r, &mut header, "header")?;
        if &header[..4] != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic, not a CMAD file".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported dataset version {version}")));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let h = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
        let w = u16::from_le_bytes(header[14..16].try_into().unwrap()) as usize;
        let (c, lw) = (header[16] as usize, header[17] as usize);
        if lw > 4 {
            return Err(Error::Dataset(format!("label width {lw} exceeds 4 bytes")));
        }
        let mut pixels = vec![0f32; count * c * h * w];
        let mut labels = (lw > 0).then(|| Vec::with_capacity(count));
        let mut buf = vec![0u8; h * w * c];
        let mut lbuf = [0u8; 4];
        for i in 0..count {
            if let Some(l) = labels.as_mut() {
                read_exact(&mut r, &mut lbuf[..lw], "label")?;
                l.push(u32::from_le_bytes(lbuf));
            }
            read_exact(&mut r, &mut buf, "pixels")?;
            let img = &mut pixels[i * c * h * w..(i + 1) * c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img[(ch * h + y) * w + x] = dequantize(buf[(y * w + x) * c + ch]);
                    }
                }
            }
        }
        Dataset::new(c, h, w, pixels, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Dataset(format!("truncated dataset while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Synthetic generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub count: usize,
    pub class_count: usize,
    /// Standard deviation of the per-pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
    /// Index of the first generated sample. Disjoint ranges give disjoint
    /// samples drawn from the same class templates.
    #[serde(default)]
    pub first_index: u64,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.25
}

/// One class template: a few low-frequency plane waves with channel colors.
struct Template {
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Template {
    fn sample(rng: &mut impl Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let fx = rng.gen_range(-3i32..=3) as f64;
                let fy = rng.gen_range(0i32..=3) as f64;
                let (fx, fy) = if fx == 0.0 && fy == 0.0 { (1.0, 0.0) } else { (fx, fy) };
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let color = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                (fx, fy, phase, color)
            })
            .collect();
        Self { waves }
    }
}

/// Class-dependent low-frequency patterns plus seeded noise. Each sample
/// gets its class template at a random spatial shift and contrast.
/// Fully determined by the spec.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.class_count < 1 || spec.count == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::config(format!("degenerate synthetic dataset spec {spec:?}")));
    }
    let templates: Vec<Template> = (0..spec.class_count)
        .map(|k| Template::sample(&mut rng::stream(spec.seed, &[streams::SYNTHETIC, 0, k as u64])))
        .collect();
    let s = spec.image_size;
    let per = spec.channels * s * s;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(spec.count * per);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut r = rng::stream(spec.seed, &[streams::SYNTHETIC, 1, spec.first_index + i as u64]);
        let label = r.gen_range(0..spec.class_count);
        let (sx, sy) = (r.gen_range(-0.15..0.15), r.gen_range(-0.15..0.15));
        let amp = r.gen_range(0.35..0.6);
        let t = &templates[label];
        for ch in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (x as f64 / s as f64 + sx, y as f64 / s as f64 + sy);
                    let mut val = 0.0;
                    for &(fx, fy, ph, col) in &t.waves {
                        let arg = std::f64::consts::TAU * (fx * u + fy * v) + ph;
                        val += col[ch % 3] * arg.sin();
                    }
                    let n: f64 = noise.sample(&mut r);
                    pixels.push((amp * val / 1.5 + n).clamp(-1.0, 1.0) as f32);
                }
            }
        }
        labels.push(label as u32);
    }
    Dataset::new(spec.channels, s, s, pixels, Some(labels))
}

/// Per-epoch shuffled order, derived from `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[streams::DATA_ORDER, epoch]));
    order
}

/// Sample indices of training step `step` under a drop-last epoch order.
pub fn step_indices(len: usize, batch: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let per_epoch = (len / batch.max(1)) as u64;
    if per_epoch == 0 || batch == 0 {
        return Err(Error::config(format!("batch size {batch} exceeds dataset size {len}")));
    }
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    Ok(epoch_order(len, seed, epoch)[k * batch..(k + 1) * batch].to_vec())
}

/// Per-sample brightness and contrast jitter on `[B, C, H, W]` images.
pub fn color_jitter<T: Scalar>(images: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = images.clone();
    let b = images.shape()[0];
    let per = images.numel() / b.max(1);
    for chunk in out.data_mut().chunks_mut(per) {
        let contrast = T::from_f64(rng.gen_range(0.8..1.2));
        let bright = T::from_f64(rng.gen_range(-0.1..0.1));
        let mean = chunk.iter().copied().sum::<T>() / T::from_f64(per as f64);
        for v in chunk.iter_mut() {
            *v = (*v - mean) * contrast + mean + bright;
        }
    }
    out
}
