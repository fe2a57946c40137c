//! Images, samples and everything that turns them into network input.

mod augment;
mod dataset;
mod roi;
mod synthetic;

pub use augment::{augment, flip_horizontal, flip_vertical, rebalance, AugmentationSpec, Geometry};
pub use dataset::{dataset_hash, read_dataset, split_by_id, split_by_id_salted, write_dataset, DatasetMeta};
pub use roi::{extract_roi, largest_component, BBox, Roi, ROI_MARGIN};
pub use synthetic::{gen_synthetic, SyntheticSpec, GENERATOR_VERSION};

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

/// 8-bit image, row-major `H x W x C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Invalid(format!("image dims {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    /// Values divided by 255.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Inverse of [`Image::to_unit`], rounding and clamping to `[0, 255]`.
    pub fn from_unit(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Image::new(height, width, channels, data)
    }

    /// Three-channel copy; grey values are replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image::new(self.height, self.width, 3, data).expect("same dims")
    }

    /// Binary mask from a probability map, `p >= threshold` becoming 255.
    pub fn mask_from_probs(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        let data = probs.iter().map(|&p| if p >= threshold { 255 } else { 0 }).collect();
        Image::new(height, width, 1, data)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == 255)
    }

    /// Mask pixels as 0/1 floats.
    pub fn mask_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect()
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Invalid(format!(
                "crop ({x},{y},{w},{h}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let s = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[s..s + w * self.channels]);
        }
        Image::new(h, w, self.channels, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Image>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.channels != 1 || m.height != self.image.height || m.width != self.image.width {
                return Err(Error::Invalid(format!("{}: mask does not match image", self.id)));
            }
            if !m.is_binary() {
                return Err(Error::Invalid(format!("{}: mask is not binary", self.id)));
            }
        }
        if let Some(l) = self.label {
            if l >= classes {
                return Err(Error::Invalid(format!("{}: label {l} >= {classes}", self.id)));
            }
        }
        Ok(())
    }
}

/// Nearest-neighbour resize: output `(i, j)` reads source
/// `(floor(i * H / out_h), floor(j * W / out_w))`.
pub fn resize_nn(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!("resize to {out_h}x{out_w}")));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let sy = i * img.height / out_h;
        for j in 0..out_w {
            let sx = j * img.width / out_w;
            data.extend_from_slice(img.pixel(sy, sx));
        }
    }
    Image::new(out_h, out_w, c, data)
}

/// Per-image standardization: scale to `[0, 1]`, then subtract each
/// channel's mean and divide by its standard deviation (floored).
pub fn standardize(img: &Image) -> Vec<f64> {
    standardize_unit(&img.to_unit(), img.channels)
}

pub fn standardize_unit(values: &[f64], channels: usize) -> Vec<f64> {
    let n = (values.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for px in values.chunks(channels) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for px in values.chunks(channels) {
        for c in 0..channels {
            var[c] += (px[c] - mean[c]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    // a constant channel goes to exact zeros rather than rounding residue
    let constant: Vec<bool> = (0..channels)
        .map(|c| values.iter().skip(c).step_by(channels).all(|&v| v == values[c]))
        .collect();
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i % channels;
            if constant[c] {
                0.0
            } else {
                (v - mean[c]) / std[c]
            }
        })
        .collect()
}

/// `[B, H, W, 3]` batch of standardized images.
pub fn image_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Invalid("batch images differ in size".into()));
        }
        data.extend(standardize(img));
    }
    Tensor::new(&[images.len(), first.height, first.width, first.channels], data)
}

/// `[B, H, W, 1]` batch of 0/1 masks.
pub fn mask_batch(masks: &[&Image]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut data = Vec::with_capacity(masks.len() * first.data.len());
    for m in masks {
        data.extend(m.mask_values());
    }
    Tensor::new(&[masks.len(), first.height, first.width, 1], data)
}

fn next_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if tok.is_empty() {
                Err(Error::Format("truncated header".into()))
            } else {
                Ok(String::from_utf8_lossy(&tok).into_owned())
            };
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            b' ' | b'\t' | b'\n' | b'\r' => {
                if !tok.is_empty() {
                    return Ok(String::from_utf8_lossy(&tok).into_owned());
                }
            }
            b => tok.push(b),
        }
    }
}

/// Decodes binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut r = BufReader::new(bytes);
    let channels = match next_token(&mut r)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported magic {m:?}"))),
    };
    let mut dim = |what: &str| -> Result<usize> {
        next_token(&mut r)?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad {what}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} (only 255 supported)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    let need = width * height * channels;
    let mut data = Vec::with_capacity(need);
    r.take(need as u64).read_to_end(&mut data)?;
    if data.len() != need {
        return Err(Error::Format(format!("payload has {} of {need} bytes", data.len())));
    }
    Image::new(height, width, channels, data)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pnm(img))?;
    Ok(())
}
