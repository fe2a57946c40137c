use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Maximum shift as a fraction of each side.
    pub shift_frac: f64,
    pub zoom: (f64, f64),
    pub gamma: (f64, f64),
    pub log_correction: bool,
    pub sigmoid_correction: bool,
    /// Lower and upper percentiles mapped to 0 and 1.
    pub stretch_percentiles: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            rotation_deg: 30.0,
            flip_horizontal: true,
            flip_vertical: true,
            shift_frac: 0.1,
            zoom: (0.9, 1.1),
            gamma: (0.7, 1.5),
            log_correction: true,
            sigmoid_correction: true,
            stretch_percentiles: Some((2.0, 98.0)),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentationSpec {
            rotation_deg: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
            shift_frac: 0.0,
            zoom: (1.0, 1.0),
            gamma: (1.0, 1.0),
            log_correction: false,
            sigmoid_correction: false,
            stretch_percentiles: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !(self.rotation_deg.is_finite() && self.rotation_deg >= 0.0) {
            return Err(Error::Config(format!("rotation range {}", self.rotation_deg)));
        }
        if !(0.0..=0.5).contains(&self.shift_frac) {
            return Err(Error::Config(format!("shift fraction {}", self.shift_frac)));
        }
        if !range_ok(self.zoom) || !range_ok(self.gamma) {
            return Err(Error::Config("zoom and gamma ranges must be positive with lo <= hi".into()));
        }
        if let Some((lo, hi)) = self.stretch_percentiles {
            if !(0.0 <= lo && lo < hi && hi <= 100.0) {
                return Err(Error::Config(format!("stretch percentiles ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// A sampled geometric transform. Points move by rotation (counter-clockwise
/// on screen for positive angles) and zoom about the image centre, then the
/// shift, then the flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub angle_deg: f64,
    pub zoom: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Geometry {
    pub fn identity() -> Self {
        Geometry {
            angle_deg: 0.0,
            zoom: 1.0,
            shift_y: 0.0,
            shift_x: 0.0,
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn sample(spec: &AugmentationSpec, rng: &mut Rng, height: usize, width: usize) -> Self {
        let r = spec.rotation_deg;
        let angle_deg = uniform(rng, (-r, r));
        let zoom = uniform(rng, spec.zoom);
        let s = spec.shift_frac;
        let shift_y = uniform(rng, (-s, s)) * height as f64;
        let shift_x = uniform(rng, (-s, s)) * width as f64;
        let flip_h = rng.random_bool(0.5) && spec.flip_horizontal;
        let flip_v = rng.random_bool(0.5) && spec.flip_vertical;
        Geometry {
            angle_deg,
            zoom,
            shift_y,
            shift_x,
            flip_h,
            flip_v,
        }
    }

    fn trig(&self) -> (f64, f64) {
        let t = self.angle_deg.to_radians();
        let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
        (snap(t.cos()), snap(t.sin()))
    }

    /// Forward map of a continuous `(y, x)` position.
    pub fn map_point(&self, y: f64, x: f64, height: usize, width: usize) -> (f64, f64) {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let (cos, sin) = self.trig();
        let (dy, dx) = (y - cy, x - cx);
        let rx = dx * cos + dy * sin;
        let ry = -dx * sin + dy * cos;
        let mut oy = cy + ry * self.zoom + self.shift_y;
        let mut ox = cx + rx * self.zoom + self.shift_x;
        if self.flip_v {
            oy = height as f64 - 1.0 - oy;
        }
        if self.flip_h {
            ox = width as f64 - 1.0 - ox;
        }
        (oy, ox)
    }

    /// Nearest-neighbour inverse mapping, zero outside the source.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (cos, sin) = self.trig();
        let mut out = vec![0u8; h * w * c];
        for oy in 0..h {
            let y1 = if self.flip_v { h - 1 - oy } else { oy } as f64;
            for ox in 0..w {
                let x1 = if self.flip_h { w - 1 - ox } else { ox } as f64;
                let ry = (y1 - cy - self.shift_y) / self.zoom;
                let rx = (x1 - cx - self.shift_x) / self.zoom;
                let sx = (cx + rx * cos - ry * sin).round();
                let sy = (cy + rx * sin + ry * cos).round();
                if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                    let d = (oy * w + ox) * c;
                    out[d..d + c].copy_from_slice(img.pixel(sy as usize, sx as usize));
                }
            }
        }
        Image::new(h, w, c, out).expect("same dims as the source")
    }
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let g = Geometry {
        flip_h: true,
        ..Geometry::identity()
    };
    apply_geometry(s, &g)
}

pub fn flip_vertical(s: &Sample) -> Sample {
    let g = Geometry {
        flip_v: true,
        ..Geometry::identity()
    };
    apply_geometry(s, &g)
}

fn apply_geometry(s: &Sample, g: &Geometry) -> Sample {
    Sample {
        id: s.id.clone(),
        image: g.apply(&s.image),
        mask: s.mask.as_ref().map(|m| g.apply(m)),
        label: s.label,
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn intensity(img: &Image, spec: &AugmentationSpec, rng: &mut Rng) -> Image {
    let c = img.channels();
    let mut v = img.to_unit();
    // Parameters are drawn whether or not an op fires so streams stay aligned.
    let (fire, gamma) = (rng.random_bool(0.5), uniform(rng, spec.gamma));
    if fire && gamma != 1.0 {
        v.iter_mut().for_each(|x| *x = x.powf(gamma));
    }
    let (fire, alpha) = (rng.random_bool(0.5), rng.random_range(1.0..10.0));
    if fire && spec.log_correction {
        let norm = (1.0f64 + alpha).ln();
        v.iter_mut().for_each(|x| *x = (1.0 + alpha * *x).ln() / norm);
    }
    let (fire, gain) = (rng.random_bool(0.5), rng.random_range(4.0..8.0));
    if fire && spec.sigmoid_correction {
        v.iter_mut().for_each(|x| *x = 1.0 / (1.0 + (-gain * (*x - 0.5)).exp()));
    }
    let fire = rng.random_bool(0.5);
    if let (true, Some((plo, phi))) = (fire, spec.stretch_percentiles) {
        for ch in 0..c {
            let mut vals: Vec<f64> = v.iter().skip(ch).step_by(c).copied().collect();
            vals.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile(&vals, plo), percentile(&vals, phi));
            if hi > lo {
                v.iter_mut()
                    .skip(ch)
                    .step_by(c)
                    .for_each(|x| *x = ((*x - lo) / (hi - lo)).clamp(0.0, 1.0));
            }
        }
    }
    Image::from_unit(img.height(), img.width(), c, &v).expect("same dims as the source")
}

/// Geometric transform of image and mask together, then intensity changes
/// of the image alone. Each intensity op fires with probability one half.
pub fn augment(sample: &Sample, spec: &AugmentationSpec, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    let g = Geometry::sample(spec, rng, sample.image.height(), sample.image.width());
    let mut out = apply_geometry(sample, &g);
    out.image = intensity(&out.image, spec, rng);
    Ok(out)
}

/// Cyclic oversampling up to per-class targets. Originals come first and
/// unchanged; copies of original `x` are named `x_aug1`, `x_aug2`, ... and
/// each is augmented with its own seed derived from `spec.seed` and its id.
pub fn rebalance(samples: &[Sample], targets: &[usize], spec: &AugmentationSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); targets.len()];
    for s in samples {
        let l = s.label.ok_or_else(|| Error::Invalid(format!("{} has no label", s.id)))?;
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Invalid(format!("{}: label {l} without a target", s.id)))?
            .push(s);
    }
    let mut out = samples.to_vec();
    for (c, members) in by_class.iter().enumerate() {
        let target = targets[c];
        if members.len() > target {
            return Err(Error::Invalid(format!("class {c}: target {target} below count {}", members.len())));
        }
        if members.is_empty() && target > 0 {
            return Err(Error::Invalid(format!("class {c} has no samples to copy")));
        }
        for i in 0..target - members.len() {
            let src = members[i % members.len()];
            let id = format!("{}_aug{}", src.id, i / members.len() + 1);
            let mut r = rng::seeded(rng::derive_seed(spec.seed, &id));
            let mut copy = augment(src, spec, &mut r)?;
            copy.id = id;
            out.push(copy);
        }
    }
    Ok(out)
}
