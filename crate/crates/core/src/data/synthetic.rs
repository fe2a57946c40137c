//! Dermoscopy-like synthetic images with exact lesion masks.
//!
//! Each image is a textured skin background with one deformed elliptical
//! lesion. Appearance depends on the class: the first class is a smooth,
//! round, warm-brown blob; the middle class (three-class sets only) a flat,
//! light, scaly patch; the last class an irregular dark blob mixing several
//! hues. Hair curves and ruler marks are drawn over some images and never
//! touch the mask.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};

pub const GENERATOR_VERSION: u32 = 1;

const MIN_AREA: f64 = 0.02;
const MAX_AREA: f64 = 0.60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Relative class frequencies; empty means balanced.
    pub class_ratios: Vec<f64>,
    pub hair: bool,
    pub ruler: bool,
}

impl SyntheticSpec {
    pub fn new(n: usize, num_classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            num_classes,
            seed,
            height: 192,
            width: 256,
            class_ratios: Vec::new(),
            hair: true,
            ruler: true,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn with_ratios(mut self, ratios: &[f64]) -> Self {
        self.class_ratios = ratios.to_vec();
        self
    }

    /// Per-class sample counts by largest remainder.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let c = self.num_classes;
        let ratios = if self.class_ratios.is_empty() {
            vec![1.0; c]
        } else {
            self.class_ratios.clone()
        };
        if ratios.len() != c || ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("class ratios {ratios:?} for {c} classes")));
        }
        let total: f64 = ratios.iter().sum();
        let exact: Vec<f64> = ratios.iter().map(|r| r / total * self.n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let missing = self.n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

#[derive(Clone, Copy)]
enum Look {
    Smooth,
    Scaly,
    Irregular,
}

fn look(label: usize, classes: usize) -> Look {
    if label == 0 {
        Look::Smooth
    } else if label + 1 == classes {
        Look::Irregular
    } else {
        Look::Scaly
    }
}

struct Shape {
    cy: f64,
    cx: f64,
    ra: f64,
    rb: f64,
    cos: f64,
    sin: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn sample(rng: &mut Rng, h: usize, w: usize, look: Look) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let area = rng.random_range(0.06..0.35) * hf * wf;
        let r0 = (area / PI).sqrt();
        let q: f64 = match look {
            Look::Smooth => rng.random_range(0.8..1.0),
            _ => rng.random_range(0.6..1.0),
        };
        let phi = rng.random_range(0.0..PI);
        let (amp, kmax) = match look {
            Look::Smooth => ((0.0, 0.04), 3),
            Look::Scaly => ((0.02, 0.08), 4),
            Look::Irregular => ((0.08, 0.18), 7),
        };
        let harmonics = (2..=kmax)
            .map(|k| (k as f64, rng.random_range(amp.0..amp.1), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Shape {
            cy: rng.random_range(0.38..0.62) * hf,
            cx: rng.random_range(0.38..0.62) * wf,
            ra: r0 / q.sqrt(),
            rb: r0 * q.sqrt(),
            cos: phi.cos(),
            sin: phi.sin(),
            harmonics,
        }
    }

    fn circle(h: usize, w: usize, area: f64) -> Self {
        let r0 = (area * (h * w) as f64 / PI).sqrt();
        Shape {
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            ra: r0,
            rb: r0,
            cos: 1.0,
            sin: 0.0,
            harmonics: Vec::new(),
        }
    }

    /// Normalized radius of a pixel centre; inside the lesion when <= 1.
    fn rho(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.ra;
        let v = (-dx * self.sin + dy * self.cos) / self.rb;
        let theta = v.atan2(u);
        let edge = 1.0 + self.harmonics.iter().map(|(k, a, p)| a * (k * theta + p).sin()).sum::<f64>();
        (u * u + v * v).sqrt() / edge
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| self.rho(i / w, i % w)).collect()
    }
}

/// Smooth field in roughly `[-1, 1]` from a few random plane waves.
struct Waves(Vec<(f64, f64, f64)>);

impl Waves {
    fn new(rng: &mut Rng, count: usize, max_freq: f64) -> Self {
        Waves(
            (0..count)
                .map(|_| {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let f = rng.random_range(0.3..1.0) * max_freq;
                    (f * a.cos(), f * a.sin(), rng.random_range(0.0..2.0 * PI))
                })
                .collect(),
        )
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let n = self.0.len() as f64;
        self.0.iter().map(|(fy, fx, p)| (fy * y as f64 + fx * x as f64 + p).sin()).sum::<f64>() / n
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn draw_line(img: &mut Image, (y0, x0): (f64, f64), (y1, x1): (f64, f64), color: [u8; 3]) {
    let steps = ((y1 - y0).abs().max((x1 - x0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (y, x) = ((y0 + (y1 - y0) * t).round(), (x0 + (x1 - x0) * t).round());
        if y >= 0.0 && x >= 0.0 && (y as usize) < img.height() && (x as usize) < img.width() {
            img.set_pixel(y as usize, x as usize, &color);
        }
    }
}

fn draw_hair(img: &mut Image, rng: &mut Rng) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    for _ in 0..rng.random_range(1..=4) {
        let p0 = (rng.random_range(0.0..h), 0.0);
        let p2 = (rng.random_range(0.0..h), w - 1.0);
        let p1 = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let shade = rng.random_range(20..60) as u8;
        let color = [shade, shade.saturating_sub(5), shade.saturating_sub(8)];
        let steps = (2.0 * (h + w)) as usize;
        let bez = |t: f64, a: f64, b: f64, c: f64| (1.0 - t).powi(2) * a + 2.0 * (1.0 - t) * t * b + t * t * c;
        let mut prev = p0;
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            let p = (bez(t, p0.0, p1.0, p2.0), bez(t, p0.1, p1.1, p2.1));
            draw_line(img, prev, p, color);
            prev = p;
        }
    }
}

fn draw_ruler(img: &mut Image, rng: &mut Rng) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let top = rng.random_bool(0.5);
    let y = if top { (0.04 * h).max(2.0) } else { h - 1.0 - (0.04 * h).max(2.0) };
    let (x0, x1) = (rng.random_range(0.0..0.3) * w, rng.random_range(0.7..1.0) * w);
    let color = [40, 40, 40];
    draw_line(img, (y, x0), (y, x1), color);
    let tick = if top { 3.0 } else { -3.0 };
    let mut x = x0;
    while x <= x1 {
        draw_line(img, (y, x), (y + tick, x), color);
        x += 8.0;
    }
}

fn render(rng: &mut Rng, h: usize, w: usize, label: usize, classes: usize, spec: &SyntheticSpec) -> Sample {
    let look = look(label, classes);
    let skin_r = rng.random_range(200.0..235.0);
    let skin_g = skin_r - rng.random_range(30.0..50.0);
    let skin_b = skin_g - rng.random_range(15.0..35.0);
    let skin_tex = Waves::new(rng, 3, 0.15);

    let mut shape = Shape::sample(rng, h, w, look);
    let mut rho = shape.rasterize(h, w);
    let area_ok = |rho: &[f64]| {
        let frac = rho.iter().filter(|&&r| r <= 1.0).count() as f64 / (h * w) as f64;
        (MIN_AREA..=MAX_AREA).contains(&frac)
    };
    let mut tries = 0;
    while !area_ok(&rho) && tries < 20 {
        shape = Shape::sample(rng, h, w, look);
        rho = shape.rasterize(h, w);
        tries += 1;
    }
    if !area_ok(&rho) {
        shape = Shape::circle(h, w, 0.1);
        rho = shape.rasterize(h, w);
    }

    let (base, hue_b, hue_c) = match look {
        Look::Smooth => (
            [rng.random_range(140.0..165.0), rng.random_range(85.0..105.0), rng.random_range(55.0..75.0)],
            [0.0; 3],
            [0.0; 3],
        ),
        Look::Scaly => (
            [rng.random_range(165.0..190.0), rng.random_range(130.0..150.0), rng.random_range(95.0..115.0)],
            [0.0; 3],
            [0.0; 3],
        ),
        Look::Irregular => (
            [rng.random_range(60.0..80.0), rng.random_range(38.0..52.0), rng.random_range(30.0..42.0)],
            [rng.random_range(40.0..55.0), rng.random_range(40.0..55.0), rng.random_range(65.0..85.0)],
            [rng.random_range(110.0..130.0), rng.random_range(48.0..62.0), rng.random_range(42.0..58.0)],
        ),
    };
    let hue_field_b = Waves::new(rng, 3, 0.12);
    let hue_field_c = Waves::new(rng, 3, 0.12);
    let cell = rng.random_range(3..=4);
    let salt: u64 = rng.random();

    let mut data = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r = rho[y * w + x];
            let noise: f64 = rng.random_range(-6.0..6.0);
            let px = if r <= 1.0 {
                mask.push(255);
                match look {
                    Look::Smooth => {
                        let shade = 0.85 + 0.15 * r;
                        base.map(|c| c * shade + noise * 0.6)
                    }
                    Look::Scaly => {
                        let (cy, cx) = ((y / cell) as u64, (x / cell) as u64);
                        let hsh = rng::mix64(salt ^ (cy << 32 | cx));
                        let scale = ((hsh % 1000) as f64 / 1000.0 - 0.5) * 70.0;
                        base.map(|c| c + scale + noise)
                    }
                    Look::Irregular => {
                        let wb = (hue_field_b.at(y, x) + 1.0) / 2.0;
                        let wc = ((hue_field_c.at(y, x) + 1.0) / 2.0) * (1.0 - wb);
                        let wa = 1.0 - wb - wc;
                        [0, 1, 2].map(|i| base[i] * wa + hue_b[i] * wb + hue_c[i] * wc + noise * 1.3)
                    }
                }
            } else {
                mask.push(0);
                let t = skin_tex.at(y, x) * 8.0 + noise;
                [skin_r + t, skin_g + t, skin_b + t]
            };
            data.extend(px.map(to_u8));
        }
    }
    let mut image = Image::new(h, w, 3, data).expect("generated dims");
    if spec.hair && rng.random_bool(0.3) {
        draw_hair(&mut image, rng);
    }
    if spec.ruler && rng.random_bool(0.2) {
        draw_ruler(&mut image, rng);
    }
    Sample {
        id: String::new(),
        image,
        mask: Some(Image::new(h, w, 1, mask).expect("generated dims")),
        label: Some(label),
    }
}

/// Generates `spec.n` labelled samples with ids `syn0000`, `syn0001`, ...
/// The output is a pure function of the spec.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if !(2..=3).contains(&spec.num_classes) {
        return Err(Error::Config(format!("unsupported class count {}", spec.num_classes)));
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::Config(format!("image size {}x{} too small", spec.height, spec.width)));
    }
    let counts = spec.class_counts()?;
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
    labels.shuffle(&mut rng::seeded(rng::derive_seed(spec.seed, "labels")));
    Ok(par::map_indexed(labels.len(), |i| {
        let id = format!("syn{i:04}");
        let mut r = rng::seeded(rng::derive_seed(spec.seed, &id));
        let mut s = render(&mut r, spec.height, spec.width, labels[i], spec.num_classes, spec);
        s.id = id;
        s
    }))
}
