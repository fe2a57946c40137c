use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Fraction of the tight box added on each side.
pub const ROI_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn full(height: usize, width: usize) -> Self {
        BBox {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// Maps the box between two resolutions of the same image, rounding
    /// edges to the nearest pixel and keeping at least one pixel per side.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let edge = |v: usize, from: usize, to: usize| ((v * to) as f64 / from as f64).round() as usize;
        let x0 = edge(self.x, from.1, to.1).min(to.1 - 1);
        let y0 = edge(self.y, from.0, to.0).min(to.0 - 1);
        let x1 = edge(self.x + self.w, from.1, to.1).clamp(x0 + 1, to.1);
        let y1 = edge(self.y + self.h, from.0, to.0).clamp(y0 + 1, to.0);
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub crop: Image,
    /// The thresholded mask was empty and the whole image was used.
    pub degenerate: bool,
}

/// Pixel indices of the largest 4-connected foreground component; ties go
/// to the component reached first in raster order.
pub fn largest_component(fg: &[bool], height: usize, width: usize) -> Vec<usize> {
    let mut seen = vec![false; fg.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Box around the largest component of `probs >= threshold`, grown by
/// `ceil(margin * side)` on each side and clamped to the image, and the
/// corresponding crop of `img`.
pub fn extract_roi(probs: &[f64], img: &Image, threshold: f64, margin: f64) -> Result<Roi> {
    let (h, w) = (img.height(), img.width());
    if probs.len() != h * w {
        return Err(Error::mismatch("extract_roi", &[probs.len()], &[h, w]));
    }
    let fg: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let comp = largest_component(&fg, h, w);
    if comp.is_empty() {
        return Ok(Roi {
            bbox: BBox::full(h, w),
            crop: img.clone(),
            degenerate: true,
        });
    }
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for &i in &comp {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let mx = (margin * (x1 - x0 + 1) as f64).ceil() as usize;
    let my = (margin * (y1 - y0 + 1) as f64).ceil() as usize;
    let (x0, y0) = (x0.saturating_sub(mx), y0.saturating_sub(my));
    let (x1, y1) = ((x1 + mx).min(w - 1), (y1 + my).min(h - 1));
    let bbox = BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    };
    Ok(Roi {
        crop: img.crop(bbox.x, bbox.y, bbox.w, bbox.h)?,
        bbox,
        degenerate: false,
    })
}
