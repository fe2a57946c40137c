//! Drawing results onto images, and the run-length mask encoding used by
//! the HTTP API.

use crate::data::{BBox, Image};
use crate::error::{Error, Result};

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const BOX_THICKNESS: usize = 2;
/// Horizontal advance of one glyph, including the gap column.
pub const GLYPH_ADVANCE: usize = 6;
pub const GLYPH_HEIGHT: usize = 7;

/// 5x7 glyph rows, most significant of the low five bits on the left.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        ' ' => [0; 7],
        _ => return None,
    })
}

/// Pixels a string covers when drawn with its top-left corner at `(x, y)`.
/// Characters without a glyph advance like a space.
pub fn text_pixels(text: &str, x: usize, y: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (n, c) in text.chars().enumerate() {
        let rows = glyph(c).unwrap_or([0; 7]);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    out.push((y + dy, x + n * GLYPH_ADVANCE + dx));
                }
            }
        }
    }
    out
}

/// Pixels of the box outline, `BOX_THICKNESS` wide and inside the box.
pub fn box_pixels(bbox: &BBox) -> Vec<(usize, usize)> {
    let t = BOX_THICKNESS;
    let mut out = Vec::new();
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            let (dy, dx) = (y - bbox.y, x - bbox.x);
            if dy < t || dx < t || dy + t >= bbox.h || dx + t >= bbox.w {
                out.push((y, x));
            }
        }
    }
    out
}

/// Indices of mask pixels with at least one background 4-neighbour inside
/// the image.
pub fn contour_pixels(mask: &Image) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    let fg = mask.mask_values();
    let on = |y: usize, x: usize| fg[y * w + x] > 0.5;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            let edge = (y > 0 && !on(y - 1, x))
                || (y + 1 < h && !on(y + 1, x))
                || (x > 0 && !on(y, x - 1))
                || (x + 1 < w && !on(y, x + 1));
            if edge {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// RGB copy of `img` with the lesion contour, the box and a text label
/// drawn in green. The label starts just inside the box's top-left corner
/// and is clipped to the image.
pub fn annotate(img: &Image, bbox: &BBox, mask: Option<&Image>, label: &str) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if !bbox.fits(h, w) {
        return Err(Error::Invalid(format!("box {bbox:?} outside {w}x{h}")));
    }
    let mut out = img.to_rgb();
    if let Some(m) = mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::mismatch("annotate", &[m.height(), m.width()], &[h, w]));
        }
        for i in contour_pixels(m) {
            out.set_pixel(i / w, i % w, &GREEN);
        }
    }
    for (y, x) in box_pixels(bbox) {
        out.set_pixel(y, x, &GREEN);
    }
    for (y, x) in text_pixels(label, bbox.x + BOX_THICKNESS + 1, bbox.y + BOX_THICKNESS + 1) {
        if y < h && x < w {
            out.set_pixel(y, x, &GREEN);
        }
    }
    Ok(out)
}

/// Row-major run lengths alternating background and lesion, starting with
/// background (the first run may be empty).
pub fn rle_encode(mask: &Image) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &v in mask.data() {
        let on = v >= 128;
        if on != current {
            runs.push(len);
            current = on;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], height: usize, width: usize) -> Result<Image> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (height * width) as u64 {
        return Err(Error::Invalid(format!("runs cover {total} pixels, mask has {}", height * width)));
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, &r) in runs.iter().enumerate() {
        let v = if i % 2 == 0 { 0 } else { 255 };
        data.extend(std::iter::repeat_n(v, r as usize));
    }
    Image::new(height, width, 1, data)
}
