//! Decoding of uploaded images. The core library only reads binary PPM/PGM;
//! PNG, JPEG and BMP are handled here.

use dermo_core::data::{decode_pnm, Image};

/// Decodes PNG, JPEG, BMP or binary PPM/PGM bytes to an RGB or gray image.
pub fn decode_image(bytes: &[u8]) -> Result<Image, String> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(bytes).map_err(|e| e.to_string());
    }
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    use image::ImageFormat as F;
    if !matches!(format, F::Png | F::Jpeg | F::Bmp | F::Pnm) {
        return Err(format!("unsupported image format {format:?}"));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(h as usize, w as usize, 3, rgb.into_raw()).map_err(|e| e.to_string())
}
