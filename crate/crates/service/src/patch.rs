use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::stimulus_set::encode_png;
use crate::ServiceError;

/// Original pixels inside one reveal disk, clipped to the image. `(x, y)` is
/// the top-left corner of the patch in image coordinates; pixels outside the
/// disk have alpha 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub png_base64: String,
}

/// True when `(x, y)` is within `r` of `(cx, cy)`; the same rule as the click
/// masks used in analysis.
pub fn in_disk(x: u32, y: u32, cx: u32, cy: u32, r: f64) -> bool {
    let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
    dx * dx + dy * dy <= r * r
}

pub fn reveal_patch(original: &image::RgbImage, cx: u32, cy: u32, r: f64) -> image::RgbaImage {
    let (w, h) = original.dimensions();
    let x0 = (cx as f64 - r).floor().max(0.0) as u32;
    let y0 = (cy as f64 - r).floor().max(0.0) as u32;
    let x1 = ((cx as f64 + r).ceil() as u32).min(w - 1);
    let y1 = ((cy as f64 + r).ceil() as u32).min(h - 1);
    image::RgbaImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |px, py| {
        let (x, y) = (x0 + px, y0 + py);
        if in_disk(x, y, cx, cy, r) {
            let [r, g, b] = original.get_pixel(x, y).0;
            image::Rgba([r, g, b, 255])
        } else {
            image::Rgba([0, 0, 0, 0])
        }
    })
}

pub fn encode_patch(
    original: &image::RgbImage,
    cx: u32,
    cy: u32,
    r: f64,
) -> Result<Patch, ServiceError> {
    let img = reveal_patch(original, cx, cy, r);
    let x = (cx as f64 - r).floor().max(0.0) as u32;
    let y = (cy as f64 - r).floor().max(0.0) as u32;
    Ok(Patch {
        x,
        y,
        width: img.width(),
        height: img.height(),
        png_base64: STANDARD.encode(encode_png(&img)?),
    })
}

impl Patch {
    pub fn decode(&self) -> Result<image::RgbaImage, ServiceError> {
        let bytes = STANDARD
            .decode(&self.png_base64)
            .map_err(|e| ServiceError::Invalid(format!("patch base64: {e}")))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| ServiceError::Invalid(format!("patch png: {e}")))?;
        Ok(img.to_rgba8())
    }

    /// Draws the opaque patch pixels onto `canvas`.
    pub fn composite_onto(&self, canvas: &mut image::RgbImage) -> Result<(), ServiceError> {
        let img = self.decode()?;
        for (px, py, p) in img.enumerate_pixels() {
            if p.0[3] == 255 {
                canvas.put_pixel(
                    self.x + px,
                    self.y + py,
                    image::Rgb([p.0[0], p.0[1], p.0[2]]),
                );
            }
        }
        Ok(())
    }
}
