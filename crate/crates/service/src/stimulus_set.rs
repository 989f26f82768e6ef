use std::collections::HashMap;
use std::io::Cursor;

use ferbench_core::saliency::scaled_blur_kernel;
use ferbench_core::stimuli::{blurred_grayscale, Image, StimulusImage};

use crate::ServiceError;

/// A loaded stimulus set with the blurred renditions pre-encoded.
#[derive(Debug)]
pub struct StimulusSet {
    pub id: String,
    pub blur_k: usize,
    items: Vec<StimulusImage>,
    original: Vec<image::RgbImage>,
    blurred_png: Vec<Vec<u8>>,
    by_id: HashMap<String, usize>,
}

pub(crate) fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>, ServiceError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Internal(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

impl StimulusSet {
    /// Builds the set; `blur_k` defaults to the width-scaled kernel of the
    /// first image.
    pub fn new(
        id: impl Into<String>,
        items: Vec<StimulusImage>,
        blur_k: Option<usize>,
    ) -> Result<Self, ServiceError> {
        let first = items
            .first()
            .ok_or_else(|| ServiceError::Config("stimulus set is empty".into()))?;
        let (w, h) = (first.pixels.width(), first.pixels.height());
        let blur_k = blur_k.unwrap_or_else(|| scaled_blur_kernel(w));
        let mut by_id = HashMap::with_capacity(items.len());
        let mut original = Vec::with_capacity(items.len());
        let mut blurred_png = Vec::with_capacity(items.len());
        for (i, s) in items.iter().enumerate() {
            if (s.pixels.width(), s.pixels.height()) != (w, h) || s.pixels.channels() != 3 {
                return Err(ServiceError::Config(format!(
                    "stimulus {} differs in shape from the first",
                    s.id
                )));
            }
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(ServiceError::Config(format!(
                    "duplicate stimulus id {}",
                    s.id
                )));
            }
            original.push(s.pixels.to_rgb8());
            blurred_png.push(encode_png(
                &blurred_grayscale(&s.pixels, blur_k)?.to_rgb8(),
            )?);
        }
        Ok(Self {
            id: id.into(),
            blur_k,
            items,
            original,
            blurred_png,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.original[0].width(), self.original[0].height())
    }

    pub fn items(&self) -> &[StimulusImage] {
        &self.items
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn item(&self, i: usize) -> &StimulusImage {
        &self.items[i]
    }

    pub fn blurred_png(&self, i: usize) -> &[u8] {
        &self.blurred_png[i]
    }

    /// The 8-bit rendition that reveals are cut from.
    pub fn original_rgb8(&self, i: usize) -> &image::RgbImage {
        &self.original[i]
    }

    pub fn blurred_image(&self, i: usize) -> Result<Image, ServiceError> {
        Ok(blurred_grayscale(&self.items[i].pixels, self.blur_k)?)
    }
}
