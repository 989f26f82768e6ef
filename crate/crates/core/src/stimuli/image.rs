use std::path::Path;

use crate::autodiff::Tensor;

use super::StimuliError;

/// Interleaved (HWC) image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, StimuliError> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(StimuliError::Shape(format!(
                "{width}x{height}x{channels} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Channel-planar copy `[C,H,W]` for network input.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; hw * self.channels];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn from_chw(
        width: usize,
        height: usize,
        channels: usize,
        chw: &[f32],
    ) -> Result<Self, StimuliError> {
        let hw = width * height;
        if chw.len() != hw * channels {
            return Err(StimuliError::Shape("planar buffer length".into()));
        }
        let mut data = vec![0.0; hw * channels];
        for p in 0..hw {
            for c in 0..channels {
                data[p * channels + c] = chw[c * hw + p];
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            if self.channels >= 3 {
                image::Rgb([q(p[0]), q(p[1]), q(p[2])])
            } else {
                image::Rgb([q(p[0]); 3])
            }
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data,
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), StimuliError> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, StimuliError> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

/// Stacks images into an `[N,C,H,W]` tensor.
pub fn images_to_batch<'a, I>(images: I) -> Result<Tensor<f32>, StimuliError>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = (img.channels, img.height, img.width);
        if *dims.get_or_insert(d) != d {
            return Err(StimuliError::Shape("batch images differ in size".into()));
        }
        data.extend(img.to_chw().into_iter().map(|v| v - 0.5));
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| StimuliError::Shape("empty batch".into()))?;
    Tensor::new(vec![n, c, h, w], data).map_err(|e| StimuliError::Shape(e.to_string()))
}

/// Mean of the `k x k` window around every pixel with reflect-101 borders.
///
/// For even `k` the window spans `(k-1)/2` pixels before and `k/2` after the
/// output pixel.
pub fn box_blur(img: &Image, k: usize) -> Result<Image, StimuliError> {
    let (w, h, c) = (img.width, img.height, img.channels);
    if k == 0 || k > 2 * w.min(h) {
        return Err(StimuliError::BlurKernel {
            k,
            width: w,
            height: h,
        });
    }
    if k == 1 {
        return Ok(img.clone());
    }
    let before = ((k - 1) / 2) as isize;
    let fold = |i: isize, n: usize| crate::autodiff::reflect101_index(i, n);
    let mut horiz = vec![0.0f64; w * h * c];
    let mut line = vec![0.0f64; w + k];
    for y in 0..h {
        for ch in 0..c {
            // prefix sums over the reflected row
            line[0] = 0.0;
            for t in 0..w + k - 1 {
                let sx = fold(t as isize - before, w);
                line[t + 1] = line[t] + img.data[(y * w + sx) * c + ch] as f64;
            }
            for x in 0..w {
                horiz[(y * w + x) * c + ch] = (line[x + k] - line[x]) / k as f64;
            }
        }
    }
    let mut out = vec![0.0f32; w * h * c];
    let mut col = vec![0.0f64; h + k];
    for x in 0..w {
        for ch in 0..c {
            col[0] = 0.0;
            for t in 0..h + k - 1 {
                let sy = fold(t as isize - before, h);
                col[t + 1] = col[t] + horiz[(sy * w + x) * c + ch];
            }
            for y in 0..h {
                out[(y * w + x) * c + ch] = ((col[y + k] - col[y]) / k as f64) as f32;
            }
        }
    }
    Image::new(w, h, c, out)
}

/// Luminance `0.299 R + 0.587 G + 0.114 B`, replicated into three channels.
pub fn to_grayscale(img: &Image) -> Result<Image, StimuliError> {
    if img.channels != 3 {
        return Err(StimuliError::Shape(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut data = Vec::with_capacity(img.data.len());
    for p in img.data.chunks_exact(3) {
        let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        data.extend_from_slice(&[l, l, l]);
    }
    Image::new(img.width, img.height, 3, data)
}

/// The blurred-grayscale rendition shown to participants before any reveal.
pub fn blurred_grayscale(img: &Image, k: usize) -> Result<Image, StimuliError> {
    to_grayscale(&box_blur(img, k)?)
}
