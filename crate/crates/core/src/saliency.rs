//! CAM, GradCAM and Extremal Perturbation on a frozen classifier, plus the
//! normalize, scale, threshold and average steps used before dice comparison.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gaussian_kernel, upsample_planes, AutodiffError, Graph, Network, Tensor};
use crate::stimuli::{box_blur, images_to_batch, BinaryMask, Image, StimuliError};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("class index {index} out of range for a {classes}-way head")]
    ClassIndex { index: usize, classes: usize },
    #[error("extremal perturbation diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid saliency configuration: {0}")]
    Config(String),
    #[error("saliency maps differ in shape: {0}")]
    Shape(String),
    #[error("no maps to average")]
    Empty,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Stimuli(#[from] StimuliError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    Cam,
    Gradcam,
    ExtremalPerturbation,
    HumanClicks,
}

impl SaliencySource {
    pub fn name(self) -> &'static str {
        match self {
            SaliencySource::Cam => "cam",
            SaliencySource::Gradcam => "gradcam",
            SaliencySource::ExtremalPerturbation => "extremal_perturbation",
            SaliencySource::HumanClicks => "human_clicks",
        }
    }
}

/// Row-major `H x W` saliency values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
    pub source: SaliencySource,
    pub class_index: usize,
}

impl SaliencyMap {
    pub fn raw(
        width: usize,
        height: usize,
        values: Vec<f64>,
        source: SaliencySource,
        class_index: usize,
    ) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(SaliencyError::Shape(format!(
                "{width}x{height} map with {} values",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            normalized: false,
            source,
            class_index,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(v - min) / (max - min)`; a constant map becomes all zeros.
    pub fn normalize(&self) -> SaliencyMap {
        let (lo, hi) = min_max(&self.values);
        let span = hi - lo;
        let values = if span > 0.0 && span.is_finite() {
            self.values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        SaliencyMap {
            values,
            normalized: true,
            ..self.clone()
        }
    }

    /// 8-bit grayscale PNG of the scaled map plus a `.json` sidecar holding the
    /// source, class index and the given configuration.
    pub fn export(
        &self,
        png: impl AsRef<Path>,
        config: &serde_json::Value,
    ) -> Result<(), SaliencyError> {
        let png = png.as_ref();
        let scaled = normalize_scale_255(self);
        image::GrayImage::from_raw(self.width as u32, self.height as u32, scaled.values)
            .expect("sized buffer")
            .save(png)?;
        let sidecar = serde_json::json!({
            "source": self.source,
            "class_index": self.class_index,
            "config": config,
        });
        std::fs::write(
            png.with_extension("json"),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Integer saliency values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaledMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

/// `round(255 * (v - min) / (max - min))`, all zeros for a constant map.
pub fn normalize_scale_255(m: &SaliencyMap) -> ScaledMap {
    let values = m
        .normalize()
        .values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    ScaledMap {
        width: m.width,
        height: m.height,
        values,
    }
}

pub const DEFAULT_THRESHOLD: u8 = 50;

/// Bit is set iff the scaled value is at least `t`.
pub fn threshold_mask(m: &ScaledMap, t: u8) -> BinaryMask {
    BinaryMask::from_fn(m.width, m.height, |x, y| m.values[y * m.width + x] >= t)
}

/// Element-wise mean, renormalized.
pub fn average_maps(maps: &[SaliencyMap]) -> Result<SaliencyMap, SaliencyError> {
    let first = maps.first().ok_or(SaliencyError::Empty)?;
    let mut acc = vec![0.0; first.values.len()];
    for m in maps {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(SaliencyError::Shape(format!(
                "{}x{} vs {}x{}",
                m.width, m.height, first.width, first.height
            )));
        }
        acc.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(SaliencyMap::raw(
        first.width,
        first.height,
        acc,
        first.source,
        first.class_index,
    )?
    .normalize())
}

fn check_class(net: &Network<f32>, class_index: usize) -> Result<(), SaliencyError> {
    let classes = net.head_class_count();
    if class_index >= classes {
        return Err(SaliencyError::ClassIndex {
            index: class_index,
            classes,
        });
    }
    Ok(())
}

/// Pre-pool feature maps `[K, fh, fw]` of one image.
pub fn feature_maps(
    net: &Network<f32>,
    img: &Image,
) -> Result<(usize, usize, usize, Vec<f32>), SaliencyError> {
    let batch = images_to_batch([img])?;
    let mut graph = Graph::new();
    let input = graph.leaf(batch, false);
    let vars = net.forward_on(&mut graph, input, false)?;
    let f = graph.value(vars.features);
    let s = f.shape();
    Ok((s[1], s[2], s[3], f.data().to_vec()))
}

/// `sum_k w_k[class] * f_k` at feature resolution, unnormalized.
pub fn cam_features(
    net: &Network<f32>,
    img: &Image,
    class_index: usize,
) -> Result<(usize, usize, Vec<f64>), SaliencyError> {
    check_class(net, class_index)?;
    let (k, fh, fw, f) = feature_maps(net, img)?;
    let w = &net.head_weight().data()[class_index * k..(class_index + 1) * k];
    let mut out = vec![0.0f64; fh * fw];
    for (c, &wc) in w.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&f[c * fh * fw..(c + 1) * fh * fw]) {
            *o += wc as f64 * v as f64;
        }
    }
    Ok((fh, fw, out))
}

fn upsampled(fh: usize, fw: usize, raw: &[f64], img: &Image) -> Vec<f64> {
    upsample_planes(raw, 1, fh, fw, img.height(), img.width())
}

/// Class activation map, upsampled to the image and normalized.
pub fn cam(
    net: &Network<f32>,
    img: &Image,
    class_index: usize,
) -> Result<SaliencyMap, SaliencyError> {
    let (fh, fw, raw) = cam_features(net, img, class_index)?;
    let up = upsampled(fh, fw, &raw, img);
    Ok(SaliencyMap::raw(
        img.width(),
        img.height(),
        up,
        SaliencySource::Cam,
        class_index,
    )?
    .normalize())
}

/// Spatial mean of `d logit[class] / d f_k` for every feature channel, plus
/// the feature maps themselves.
pub fn gradcam_weights(
    net: &Network<f32>,
    img: &Image,
    class_index: usize,
) -> Result<(Vec<f64>, usize, usize, Vec<f32>), SaliencyError> {
    check_class(net, class_index)?;
    let batch = images_to_batch([img])?;
    let mut graph = Graph::new();
    // the input must track gradients so that the feature node does
    let input = graph.leaf(batch, true);
    let vars = net.forward_on(&mut graph, input, false)?;
    let target = graph.pick(vars.logits, class_index)?;
    graph.backward(target)?;
    let f = graph.value(vars.features);
    let (k, fh, fw) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let g = graph
        .grad(vars.features)
        .ok_or_else(|| AutodiffError::MissingGradient("features".into()))?;
    let hw = fh * fw;
    let alpha = (0..k)
        .map(|c| {
            g[c * hw..(c + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / hw as f64
        })
        .collect();
    Ok((alpha, fh, fw, f.data().to_vec()))
}

/// `ReLU(sum_k alpha_k f_k)` at feature resolution, upsampled and normalized.
pub fn gradcam(
    net: &Network<f32>,
    img: &Image,
    class_index: usize,
) -> Result<SaliencyMap, SaliencyError> {
    let (alpha, fh, fw, f) = gradcam_weights(net, img, class_index)?;
    let hw = fh * fw;
    let mut raw = vec![0.0f64; hw];
    for (c, &a) in alpha.iter().enumerate() {
        for (o, &v) in raw.iter_mut().zip(&f[c * hw..(c + 1) * hw]) {
            *o += a * v as f64;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = upsampled(fh, fw, &raw, img);
    Ok(SaliencyMap::raw(
        img.width(),
        img.height(),
        up,
        SaliencySource::Gradcam,
        class_index,
    )?
    .normalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    /// Box blur; `None` uses `round(70 * width / 224)`.
    Blur { kernel: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EPConfig {
    pub area_fraction: f64,
    /// Gaussian sigma in pixels; `None` means 5% of the image width.
    pub smoothing_sigma: Option<f64>,
    pub iterations: usize,
    pub step_size: f64,
    pub lambda_max: f64,
    /// Mask latent is `1 / latent_stride` of the input resolution.
    pub latent_stride: usize,
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl Default for EPConfig {
    fn default() -> Self {
        Self {
            area_fraction: 0.1,
            smoothing_sigma: None,
            iterations: 300,
            step_size: 0.05,
            lambda_max: 10.0,
            latent_stride: 8,
            perturbation: Perturbation::Blur { kernel: None },
            seed: 0,
        }
    }
}

impl EPConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        let bad = |m: &str| Err(SaliencyError::Config(m.into()));
        if !(self.area_fraction > 0.0 && self.area_fraction < 1.0) {
            return bad("area_fraction must lie in (0, 1)");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.step_size > 0.0) || !(self.lambda_max >= 0.0) {
            return bad("step_size must be positive and lambda_max non-negative");
        }
        if self.latent_stride == 0 {
            return bad("latent_stride must be >= 1");
        }
        if matches!(self.smoothing_sigma, Some(s) if !(s >= 0.0)) {
            return bad("smoothing_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn blur_kernel(&self, width: usize) -> usize {
        match self.perturbation {
            Perturbation::Blur { kernel: Some(k) } => k,
            Perturbation::Blur { kernel: None } => scaled_blur_kernel(width),
        }
    }

    pub fn sigma(&self, width: usize) -> f64 {
        self.smoothing_sigma.unwrap_or(0.05 * width as f64)
    }
}

/// The 70-pixel reference blur rescaled from 224-pixel images.
pub fn scaled_blur_kernel(width: usize) -> usize {
    ((70.0 * width as f64 / 224.0).round() as usize).max(1)
}

#[derive(Clone, Debug)]
pub struct EPResult {
    /// Normalized final mask.
    pub map: SaliencyMap,
    /// Final smoothed mask before normalization, values in `[0,1]`.
    pub mask: Vec<f64>,
    pub mask_mean: f64,
    /// Target logit of the composite under the final mask.
    pub preserved_logit: f64,
    /// Target logit of the fully blurred image.
    pub blurred_logit: f64,
}

/// Preservation-game extremal perturbation: gradient ascent (Adam moments) on a
/// low-resolution mask latent.
pub fn extremal_perturbation(
    net: &Network<f32>,
    img: &Image,
    class_index: usize,
    cfg: &EPConfig,
) -> Result<EPResult, SaliencyError> {
    cfg.validate()?;
    check_class(net, class_index)?;
    let (w, h) = (img.width(), img.height());
    let image = images_to_batch([img])?;
    let blurred_img = box_blur(img, cfg.blur_kernel(w))?;
    let blurred = images_to_batch([&blurred_img])?;
    let blurred_logit = net.predict(&blurred)?.data()[class_index] as f64;
    let kernel: Vec<f32> = gaussian_kernel(cfg.sigma(w));
    let (lh, lw) = (h.div_ceil(cfg.latent_stride), w.div_ceil(cfg.latent_stride));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut latent: Vec<f32> = (0..lh * lw)
        .map(|_| rng.random_range(-0.01f32..=0.01))
        .collect();
    let (mut m1, mut m2) = (vec![0.0f32; latent.len()], vec![0.0f32; latent.len()]);
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let ramp = (cfg.iterations / 2).max(1) as f64;

    // builds mask and objective; returns (graph, latent var, mask var, logit var, objective var)
    let record = |latent: &[f32], lambda: f64| -> Result<_, SaliencyError> {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(vec![1, 1, lh, lw], latent.to_vec())?, true);
        let s = g.sigmoid(l);
        let up = g.upsample_bilinear(s, h, w)?;
        let m = g.separable_filter(up, kernel.clone())?;
        let x = g.composite(m, &image, &blurred)?;
        let vars = net.forward_on(&mut g, x, false)?;
        let logit = g.pick(vars.logits, class_index)?;
        let pen = g.area_penalty(m, cfg.area_fraction);
        let obj = g.combine(logit, pen, 1.0, -(lambda as f32))?;
        Ok((g, l, m, logit, obj))
    };

    for it in 0..cfg.iterations {
        let lambda = cfg.lambda_max * (it as f64 / ramp).min(1.0);
        let (mut g, l, _, _, obj) = record(&latent, lambda)?;
        g.backward(obj)?;
        let grad = g
            .grad(l)
            .ok_or_else(|| AutodiffError::MissingGradient("mask latent".into()))?;
        let t = (it + 1) as i32;
        for j in 0..latent.len() {
            m1[j] = b1 * m1[j] + (1.0 - b1) * grad[j];
            m2[j] = b2 * m2[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = m1[j] / (1.0 - b1.powi(t));
            let vh = m2[j] / (1.0 - b2.powi(t));
            latent[j] += cfg.step_size as f32 * mh / (vh.sqrt() + eps);
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(SaliencyError::Diverged { iteration: it });
        }
    }
    let (g, _, m, logit, _) = record(&latent, cfg.lambda_max)?;
    let mask: Vec<f64> = g.value(m).data().iter().map(|&v| v as f64).collect();
    if mask.iter().any(|v| !v.is_finite()) {
        return Err(SaliencyError::Diverged {
            iteration: cfg.iterations,
        });
    }
    let mask_mean = mask.iter().sum::<f64>() / mask.len() as f64;
    let map = SaliencyMap::raw(
        w,
        h,
        mask.clone(),
        SaliencySource::ExtremalPerturbation,
        class_index,
    )?
    .normalize();
    Ok(EPResult {
        map,
        mask,
        mask_mean,
        preserved_logit: g.value(logit).data()[0] as f64,
        blurred_logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, v: Vec<f64>) -> SaliencyMap {
        SaliencyMap::raw(w, h, v, SaliencySource::Cam, 0).unwrap()
    }

    #[test]
    fn constant_map_scales_to_zero() {
        let s = normalize_scale_255(&map(2, 2, vec![3.0; 4]));
        assert_eq!(s.values, vec![0; 4]);
    }

    #[test]
    fn unit_range_scales_to_full_range() {
        let s = normalize_scale_255(&map(3, 1, vec![0.0, 0.5, 1.0]));
        assert_eq!(s.values, vec![0, 128, 255]);
    }

    #[test]
    fn rescaling_scaled_map_is_idempotent() {
        let raw = map(4, 1, vec![-2.0, 0.3, 1.7, 5.0]);
        let s = normalize_scale_255(&raw);
        let again = map(4, 1, s.values.iter().map(|&v| v as f64 / 255.0).collect());
        assert_eq!(normalize_scale_255(&again), s);
    }

    #[test]
    fn threshold_boundary() {
        let s = ScaledMap {
            width: 3,
            height: 1,
            values: vec![49, 50, 51],
        };
        assert_eq!(threshold_mask(&s, DEFAULT_THRESHOLD).bits(), &[0, 1, 1]);
        let ones = ScaledMap {
            width: 2,
            height: 1,
            values: vec![255, 255],
        };
        assert_eq!(threshold_mask(&ones, 50).count(), 2);
        let zeros = ScaledMap {
            width: 2,
            height: 1,
            values: vec![0, 0],
        };
        assert!(threshold_mask(&zeros, 50).is_empty());
    }

    #[test]
    fn averaging() {
        let a = map(2, 1, vec![1.0, 0.0]);
        let b = map(2, 1, vec![0.0, 1.0]);
        // complementary maps average to a constant, which normalizes to zero
        assert_eq!(
            average_maps(&[a.clone(), b]).unwrap().values,
            vec![0.0, 0.0]
        );
        let c = map(3, 1, vec![0.2, 0.9, 0.4]);
        assert_eq!(average_maps(&[c.clone()]).unwrap(), c.normalize());
        let many = vec![c.clone(); 5];
        let avg = average_maps(&many).unwrap();
        for (x, y) in avg.values.iter().zip(&c.normalize().values) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(average_maps(&[]), Err(SaliencyError::Empty)));
        assert!(average_maps(&[a, c]).is_err());
    }

    #[test]
    fn reference_blur_kernel() {
        assert_eq!(scaled_blur_kernel(224), 70);
        assert_eq!(scaled_blur_kernel(64), 20);
        assert_eq!(scaled_blur_kernel(128), 40);
    }
}
