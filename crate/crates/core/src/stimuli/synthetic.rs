//! Schematic expression faces with known discriminative regions.
//!
//! Every class is a fixed setting of five facial parameters; each image adds
//! uniform jitter to them and to head position, skin tone and background.
//!
//! | class    | brow angle | eye aperture | mouth curvature | mouth opening | mouth tilt |
//! |----------|-----------:|-------------:|----------------:|--------------:|-----------:|
//! | neutral  |   0.0      |   0.5        |   0.0           |   0.0         |   0.0      |
//! | happy    |   0.0      |   0.5        |   1.0           |   0.35        |   0.0      |
//! | sad      |   0.8      |   0.5        |  -1.0           |   0.0         |   0.0      |
//! | surprise |   0.0      |   1.0        |   0.0           |   1.0         |   0.0      |
//! | fear     |   0.8      |   1.0        |  -0.4           |   0.6         |   0.0      |
//! | disgust  |  -0.8      |   0.15       |  -0.6           |   0.3         |   0.0      |
//! | anger    |  -0.8      |   0.5        |   0.0           |   0.0         |   0.0      |
//! | contempt |   0.0      |   0.5        |   0.0           |   0.0         |   1.0      |
//!
//! Positive brow angle raises the inner brow ends; positive curvature lifts the
//! mouth corners; tilt lifts only the right corner. The ground-truth region of
//! an image is the union of the brow, eye and mouth boxes whose parameters
//! differ from `neutral` (empty for neutral itself).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, ExpressionLabel, Image, StimuliError, StimulusImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceParams {
    pub brow_angle: f64,
    pub eye_aperture: f64,
    pub mouth_curvature: f64,
    pub mouth_opening: f64,
    pub mouth_tilt: f64,
}

const fn face(b: f64, e: f64, c: f64, o: f64, t: f64) -> FaceParams {
    FaceParams {
        brow_angle: b,
        eye_aperture: e,
        mouth_curvature: c,
        mouth_opening: o,
        mouth_tilt: t,
    }
}

pub fn class_params(label: ExpressionLabel) -> FaceParams {
    use ExpressionLabel::*;
    match label {
        Neutral => face(0.0, 0.5, 0.0, 0.0, 0.0),
        Happy => face(0.0, 0.5, 1.0, 0.35, 0.0),
        Sad => face(0.8, 0.5, -1.0, 0.0, 0.0),
        Surprise => face(0.0, 1.0, 0.0, 1.0, 0.0),
        Fear => face(0.8, 1.0, -0.4, 0.6, 0.0),
        Disgust => face(-0.8, 0.15, -0.6, 0.3, 0.0),
        Anger => face(-0.8, 0.5, 0.0, 0.0, 0.0),
        Contempt => face(0.0, 0.5, 0.0, 0.0, 1.0),
    }
}

/// Which of (brows, eyes, mouth) differ from the neutral face.
pub fn differing_features(label: ExpressionLabel) -> [bool; 3] {
    let p = class_params(label);
    let n = class_params(ExpressionLabel::Neutral);
    [
        p.brow_angle != n.brow_angle,
        p.eye_aperture != n.eye_aperture,
        p.mouth_curvature != n.mouth_curvature
            || p.mouth_opening != n.mouth_opening
            || p.mouth_tilt != n.mouth_tilt,
    ]
}

struct Layout {
    hx: f64,
    hy: f64,
}

const HEAD_RADII: (f64, f64) = (0.38, 0.46);
const EYE_DX: f64 = 0.15;
const EYE_DY: f64 = -0.08;
const BROW_DY: f64 = -0.19;
const MOUTH_DY: f64 = 0.2;
const MOUTH_HALF_WIDTH: f64 = 0.13;

impl Layout {
    fn eyes(&self) -> [(f64, f64); 2] {
        [
            (self.hx - EYE_DX, self.hy + EYE_DY),
            (self.hx + EYE_DX, self.hy + EYE_DY),
        ]
    }

    fn regions(&self) -> [Vec<(f64, f64, f64, f64)>; 3] {
        let eyes = self.eyes();
        let brows = eyes
            .iter()
            .map(|&(ex, _)| {
                (
                    ex - 0.11,
                    self.hy + BROW_DY - 0.11,
                    ex + 0.11,
                    self.hy + BROW_DY + 0.05,
                )
            })
            .collect();
        let eye_boxes = eyes
            .iter()
            .map(|&(ex, ey)| (ex - 0.1, ey - 0.075, ex + 0.1, ey + 0.075))
            .collect();
        let my = self.hy + MOUTH_DY;
        let mouth = vec![(self.hx - 0.17, my - 0.15, self.hx + 0.17, my + 0.18)];
        [brows, eye_boxes, mouth]
    }
}

fn shade(u: f64, v: f64, lay: &Layout, p: &FaceParams, skin: [f64; 3], bg: f64) -> [f64; 3] {
    let (rx, ry) = HEAD_RADII;
    let (du, dv) = ((u - lay.hx) / rx, (v - lay.hy) / ry);
    if du * du + dv * dv > 1.0 {
        return [bg; 3];
    }
    let mut color = skin;
    // brows
    for (side, &(ex, _)) in lay.eyes().iter().enumerate() {
        let outer = if side == 0 { ex - 0.08 } else { ex + 0.08 };
        let inner = if side == 0 { ex + 0.08 } else { ex - 0.08 };
        let t = (u - outer) / (inner - outer);
        if (0.0..=1.0).contains(&t) {
            let yb = lay.hy + BROW_DY - p.brow_angle * 0.08 * t;
            if (v - yb).abs() < 0.028 {
                color = [0.2, 0.12, 0.08];
            }
        }
    }
    // eyes
    let half_h = 0.015 + 0.05 * p.eye_aperture.max(0.0);
    for &(ex, ey) in &lay.eyes() {
        let (a, b) = ((u - ex) / 0.075, (v - ey) / half_h);
        if a * a + b * b <= 1.0 {
            color = [0.12, 0.1, 0.1];
        }
    }
    // mouth
    let my = lay.hy + MOUTH_DY;
    let s = (u - lay.hx) / MOUTH_HALF_WIDTH;
    if (-1.0..=1.0).contains(&s) {
        let upper = my + p.mouth_curvature * 0.08 * (0.5 - s * s)
            - p.mouth_tilt * 0.12 * s.max(0.0).powi(2);
        let lower = upper + p.mouth_opening.max(0.0) * 0.12 * (1.0 - s * s);
        if v > upper && v < lower {
            color = [0.15, 0.02, 0.05];
        }
        if (v - upper).abs() < 0.024 || (lower > upper + 0.024 && (v - lower).abs() < 0.02) {
            color = [0.5, 0.08, 0.1];
        }
    }
    color
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one jittered face of `label`; returns pixels and ground-truth region.
pub fn render_face(label: ExpressionLabel, size: usize, rng: &mut impl Rng) -> (Image, BinaryMask) {
    let base = class_params(label);
    let mut j = |m: f64| rng.random_range(-m..=m);
    let params = FaceParams {
        brow_angle: base.brow_angle + j(0.12),
        eye_aperture: (base.eye_aperture + j(0.08)).max(0.05),
        mouth_curvature: base.mouth_curvature + j(0.15),
        mouth_opening: (base.mouth_opening + j(0.08)).max(0.0),
        mouth_tilt: base.mouth_tilt + j(0.1),
    };
    let lay = Layout {
        hx: 0.5 + j(0.02),
        hy: 0.5 + j(0.02),
    };
    let tone = 1.0 + j(0.08);
    let skin = [0.87 * tone, 0.72 * tone, 0.62 * tone];
    let bg = 0.25 + j(0.1);
    let mut data = Vec::with_capacity(size * size * 3);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let c = shade(
                    (x as f64 + ox) / s,
                    (y as f64 + oy) / s,
                    &lay,
                    &params,
                    skin,
                    bg,
                );
                for k in 0..3 {
                    acc[k] += c[k] / 4.0;
                }
            }
            for v in acc {
                data.push((v + j(0.02)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let img = Image::new(size, size, 3, data).expect("sized buffer");
    let differs = differing_features(label);
    let boxes: Vec<(f64, f64, f64, f64)> = lay
        .regions()
        .into_iter()
        .zip(differs)
        .filter(|(_, d)| *d)
        .flat_map(|(b, _)| b)
        .collect();
    let gt = BinaryMask::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        boxes
            .iter()
            .any(|&(x0, y0, x1, y1)| u >= x0 && u <= x1 && v >= y0 && v <= y1)
    });
    (img, gt)
}

/// `n_per_class` jittered faces per class (class-major order). Each image
/// carries a seeded fixed false label; every class cycles through a shuffled
/// list of the seven other labels, so all 56 ordered pairs appear once
/// `n_per_class >= 7`.
pub fn generate_synthetic_dataset(
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<StimulusImage>, StimuliError> {
    if size < 32 {
        return Err(StimuliError::Config(format!(
            "synthetic images need size >= 32, got {size}"
        )));
    }
    let mut out = Vec::with_capacity(n_per_class * ExpressionLabel::COUNT);
    for label in ExpressionLabel::ALL {
        let mut others: Vec<ExpressionLabel> = ExpressionLabel::ALL
            .iter()
            .copied()
            .filter(|&l| l != label)
            .collect();
        others.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            seed,
            label.index() as u64,
            u64::MAX,
        )));
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, label.index() as u64, i as u64));
            let (pixels, gt) = render_face(label, size, &mut rng);
            let mut item = StimulusImage::new(
                format!("{label}_{i:04}"),
                pixels,
                label,
                others[i % others.len()],
            )?;
            item.gt_region = Some(gt);
            out.push(item);
        }
    }
    Ok(out)
}
