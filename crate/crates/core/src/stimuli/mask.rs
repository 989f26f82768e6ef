use serde::{Deserialize, Serialize};

use super::image::{blurred_grayscale, Image};
use super::StimuliError;

/// Dense 0/1 field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self, StimuliError> {
        if bits.len() != width * height || bits.iter().any(|&b| b > 1) {
            return Err(StimuliError::Shape(
                "mask bits must be 0/1 and match the dimensions".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y) as u8)
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, StimuliError> {
        if self.width != other.width || self.height != other.height {
            return Err(StimuliError::Shape("mask dimensions differ".into()));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<(), StimuliError> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self, StimuliError> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bits = img.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        Self::from_bits(w, h, bits)
    }
}

/// Click positions revealing disks of `radius` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickMask {
    width: usize,
    height: usize,
    radius: f64,
    clicks: Vec<(u32, u32)>,
}

/// The eight unit offsets, row-major, skipping `(0,0)`.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

impl ClickMask {
    pub fn new(
        width: usize,
        height: usize,
        radius: f64,
        clicks: Vec<(u32, u32)>,
    ) -> Result<Self, StimuliError> {
        if let Some(&(x, y)) = clicks
            .iter()
            .find(|&&(x, y)| x as usize >= width || y as usize >= height)
        {
            return Err(StimuliError::ClickOutOfBounds {
                x,
                y,
                width,
                height,
            });
        }
        if !(radius >= 0.0) {
            return Err(StimuliError::Shape("radius must be non-negative".into()));
        }
        Ok(Self {
            width,
            height,
            radius,
            clicks,
        })
    }

    pub fn empty(width: usize, height: usize, radius: f64) -> Self {
        Self {
            width,
            height,
            radius,
            clicks: Vec::new(),
        }
    }

    pub fn push(&mut self, x: u32, y: u32) -> Result<(), StimuliError> {
        if x as usize >= self.width || y as usize >= self.height {
            return Err(StimuliError::ClickOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        self.clicks.push((x, y));
        Ok(())
    }

    pub fn clicks(&self) -> &[(u32, u32)] {
        &self.clicks
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// True when `(x, y)` lies within `radius` of any click.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let r2 = self.radius * self.radius;
        self.clicks.iter().any(|&(cx, cy)| {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            dx * dx + dy * dy <= r2
        })
    }

    /// Union of click disks as a binary field.
    pub fn field(&self) -> BinaryMask {
        let mut mask = BinaryMask::zeros(self.width, self.height);
        let r = self.radius;
        for &(cx, cy) in &self.clicks {
            let (cx, cy) = (cx as f64, cy as f64);
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(self.height - 1);
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil() as usize).min(self.width - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        mask.set(x, y, true);
                    }
                }
            }
        }
        mask
    }

    /// Copy with every click moved by `(dx, dy)`, clamped to the image.
    pub fn shifted(&self, dx: i32, dy: i32) -> ClickMask {
        let clamp = |v: u32, d: i32, n: usize| (v as i64 + d as i64).clamp(0, n as i64 - 1) as u32;
        ClickMask {
            width: self.width,
            height: self.height,
            radius: self.radius,
            clicks: self
                .clicks
                .iter()
                .map(|&(x, y)| (clamp(x, dx, self.width), clamp(y, dy, self.height)))
                .collect(),
        }
    }
}

/// The eight one-pixel shifts of a click mask, in [`NEIGHBOR_OFFSETS`] order.
pub fn shift_mask_8dirs(mask: &ClickMask) -> [ClickMask; 8] {
    NEIGHBOR_OFFSETS.map(|(dx, dy)| mask.shifted(dx, dy))
}

/// Original pixels inside the revealed disks, `base` elsewhere.
pub fn composite_with(
    original: &Image,
    base: &Image,
    field: &BinaryMask,
) -> Result<Image, StimuliError> {
    if !original.same_dims(base)
        || field.width() != original.width()
        || field.height() != original.height()
    {
        return Err(StimuliError::Shape("reveal inputs differ in size".into()));
    }
    let mut out = base.clone();
    let c = original.channels();
    for y in 0..original.height() {
        for x in 0..original.width() {
            if field.get(x, y) {
                for ch in 0..c {
                    out.set(x, y, ch, original.get(x, y, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Click-to-reveal rendition: original colors inside the clicked disks,
/// blurred grayscale (box blur of size `blur_k`) elsewhere.
pub fn reveal_composite(
    original: &Image,
    clicks: &ClickMask,
    blur_k: usize,
) -> Result<Image, StimuliError> {
    let base = blurred_grayscale(original, blur_k)?;
    composite_with(original, &base, &clicks.field())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn click_bounds_enforced() {
        assert!(ClickMask::new(10, 10, 2.0, vec![(9, 9)]).is_ok());
        assert!(matches!(
            ClickMask::new(10, 10, 2.0, vec![(10, 3)]),
            Err(StimuliError::ClickOutOfBounds { .. })
        ));
    }

    #[test]
    fn field_is_disk_union() {
        let m = ClickMask::new(20, 15, 3.5, vec![(4, 4), (15, 10)]).unwrap();
        let f = m.field();
        for y in 0..15 {
            for x in 0..20 {
                assert_eq!(f.get(x, y), m.covers(x, y), "({x},{y})");
            }
        }
    }

    #[test]
    fn empty_and_full_reveal() {
        let img = face(16, 16);
        let none = ClickMask::empty(16, 16, 3.0);
        assert_eq!(
            reveal_composite(&img, &none, 5).unwrap(),
            blurred_grayscale(&img, 5).unwrap()
        );
        let all = ClickMask::new(16, 16, 100.0, vec![(8, 8)]).unwrap();
        assert_eq!(reveal_composite(&img, &all, 5).unwrap(), img);
    }

    #[test]
    fn center_click_changes_only_the_disk() {
        let img = face(24, 24);
        let blurred = blurred_grayscale(&img, 7).unwrap();
        let m = ClickMask::new(24, 24, 4.0, vec![(12, 12)]).unwrap();
        let out = reveal_composite(&img, &m, 7).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let d2 = (x as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2);
                let inside = d2 <= 16.0;
                let differs = out.pixel(x, y) != blurred.pixel(x, y);
                assert_eq!(inside, out.pixel(x, y) == img.pixel(x, y));
                if !inside {
                    assert!(!differs);
                }
            }
        }
    }

    #[test]
    fn redundant_click_changes_nothing() {
        let img = face(16, 16);
        let a = ClickMask::new(16, 16, 4.0, vec![(8, 8)]).unwrap();
        let b = ClickMask::new(16, 16, 4.0, vec![(8, 8), (9, 8)]).unwrap();
        let c = ClickMask::new(16, 16, 4.0, vec![(8, 8), (8, 8)]).unwrap();
        assert_eq!(
            reveal_composite(&img, &a, 5).unwrap(),
            reveal_composite(&img, &c, 5).unwrap()
        );
        assert_ne!(a.field(), b.field());
    }

    #[test]
    fn eight_shifts_of_center_click() {
        let m = ClickMask::new(11, 11, 2.0, vec![(5, 5)]).unwrap();
        let shifted = shift_mask_8dirs(&m);
        let centers: Vec<(u32, u32)> = shifted.iter().map(|s| s.clicks()[0]).collect();
        assert_eq!(
            centers,
            vec![
                (4, 4),
                (5, 4),
                (6, 4),
                (4, 5),
                (6, 5),
                (4, 6),
                (5, 6),
                (6, 6)
            ]
        );
        let pop = m.field().count();
        assert!(shifted.iter().all(|s| s.field().count() == pop));
    }

    #[test]
    fn corner_click_clamps() {
        let m = ClickMask::new(8, 8, 1.0, vec![(0, 0)]).unwrap();
        assert_eq!(m.shifted(-1, -1).clicks(), &[(0, 0)]);
        assert_eq!(shift_mask_8dirs(&m)[0].clicks(), &[(0, 0)]);
    }
}
