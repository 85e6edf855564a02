use std::path::Path;

use crate::bbox::BBox;
use crate::image::GrayImage;
use crate::{Error, Result};

/// Per-pixel target probability, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub frame: usize,
}

impl AttentionMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, frame: usize) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("attention map", format!("{width}x{height} vs {}", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("attention values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, values, frame })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mean attention over the pixels whose centres fall inside `bbox`.
    pub fn mean_inside(&self, bbox: &BBox) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (x, y) in covered_pixels(self.width, self.height, bbox) {
            sum += self.at(x, y);
            count += 1;
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Tight box around all pixels above `threshold`.
    pub fn thresholded_box(&self, threshold: f64) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) > threshold {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64))
    }

    /// 8-bit grayscale with value `round(255 · p)`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|&p| (255.0 * p).round() as u8).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save_png(path)
    }
}

/// Box-derived ground-truth attention: 1 inside the target box, 0 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub bbox: Option<BBox>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
            bbox: None,
        }
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|&v| v * 255).collect(),
        }
    }

    /// Any pixel above 127 counts as target.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            values: img.data.iter().map(|&v| u8::from(v > 127)).collect(),
            bbox: None,
        }
    }
}

/// Pixels whose centre `(x + 0.5, y + 0.5)` lies in `[x, x + w) × [y, y + h)`.
fn covered_pixels(width: usize, height: usize, bbox: &BBox) -> impl Iterator<Item = (usize, usize)> {
    let span = |lo: f64, hi: f64, limit: usize| {
        let start = (lo - 0.5).ceil().max(0.0) as usize;
        let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
        start..end.max(start)
    };
    let xs = span(bbox.x, bbox.right(), width);
    let ys = span(bbox.y, bbox.bottom(), height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Rasterises `bbox` (clipped to the frame) into a binary mask.
pub fn mask_from_bbox(width: usize, height: usize, bbox: &BBox) -> Result<BinaryMask> {
    bbox.validate()?;
    if !bbox.intersects_frame(width, height) {
        return Err(Error::InvalidArgument(format!("{bbox:?} lies outside the {width}x{height} frame")));
    }
    let mut mask = BinaryMask::empty(width, height);
    for (x, y) in covered_pixels(width, height, bbox) {
        mask.values[y * width + x] = 1;
    }
    mask.bbox = Some(*bbox);
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn mask_examples() {
        let full = mask_from_bbox(4, 3, &BBox::new(0.0, 0.0, 4.0, 3.0)).unwrap();
        assert!(full.values.iter().all(|&v| v == 1));
        let small = mask_from_bbox(4, 4, &BBox::new(0.0, 0.0, 2.0, 2.0)).unwrap();
        assert_eq!(small.ones(), 4);
        assert!(mask_from_bbox(4, 4, &BBox::new(0.0, 0.0, 0.0, 2.0)).is_err());
        assert!(mask_from_bbox(4, 4, &BBox::new(10.0, 0.0, 2.0, 2.0)).is_err());
    }

    #[test]
    fn ones_count_matches_clipped_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, h) = (64, 48);
        let mut checked = 0;
        while checked < 100 {
            let b = BBox::new(
                rng.random_range(-20..70) as f64,
                rng.random_range(-20..55) as f64,
                rng.random_range(1..40) as f64,
                rng.random_range(1..40) as f64,
            );
            let Some(clipped) = b.clip_to_frame(w, h) else { continue };
            let mask = mask_from_bbox(w, h, &b).unwrap();
            // Direct rasterisation oracle.
            let mut count = 0;
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if px >= b.x && px < b.right() && py >= b.y && py < b.bottom() {
                        count += 1;
                    }
                }
            }
            assert_eq!(mask.ones(), count);
            assert_eq!(mask.ones() as f64, clipped.area());
            checked += 1;
        }
    }

    #[test]
    fn attention_png_scale_and_stats() {
        let map = AttentionMap::new(2, 2, vec![0.0, 1.0, 0.5, 0.25], 0).unwrap();
        assert_eq!(map.to_gray().data, vec![0, 255, 128, 64]);
        assert_eq!(map.mean_inside(&BBox::new(0.0, 0.0, 2.0, 1.0)), Some(0.5));
        assert_eq!(map.thresholded_box(0.4), Some(BBox::new(0.0, 0.0, 2.0, 2.0)));
        assert!(AttentionMap::new(1, 1, vec![1.5], 0).is_err());
    }
}
