use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Side length of the pasted rectangle, as a fraction of the image side.
pub const SIDE_RATIO_RANGE: (f64, f64) = (0.25, 0.75);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Mixing mask: 0 inside the rectangle (source pixels), 1 elsewhere (target).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    rect: Rect,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.top + rect.height > height || rect.left + rect.width > width {
            return Err(Error::Shape(format!("{rect:?} does not fit in {height}×{width}")));
        }
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| u8::from(!rect.contains(y, x))))
            .collect();
        Ok(BinaryMask {
            height,
            width,
            rect,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }

    /// Row-major `H×W` values in `{0, 1}`.
    pub fn values(&self) -> &[u8] {
        &self.values
    }
}

fn side(rng: &mut ChaCha8Rng, extent: usize, range: (f64, f64)) -> usize {
    let lo = ((range.0 * extent as f64).ceil() as usize).max(1);
    let hi = ((range.1 * extent as f64).floor() as usize).clamp(lo, extent);
    let ratio = rng.gen_range(range.0..=range.1);
    ((ratio * extent as f64).round() as usize).clamp(lo, hi)
}

/// One random rectangle: each side uniform in `side_ratio` of the image side,
/// position uniform among placements that fit. Deterministic per seed.
pub fn sample_mask(seed: u64, height: usize, width: usize, side_ratio: (f64, f64)) -> Result<BinaryMask> {
    if height < 4 || width < 4 {
        return Err(Error::Shape(format!("mask needs H, W ≥ 4, got {height}×{width}")));
    }
    if !(0.0 < side_ratio.0 && side_ratio.0 <= side_ratio.1 && side_ratio.1 <= 1.0) {
        return Err(Error::config("side_ratio", format!("invalid range {side_ratio:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = side(&mut rng, height, side_ratio);
    let w = side(&mut rng, width, side_ratio);
    let top = rng.gen_range(0..=height - h);
    let left = rng.gen_range(0..=width - w);
    BinaryMask::from_rect(height, width, Rect::new(top, left, h, w))
}
