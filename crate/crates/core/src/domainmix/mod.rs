//! Region-level mixing, sample-level pairing and LAB colour-statistics transfer.

mod lab;
mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{Domain, ImageSample};

pub use lab::{compute_lab_stats, lab_style_transfer, lab_style_transfer_lab, lab_to_rgb, rgb_to_lab, LabStats};
pub use mask::{sample_mask, BinaryMask, Rect, SIDE_RATIO_RANGE};

/// A region-mixed image: target content where the mask is 1, pasted source
/// content inside the rectangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSample {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
    /// Domain each pixel was taken from.
    pub provenance: Vec<Domain>,
}

/// `x = M⊙x_t + (1−M)⊙x_s`, `y = M⊙y_t + (1−M)⊙y_s`.
///
/// 255 labels in either input are copied like any other value.
pub fn region_mix(target: &ImageSample, source: &ImageSample, mask: &BinaryMask) -> Result<MixedSample> {
    let (h, w) = (target.height, target.width);
    if (source.height, source.width) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "region_mix: target {h}×{w}, source {}×{}, mask {}×{}",
            source.height,
            source.width,
            mask.height(),
            mask.width()
        )));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut labels = Vec::with_capacity(h * w);
    let mut provenance = Vec::with_capacity(h * w);
    for (p, &keep_target) in mask.values().iter().enumerate() {
        let from = if keep_target == 1 { target } else { source };
        rgb.extend_from_slice(&from.rgb[p * 3..p * 3 + 3]);
        labels.push(from.labels[p]);
        provenance.push(from.domain);
    }
    Ok(MixedSample {
        height: h,
        width: w,
        rgb,
        labels,
        provenance,
    })
}

impl MixedSample {
    /// The mixed image as an ordinary target-tagged sample.
    pub fn into_sample(self, sample_id: u64) -> ImageSample {
        ImageSample {
            sample_id,
            domain: Domain::Target,
            height: self.height,
            width: self.width,
            rgb: self.rgb,
            labels: self.labels,
        }
    }
}

/// One independent uniform draw from each set.
pub fn make_sample_level_pair<'a>(
    seed: u64,
    source: &'a [ImageSample],
    target: &'a [ImageSample],
) -> Result<(&'a ImageSample, &'a ImageSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_pair(&mut rng, source, target)
}

pub(crate) fn draw_pair<'a, R: Rng>(
    rng: &mut R,
    source: &'a [ImageSample],
    target: &'a [ImageSample],
) -> Result<(&'a ImageSample, &'a ImageSample)> {
    if source.is_empty() {
        return Err(Error::EmptySet("source set"));
    }
    if target.is_empty() {
        return Err(Error::EmptySet("target set"));
    }
    let s = &source[rng.gen_range(0..source.len())];
    let t = &target[rng.gen_range(0..target.len())];
    Ok((s, t))
}
