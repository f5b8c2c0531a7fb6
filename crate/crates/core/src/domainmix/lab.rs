//! sRGB ⇄ CIELAB (D65) and per-channel statistics matching in LAB space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ImageSample;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// D65 reference white (row sums of `RGB_TO_XYZ`).
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// `rgb` in `[0, 255]` → `(L, a, b)`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let linear = rgb.map(|c| srgb_to_linear(c / 255.0));
    let xyz = mat_vec(&RGB_TO_XYZ, linear);
    let [fx, fy, fz] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut results are clamped to `[0, 255]`.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz: [f64; 3] = std::array::from_fn(|i| lab_f_inv(f[i]) * WHITE[i]);
    mat_vec(&XYZ_TO_RGB, xyz).map(|c| (linear_to_srgb(c) * 255.0).clamp(0.0, 255.0))
}

fn image_lab(rgb: &[u8]) -> Vec<[f64; 3]> {
    rgb.chunks_exact(3)
        .map(|p| rgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

/// Per-channel mean and population standard deviation in LAB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub count: usize,
}

impl LabStats {
    fn of_pixels(pixels: &[[f64; 3]]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::EmptySet("LAB statistics input"));
        }
        let n = pixels.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| pixels.iter().map(|p| p[c]).sum::<f64>() / n);
        let std = std::array::from_fn(|c| {
            (pixels.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt()
        });
        Ok(LabStats {
            mean,
            std,
            count: pixels.len(),
        })
    }
}

/// Aggregate statistics over every pixel of every image.
pub fn compute_lab_stats(images: &[ImageSample]) -> Result<LabStats> {
    let pixels: Vec<[f64; 3]> = images.iter().flat_map(|s| image_lab(&s.rgb)).collect();
    LabStats::of_pixels(&pixels)
}

/// Moves one image's LAB statistics onto `target`; returns unclamped LAB values.
///
/// Channels whose own std is below 1e-6 are only shifted.
pub fn lab_style_transfer_lab(rgb: &[u8], target: &LabStats) -> Result<Vec<[f64; 3]>> {
    let lab = image_lab(rgb);
    let own = LabStats::of_pixels(&lab)?;
    let scale: [f64; 3] = std::array::from_fn(|c| {
        if own.std[c] < 1e-6 {
            1.0
        } else {
            target.std[c] / own.std[c]
        }
    });
    Ok(lab
        .into_iter()
        .map(|p| std::array::from_fn(|c| (p[c] - own.mean[c]) * scale[c] + target.mean[c]))
        .collect())
}

/// Recolours `image` so its LAB statistics match `target`. Labels are untouched.
pub fn lab_style_transfer(image: &ImageSample, target: &LabStats) -> Result<ImageSample> {
    let lab = lab_style_transfer_lab(&image.rgb, target)?;
    let rgb = lab
        .into_iter()
        .flat_map(|p| lab_to_rgb(p).map(|c| c.round() as u8))
        .collect();
    Ok(ImageSample {
        rgb,
        ..image.clone()
    })
}
