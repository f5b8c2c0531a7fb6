//! Procedural two-domain segmentation benchmark.
//!
//! Every scene is a background, one horizontal stripe band and one to three
//! shapes. The layout depends only on the scene seed; a [`DomainStyle`] is
//! applied afterwards and never touches the labels, so the same seed renders
//! the same scene in both domains.

mod format;
mod scene;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::IGNORE_LABEL;
use crate::tensor::{Scalar, Tensor};

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetHeader};
pub use scene::{generate_scene, render_layout, SceneLayout, Shape};

pub const NUM_CLASSES: usize = 5;
pub const IMAGE_SIZE: usize = 64;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_CIRCLE: u8 = 1;
pub const CLASS_RECTANGLE: u8 = 2;
pub const CLASS_TRIANGLE: u8 = 3;
pub const CLASS_STRIPE: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "circle", "rectangle", "triangle", "stripe"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// RGB raster with its per-pixel class map (255 = ignore / unlabeled).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub sample_id: u64,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    /// `H×W×3`, row-major, interleaved.
    pub rgb: Vec<u8>,
    /// `H×W`.
    pub labels: Vec<u8>,
}

impl ImageSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_unlabeled(&self) -> bool {
        self.labels.iter().all(|&l| l == IGNORE_LABEL)
    }

    pub fn without_labels(&self) -> Self {
        ImageSample {
            labels: vec![IGNORE_LABEL; self.pixels()],
            ..self.clone()
        }
    }

    /// Planar `3×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.pixels();
        let mut data = vec![T::zero(); 3 * hw];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = T::from_f64(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("rgb buffer matches dimensions")
    }
}

/// Appearance of one domain. Intensities are in `[0, 1]` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub blur: bool,
    pub noise_sigma: f64,
    pub saturation: f64,
}

impl DomainStyle {
    pub fn source() -> Self {
        DomainStyle {
            gain: [1.0, 1.0, 1.0],
            offset: [0.0, 0.0, 0.0],
            blur: false,
            noise_sigma: 0.0,
            saturation: 1.0,
        }
    }

    pub fn target() -> Self {
        DomainStyle {
            gain: [0.75, 0.9, 1.15],
            offset: [0.05, 0.0, -0.05],
            blur: true,
            noise_sigma: 0.03,
            saturation: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::config("gain", "gains must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be ≥ 0"));
        }
        if !(self.saturation >= 0.0) {
            return Err(Error::config("saturation", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Sizes, seeds and styles of a generated bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
    pub n_val: usize,
    pub seed: u64,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    /// Source samples take ids `source_id_base..source_id_base + n_source`.
    pub source_id_base: u64,
    /// Target pool (labeled + unlabeled) then validation ids follow this base.
    pub target_id_base: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_source: 2000,
            n_target_labeled: 20,
            n_target_unlabeled: 500,
            n_val: 200,
            seed: 0,
            source_style: DomainStyle::source(),
            target_style: DomainStyle::target(),
            source_id_base: 0,
            target_id_base: 1_000_000,
        }
    }
}

impl DatasetConfig {
    fn source_ids(&self) -> std::ops::Range<u64> {
        self.source_id_base..self.source_id_base + self.n_source as u64
    }

    fn target_ids(&self) -> std::ops::Range<u64> {
        let n = (self.n_target_labeled + self.n_target_unlabeled + self.n_val) as u64;
        self.target_id_base..self.target_id_base + n
    }

    pub fn validate(&self) -> Result<()> {
        for (key, n) in [
            ("n_source", self.n_source),
            ("n_target_labeled", self.n_target_labeled),
            ("n_target_unlabeled", self.n_target_unlabeled),
            ("n_val", self.n_val),
        ] {
            if n == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        self.source_style.validate()?;
        self.target_style.validate()?;
        let (s, t) = (self.source_ids(), self.target_ids());
        if s.start < t.end && t.start < s.end {
            return Err(Error::OverlappingIds(format!("source {s:?} intersects target {t:?}")));
        }
        Ok(())
    }

    /// Scene seed of one sample id; identical layouts in both domains need
    /// identical ids, which never happens across domains inside one bundle.
    pub fn scene_seed(&self, sample_id: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(sample_id))
    }

    fn render(&self, sample_id: u64, domain: Domain) -> ImageSample {
        let style = match domain {
            Domain::Source => &self.source_style,
            Domain::Target => &self.target_style,
        };
        let mut s = generate_scene(self.scene_seed(sample_id), style, IMAGE_SIZE);
        s.sample_id = sample_id;
        s.domain = domain;
        s
    }

    /// Fully labeled render of any target id, for evaluation only.
    pub fn regenerate_target(&self, sample_id: u64) -> ImageSample {
        self.render(sample_id, Domain::Target)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The four splits of a semi-supervised adaptation problem.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub source_labeled: Vec<ImageSample>,
    pub target_labeled: Vec<ImageSample>,
    /// Labels are all 255.
    pub target_unlabeled: Vec<ImageSample>,
    /// Labels are all 255; see [`DatasetBundle::validation_ground_truth`].
    pub target_val: Vec<ImageSample>,
    pub num_classes: usize,
}

/// Builds the deterministic bundle described by `config`.
pub fn build_splits(config: &DatasetConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let source_labeled = config
        .source_ids()
        .map(|id| config.render(id, Domain::Source))
        .collect();

    let pool_len = (config.n_target_labeled + config.n_target_unlabeled) as u64;
    let mut pool: Vec<u64> = (config.target_id_base..config.target_id_base + pool_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5EED_5911));
    pool.shuffle(&mut rng);
    let (labeled_ids, unlabeled_ids) = pool.split_at(config.n_target_labeled);
    let mut labeled_ids = labeled_ids.to_vec();
    let mut unlabeled_ids = unlabeled_ids.to_vec();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();

    let target_labeled = labeled_ids.iter().map(|&id| config.render(id, Domain::Target)).collect();
    let target_unlabeled = unlabeled_ids
        .iter()
        .map(|&id| config.render(id, Domain::Target).without_labels())
        .collect();
    let val_start = config.target_id_base + pool_len;
    let target_val = (val_start..val_start + config.n_val as u64)
        .map(|id| config.render(id, Domain::Target).without_labels())
        .collect();

    Ok(DatasetBundle {
        config: config.clone(),
        source_labeled,
        target_labeled,
        target_unlabeled,
        target_val,
        num_classes: NUM_CLASSES,
    })
}

impl DatasetBundle {
    /// Labeled copies of the validation images, regenerated from their seeds.
    pub fn validation_ground_truth(&self) -> Vec<ImageSample> {
        self.target_val
            .iter()
            .map(|s| self.config.regenerate_target(s.sample_id))
            .collect()
    }

    /// Labeled copies of the unlabeled pool, regenerated from their seeds.
    pub fn unlabeled_ground_truth(&self) -> Vec<ImageSample> {
        self.target_unlabeled
            .iter()
            .map(|s| self.config.regenerate_target(s.sample_id))
            .collect()
    }
}

/// Mean over channels of `|mean_source,c − mean_target,c|`, in `[0, 1]` units,
/// over the first `n` scenes rendered in both styles.
pub fn domain_gap(config: &DatasetConfig, n: usize) -> f64 {
    let mut sums = [[0.0f64; 3]; 2];
    let mut count = 0usize;
    for i in 0..n as u64 {
        let seed = config.scene_seed(i);
        let a = generate_scene(seed, &config.source_style, IMAGE_SIZE);
        let b = generate_scene(seed, &config.target_style, IMAGE_SIZE);
        for (k, s) in [a, b].iter().enumerate() {
            for px in s.rgb.chunks_exact(3) {
                for c in 0..3 {
                    sums[k][c] += px[c] as f64;
                }
            }
        }
        count += IMAGE_SIZE * IMAGE_SIZE;
    }
    (0..3)
        .map(|c| (sums[0][c] - sums[1][c]).abs() / (count as f64 * 255.0))
        .sum::<f64>()
        / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_source: 20,
            n_target_labeled: 4,
            n_target_unlabeled: 12,
            n_val: 6,
            seed: 3,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_labels() {
        let cfg = DatasetConfig {
            n_source: 200,
            n_target_labeled: 10,
            n_target_unlabeled: 100,
            n_val: 50,
            ..DatasetConfig::default()
        };
        let b = build_splits(&cfg).unwrap();
        assert_eq!(b.source_labeled.len(), 200);
        assert_eq!(b.target_labeled.len(), 10);
        assert_eq!(b.target_unlabeled.len(), 100);
        assert_eq!(b.target_val.len(), 50);
        assert!(b.target_unlabeled.iter().all(ImageSample::is_unlabeled));
        assert!(b.target_val.iter().all(ImageSample::is_unlabeled));
        assert!(b.target_labeled.iter().all(|s| !s.is_unlabeled()));
        for s in b.source_labeled.iter().chain(&b.target_labeled) {
            assert!(s.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        }
    }

    #[test]
    fn target_subsets_are_disjoint() {
        let b = build_splits(&small()).unwrap();
        let mut seen = HashSet::new();
        for s in b.target_labeled.iter().chain(&b.target_unlabeled).chain(&b.target_val) {
            assert!(seen.insert(s.sample_id), "duplicate id {}", s.sample_id);
        }
        for s in &b.source_labeled {
            assert!(!seen.contains(&s.sample_id));
        }
    }

    #[test]
    fn builds_are_deterministic_and_seed_dependent() {
        let a = build_splits(&small()).unwrap();
        let b = build_splits(&small()).unwrap();
        assert_eq!(a, b);
        let ids = |b: &DatasetBundle| b.target_labeled.iter().map(|s| s.sample_id).collect::<Vec<_>>();
        let other = build_splits(&DatasetConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(ids(&a), ids(&other));
    }

    #[test]
    fn rejects_overlap_and_empty_sizes() {
        let cfg = DatasetConfig {
            target_id_base: 10,
            ..small()
        };
        assert!(matches!(build_splits(&cfg), Err(Error::OverlappingIds(_))));
        let cfg = DatasetConfig { n_val: 0, ..small() };
        assert!(matches!(build_splits(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn ground_truth_regenerates_hidden_labels() {
        let b = build_splits(&small()).unwrap();
        for (hidden, gt) in b.target_val.iter().zip(b.validation_ground_truth()) {
            assert_eq!(hidden.rgb, gt.rgb);
            assert!(!gt.is_unlabeled());
        }
    }

    #[test]
    fn default_styles_produce_a_gap() {
        let gap = domain_gap(&DatasetConfig::default(), 100);
        assert!(gap > 0.05, "gap {gap}");
        let same = DatasetConfig {
            target_style: DomainStyle::source(),
            ..DatasetConfig::default()
        };
        assert_eq!(domain_gap(&same, 10), 0.0);
    }

    #[test]
    fn tensor_conversion_is_planar() {
        let s = ImageSample {
            sample_id: 0,
            domain: Domain::Source,
            height: 1,
            width: 2,
            rgb: vec![255, 0, 51, 0, 255, 0],
            labels: vec![0, 1],
        };
        let t = s.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }
}
