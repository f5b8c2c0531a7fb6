use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, IGNORE_LABEL};
use crate::segnet::{self, ModelParams};
use crate::synthdata::{Domain, ImageSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    /// Fraction `p` of each class's pixels kept by the quantile cut.
    pub portion: f64,
    /// Confidence ceiling `τ` on the per-class threshold.
    pub ceiling: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            portion: 0.5,
            ceiling: 0.9,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.portion > 0.0 && self.portion <= 1.0) {
            return Err(Error::config("pseudo_portion", "must be in (0, 1]"));
        }
        if !(self.ceiling > 0.0 && self.ceiling <= 1.0) {
            return Err(Error::config("pseudo_ceiling", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-class effective thresholds `θ_c = min(t_c, τ)`, where `t_c` is the
/// `k`-th largest confidence among pixels predicted `c`, `k = max(1, ⌈p·n_c⌉)`.
/// `None` marks a class that no pixel was predicted as.
pub fn class_thresholds(pred: &[u8], confidence: &[f32], num_classes: usize, cfg: PseudoConfig) -> Result<Vec<Option<f32>>> {
    if pred.len() != confidence.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} confidences",
            pred.len(),
            confidence.len()
        )));
    }
    let mut per_class: Vec<Vec<f32>> = vec![Vec::new(); num_classes];
    for (&c, &v) in pred.iter().zip(confidence) {
        if c as usize >= num_classes {
            return Err(Error::InvalidLabel { label: c, num_classes });
        }
        per_class[c as usize].push(v);
    }
    let ceiling = cfg.ceiling as f32;
    Ok(per_class
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return None;
            }
            // the epsilon keeps e.g. 0.2 · 15 = 3.0000000000000004 at k = 3
            let k = ((cfg.portion * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
            v.sort_unstable_by(|a, b| b.total_cmp(a));
            Some(v[k - 1].min(ceiling))
        })
        .collect())
}

/// Label map with every pixel below its class threshold replaced by 255.
pub fn apply_thresholds(pred: &[u8], confidence: &[f32], thresholds: &[Option<f32>]) -> Vec<u8> {
    pred.iter()
        .zip(confidence)
        .map(|(&c, &v)| match thresholds[c as usize] {
            Some(t) if v >= t => c,
            _ => IGNORE_LABEL,
        })
        .collect()
}

/// Pseudo-labeled copies of the unlabeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSet {
    /// Images with `ŷ` as labels (255 where unselected).
    pub samples: Vec<ImageSample>,
    pub confidences: Vec<Vec<f32>>,
    pub selected: Vec<usize>,
    pub thresholds: Vec<Option<f32>>,
    pub config: PseudoConfig,
}

impl PseudoLabeledSet {
    pub fn empty(config: PseudoConfig, num_classes: usize) -> Self {
        PseudoLabeledSet {
            samples: Vec::new(),
            confidences: Vec::new(),
            selected: Vec::new(),
            thresholds: vec![None; num_classes],
            config,
        }
    }

    /// Selected fraction of all pseudo-labeled pixels.
    pub fn coverage(&self) -> f64 {
        let total: usize = self.samples.iter().map(ImageSample::pixels).sum();
        if total == 0 {
            return 0.0;
        }
        self.selected.iter().sum::<usize>() as f64 / total as f64
    }
}

/// Labels `unlabeled` with the student's argmax, keeping confident pixels.
/// Thresholds are computed over the whole set, not per image.
pub fn generate_pseudo_labels(student: &ModelParams<f32>, unlabeled: &[ImageSample], cfg: PseudoConfig) -> Result<PseudoLabeledSet> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::EmptySet("unlabeled target set"));
    }
    let mut preds = Vec::with_capacity(unlabeled.len());
    let mut confidences = Vec::with_capacity(unlabeled.len());
    for s in unlabeled {
        let probs = ops::softmax_channel(&segnet::forward(student, &s.to_tensor())?)?;
        let (p, c) = ops::argmax_channel(&probs)?;
        preds.push(p);
        confidences.push(c);
    }
    let thresholds = class_thresholds(&preds.concat(), &confidences.concat(), student.num_classes(), cfg)?;
    let mut samples = Vec::with_capacity(unlabeled.len());
    let mut selected = Vec::with_capacity(unlabeled.len());
    for ((s, p), c) in unlabeled.iter().zip(&preds).zip(&confidences) {
        let labels = apply_thresholds(p, c, &thresholds);
        selected.push(labels.iter().filter(|&&l| l != IGNORE_LABEL).count());
        samples.push(ImageSample {
            domain: Domain::Target,
            labels,
            ..s.clone()
        });
    }
    Ok(PseudoLabeledSet {
        samples,
        confidences,
        selected,
        thresholds,
        config: cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CFG: PseudoConfig = PseudoConfig {
        portion: 0.5,
        ceiling: 0.9,
    };

    fn select(conf: &[f32]) -> (Option<f32>, Vec<f32>) {
        let pred = vec![0u8; conf.len()];
        let t = class_thresholds(&pred, conf, 1, CFG).unwrap();
        let labels = apply_thresholds(&pred, conf, &t);
        let kept = conf.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(&c, _)| c).collect();
        (t[0], kept)
    }

    #[test]
    fn ceiling_binds() {
        assert_eq!(select(&[0.95, 0.92, 0.8, 0.6]), (Some(0.9), vec![0.95, 0.92]));
    }

    #[test]
    fn quantile_binds() {
        assert_eq!(select(&[0.7, 0.6, 0.5, 0.4]), (Some(0.6), vec![0.7, 0.6]));
    }

    #[test]
    fn all_certain() {
        let (t, kept) = select(&[1.0; 7]);
        assert_eq!(t, Some(0.9));
        assert_eq!(kept.len(), 7);
    }

    #[test]
    fn inexact_portion_product() {
        let conf: Vec<f32> = (0..15).map(|i| 0.1 + 0.05 * i as f32).collect();
        let pred = vec![0u8; 15];
        let cfg = PseudoConfig { portion: 0.2, ceiling: 1.0 };
        let t = class_thresholds(&pred, &conf, 1, cfg).unwrap();
        assert_eq!(t[0], Some(conf[12]));
    }

    #[test]
    fn empty_class_selects_nothing() {
        let t = class_thresholds(&[0, 0, 2], &[0.5, 0.6, 0.7], 3, CFG).unwrap();
        assert_eq!(t[1], None);
        assert_eq!(apply_thresholds(&[0, 0, 2], &[0.5, 0.6, 0.7], &t), vec![255, 0, 2]);
    }

    proptest! {
        #[test]
        fn soundness_and_coverage(
            pairs in proptest::collection::vec((0u8..4, 0.2f32..1.0), 1..200),
            portion in 0.05f64..1.0,
        ) {
            let cfg = PseudoConfig { portion, ceiling: 0.9 };
            let (pred, conf): (Vec<u8>, Vec<f32>) = pairs.into_iter().unzip();
            let t = class_thresholds(&pred, &conf, 4, cfg).unwrap();
            let labels = apply_thresholds(&pred, &conf, &t);
            for c in 0..4u8 {
                let n = pred.iter().filter(|&&p| p == c).count();
                let kept = labels.iter().filter(|&&l| l == c).count();
                match t[c as usize] {
                    None => prop_assert_eq!(n, 0),
                    Some(th) => {
                        prop_assert!(th <= 0.9);
                        prop_assert!(kept as f64 >= portion * n as f64 - 1e-9);
                    }
                }
            }
            for ((&p, &v), &l) in pred.iter().zip(&conf).zip(&labels) {
                if l != 255 {
                    prop_assert_eq!(l, p);
                    prop_assert!(v >= t[p as usize].unwrap());
                } else {
                    prop_assert!(v < t[p as usize].unwrap());
                }
            }
        }
    }
}
