//! Confusion matrix, per-class IoU and mIoU.

use crate::error::{Error, Result};
use crate::ops::IGNORE_LABEL;

/// `C×C` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Ground-truth 255 pixels are counted as ignored;
    /// predictions must be real class ids.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.num_classes;
        if let Some(&label) = pred.iter().find(|&&p| p as usize >= c) {
            return Err(Error::InvalidLabel { label, num_classes: c });
        }
        if let Some(&label) = truth.iter().find(|&&t| t != IGNORE_LABEL && t as usize >= c) {
            return Err(Error::InvalidLabel { label, num_classes: c });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
            } else {
                self.counts[t as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ClassMismatch(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// `IoU_c = tp / (row_c + col_c − tp)`; `None` when class `c` appears in
    /// neither ground truth nor prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean of the defined per-class IoUs.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::NoDefinedClasses);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_for_perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = [0, 1, 2, 2, 1];
        cm.accumulate(&gt, &gt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.get(i, j), 0);
                }
            }
        }
        assert!(cm.per_class_iou().iter().all(|v| *v == Some(1.0)));
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn ignored_ground_truth() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[255, 255, 255]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored(), 3);
        assert!(matches!(cm.miou(), Err(Error::NoDefinedClasses)));
    }

    #[test]
    fn four_pixel_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 1), cm.get(1, 0)), (1, 1, 2, 0));
        let iou = cm.per_class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert!((iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_ignore_in_prediction() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[0, 255], &[0, 1]),
            Err(Error::InvalidLabel { label: 255, .. })
        ));
    }

    fn maps(c: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..60).prop_flat_map(move |n| {
            (
                proptest::collection::vec(0..c, n),
                proptest::collection::vec(prop_oneof![4 => 0..c, 1 => Just(255u8)], n),
            )
        })
    }

    proptest! {
        #[test]
        fn miou_bounded_and_relabel_invariant((pred, gt) in maps(4), perm in Just([2u8, 0, 3, 1])) {
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pred, &gt).unwrap();
            prop_assert_eq!(cm.total() + cm.ignored(), gt.len() as u64);
            if let Ok(m) = cm.miou() {
                prop_assert!((0.0..=1.0).contains(&m));
                let relabel = |v: &[u8]| v.iter().map(|&x| if x == 255 { 255 } else { perm[x as usize] }).collect::<Vec<_>>();
                let mut cm2 = ConfusionMatrix::new(4);
                cm2.accumulate(&relabel(&pred), &relabel(&gt)).unwrap();
                prop_assert!((cm2.miou().unwrap() - m).abs() < 1e-12);
                let all_correct = pred.iter().zip(&gt).all(|(p, t)| *t == 255 || p == t);
                prop_assert_eq!(m == 1.0, all_correct);
            }
        }

        #[test]
        fn accumulation_is_additive((p1, g1) in maps(3), (p2, g2) in maps(3)) {
            let mut split = ConfusionMatrix::new(3);
            split.accumulate(&p2, &g2).unwrap();
            split.accumulate(&p1, &g1).unwrap();
            let mut joined = ConfusionMatrix::new(3);
            joined.accumulate(&[p1.clone(), p2.clone()].concat(), &[g1.clone(), g2.clone()].concat()).unwrap();
            prop_assert_eq!(&split, &joined);
            let mut a = ConfusionMatrix::new(3);
            a.accumulate(&p1, &g1).unwrap();
            let mut b = ConfusionMatrix::new(3);
            b.accumulate(&p2, &g2).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, joined);
        }
    }
}
