//! Confusion matrices, per-class IoU / mIoU, and attention localization scores.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::masks::AttentionMap;
use crate::proxy_gt::ProxyLabelMap;

pub const DEFAULT_IGNORE: u8 = 255;

/// `(M + 1) x (M + 1)` pixel counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix over background plus `num_classes` classes.
    pub fn new(num_classes: usize) -> Self {
        let size = num_classes + 1;
        ConfusionMatrix {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    pub fn accumulate(
        &mut self,
        pred: &ProxyLabelMap,
        gt: &ProxyLabelMap,
        ignore_label: Option<u8>,
    ) -> Result<()> {
        contract!(
            pred.height() == gt.height() && pred.width() == gt.width(),
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        );
        // Validate first so a bad pixel leaves the matrix untouched.
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if Some(g) == ignore_label || Some(p) == ignore_label {
                continue;
            }
            if g as usize >= self.size || p as usize >= self.size {
                return Err(Error::Contract(format!(
                    "pixel {i}: label (gt {g}, pred {p}) out of range for {} labels",
                    self.size
                )));
            }
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) == ignore_label || Some(p) == ignore_label {
                continue;
            }
            self.counts[g as usize * self.size + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        contract!(
            self.size == other.size,
            "cannot merge confusion matrices of size {} and {}",
            self.size,
            other.size
        );
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn union(&self, c: usize) -> u64 {
        let row: u64 = (0..self.size).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.size).map(|g| self.get(g, c)).sum();
        row + col - self.get(c, c)
    }

    /// Per-class IoU; classes with an empty union are `None` and excluded
    /// from the mean.
    pub fn miou(&self) -> Result<MiouReport> {
        let per_class: Vec<Option<f64>> = (0..self.size)
            .map(|c| {
                let union = self.union(c);
                (union > 0).then(|| self.get(c, c) as f64 / union as f64)
            })
            .collect();
        let present: Vec<(u64, u64)> = (0..self.size)
            .filter(|&c| per_class[c].is_some())
            .map(|c| (self.get(c, c), self.union(c)))
            .collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric(
                "mIoU of an empty confusion matrix".into(),
            ));
        }
        Ok(MiouReport {
            mean: exact_mean(&present)
                .unwrap_or_else(|| per_class.iter().flatten().sum::<f64>() / present.len() as f64),
            per_class,
        })
    }
}

/// Mean of `tp / union` fractions rounded once, so that e.g. 1/2 and 2/3
/// average to exactly the double nearest 7/12. `None` on overflow.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let mut sum = Ratio::<u128>::from_integer(0);
    for &(tp, union) in fractions {
        sum = sum.checked_add(&Ratio::new(tp as u128, union as u128))?;
    }
    sum.checked_div(&Ratio::from_integer(fractions.len() as u128))?
        .to_f64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// JSON report written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

impl EvalReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        let r = cm.miou()?;
        Ok(EvalReport {
            per_class_iou: r.per_class,
            miou: r.mean,
            pixels: cm.total(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

fn binarize(map: &AttentionMap, tau: f64) -> Vec<bool> {
    let max = map.max() as f64;
    if max <= 0.0 {
        return vec![false; map.values().len()];
    }
    let cut = tau * max;
    map.values().iter().map(|&v| v as f64 >= cut).collect()
}

fn check_inputs(map: &AttentionMap, gt_mask: &[bool], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    contract!(
        gt_mask.len() == map.values().len(),
        "attention has {} pixels, mask has {}",
        map.values().len(),
        gt_mask.len()
    );
    Ok(())
}

/// Binarizes attention at `tau * max` and scores it against a pixel mask.
///
/// An empty prediction has precision 0.
pub fn attention_localization_score(
    map: &AttentionMap,
    gt_mask: &[bool],
    tau: f64,
) -> Result<Localization> {
    check_inputs(map, gt_mask, tau)?;
    let gt_count = gt_mask.iter().filter(|&&g| g).count();
    if gt_count == 0 {
        return Err(Error::UndefinedMetric(
            "recall against an empty ground-truth mask".into(),
        ));
    }
    let pred = binarize(map, tau);
    let pred_count = pred.iter().filter(|&&p| p).count();
    let tp = pred.iter().zip(gt_mask).filter(|(&p, &g)| p && g).count();
    let union = pred_count + gt_count - tp;
    Ok(Localization {
        precision: if pred_count == 0 {
            0.0
        } else {
            tp as f64 / pred_count as f64
        },
        recall: tp as f64 / gt_count as f64,
        iou: tp as f64 / union as f64,
    })
}

/// Fraction of the attention mass above `tau * max` that lies on background
/// pixels (`gt_mask` false). Zero when nothing is above the cut.
pub fn background_leakage(map: &AttentionMap, gt_mask: &[bool], tau: f64) -> Result<f64> {
    check_inputs(map, gt_mask, tau)?;
    let pred = binarize(map, tau);
    let (mut total, mut outside) = (0.0f64, 0.0f64);
    for ((&v, &p), &g) in map.values().iter().zip(&pred).zip(gt_mask) {
        if p {
            total += v as f64;
            if !g {
                outside += v as f64;
            }
        }
    }
    Ok(if total > 0.0 { outside / total } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(labels: &[u8]) -> ProxyLabelMap {
        ProxyLabelMap::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = lm(&[0, 1, 2, 2, 1, 0, 0, 1, 2, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &gt, None).unwrap();
        assert_eq!(cm.diagonal_sum(), 10);
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ignored_pixels_skipped() {
        let gt = lm(&[255, 255, 255]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&lm(&[0, 1, 2]), &gt, Some(DEFAULT_IGNORE))
            .unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let mut cm = ConfusionMatrix::new(1);
        cm.accumulate(&lm(&[0, 0, 1, 1]), &lm(&[1, 1, 0, 0]), None)
            .unwrap();
        assert_eq!(cm.miou().unwrap().per_class[1], Some(0.0));
    }

    #[test]
    fn hand_worked_two_class() {
        let mut cm = ConfusionMatrix::new(1);
        cm.accumulate(&lm(&[0, 1, 1, 1]), &lm(&[0, 0, 1, 1]), None)
            .unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.mean, 7.0 / 12.0);
    }

    #[test]
    fn absent_classes_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&lm(&[0, 1]), &lm(&[0, 1]), None).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn out_of_range_names_pixel() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.accumulate(&lm(&[0, 7]), &lm(&[0, 1]), None).unwrap_err();
        assert!(err.to_string().contains("pixel 1"), "{err}");
        assert_eq!(cm.total(), 0);
        assert!(cm.accumulate(&lm(&[0]), &lm(&[0, 1]), None).is_err());
    }

    #[test]
    fn matches_nested_loop_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let m = rng.random_range(1..=5u8);
            let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..=m)).collect();
            let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..=m)).collect();
            let mut cm = ConfusionMatrix::new(m as usize);
            cm.accumulate(
                &ProxyLabelMap::new(8, 8, pred.clone()).unwrap(),
                &ProxyLabelMap::new(8, 8, gt.clone()).unwrap(),
                None,
            )
            .unwrap();
            for g in 0..=m {
                for p in 0..=m {
                    let mut n = 0;
                    for i in 0..64 {
                        if gt[i] == g && pred[i] == p {
                            n += 1;
                        }
                    }
                    assert_eq!(cm.get(g as usize, p as usize), n);
                }
            }
        }
    }

    #[test]
    fn localization_examples() {
        let gt = [true, false, true, false];
        let map = AttentionMap::new(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        for tau in [0.1, 0.5, 0.9] {
            let l = attention_localization_score(&map, &gt, tau).unwrap();
            assert_eq!((l.precision, l.recall, l.iou), (1.0, 1.0, 1.0));
        }
        let l = attention_localization_score(&AttentionMap::zeros(1, 4), &gt, 0.5).unwrap();
        assert_eq!((l.precision, l.recall, l.iou), (0.0, 0.0, 0.0));
        assert!(matches!(
            attention_localization_score(&map, &[false; 4], 0.5),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(attention_localization_score(&map, &gt, 1.0).is_err());
    }

    #[test]
    fn leakage_examples() {
        let gt = [true, false, false, false];
        let map = AttentionMap::new(1, 4, vec![1.0, 0.6, 0.2, 0.0]).unwrap();
        let l = background_leakage(&map, &gt, 0.5).unwrap();
        assert!((l - 0.6 / 1.6).abs() < 1e-7);
        assert_eq!(
            background_leakage(&AttentionMap::zeros(1, 4), &gt, 0.5).unwrap(),
            0.0
        );
    }
}
