//! Accuracy, set-based IoU and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize], classes: Option<usize>) -> Result<()> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Contract(format!("need equal nonempty prediction/label vectors, got {} and {}", preds.len(), labels.len())));
    }
    if let Some(c) = classes {
        if let Some(bad) = preds.iter().chain(labels).find(|&&x| x >= c) {
            return Err(Error::Contract(format!("class {bad} out of range for {c} classes")));
        }
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels, None)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `confusion[truth][pred]` counts.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    check(preds, labels, Some(classes))?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

fn iou_from_confusion(m: &[Vec<u64>]) -> Vec<Option<f64>> {
    let c = m.len();
    (0..c)
        .map(|k| {
            let inter = m[k][k];
            let truth: u64 = m[k].iter().sum();
            let pred: u64 = (0..c).map(|r| m[r][k]).sum();
            let union = truth + pred - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

fn mean_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Mean IoU over classes that occur in the labels or the predictions, plus
/// the per-class IoU (`None` for classes absent from both).
pub fn mean_iou(preds: &[usize], labels: &[usize], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let per_class = iou_from_confusion(&confusion(preds, labels, classes)?);
    Ok((mean_present(&per_class), per_class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub n_items: usize,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Corpus-level metrics over one concatenated prediction stream.
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let confusion = confusion(preds, labels, classes)?;
        let per_class_iou = iou_from_confusion(&confusion);
        let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
        Ok(Self {
            accuracy: trace as f64 / preds.len() as f64,
            miou: mean_present(&per_class_iou),
            per_class_iou,
            n_items: preds.len(),
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}{:>10}\n{:<10}{:>10.4}\n{:<10}{:>10.4}\n{:<10}{:>10}\n", "metric", "value", "accuracy", self.accuracy, "miou", self.miou, "items", self.n_items);
        s += &format!("{:<10}{:>10}{:>10}\n", "class", "iou", "support");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let support: u64 = self.confusion[k].iter().sum();
            let v = iou.map_or("-".to_string(), |x| format!("{x:.4}"));
            s += &format!("{k:<10}{v:>10}{support:>10}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn set_iou(preds: &[usize], labels: &[usize], c: usize) -> Option<f64> {
        let a: HashSet<usize> = (0..preds.len()).filter(|&i| preds[i] == c).collect();
        let b: HashSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let union = a.union(&b).count();
        (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
    }

    #[test]
    fn closed_forms() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        let (m, per) = mean_iou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
        let (m, per) = mean_iou(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        assert_eq!(per[2], None);
        assert!((m - (0.5 + 0.5) / 2.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(mean_iou(&[3], &[0], 3).is_err());
    }

    #[test]
    fn report_rows_sum_to_label_counts() {
        let r = EvalReport::from_predictions(&[0, 2, 1, 1, 0], &[0, 1, 1, 2, 2], 3).unwrap();
        let rows: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 2, 2]);
        assert!(r.table().contains("accuracy"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn metrics_match_set_oracle(c in 2usize..6, pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0 % c).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1 % c).collect();
            let acc = (0..preds.len()).filter(|&i| preds[i] == labels[i]).count() as f64 / preds.len() as f64;
            prop_assert_eq!(accuracy(&preds, &labels).unwrap(), acc);
            let (m, per) = mean_iou(&preds, &labels, c).unwrap();
            let oracle: Vec<Option<f64>> = (0..c).map(|k| set_iou(&preds, &labels, k)).collect();
            prop_assert_eq!(&per, &oracle);
            let present: Vec<f64> = oracle.iter().flatten().copied().collect();
            prop_assert_eq!(m, present.iter().sum::<f64>() / present.len() as f64);
            prop_assert!(per.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
