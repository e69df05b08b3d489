//! Evaluation metrics over class predictions.

use crate::error::{Error, Result};

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    check(predicted, gold)?;
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over the `num_classes` classes. A class
/// with no gold and no predicted members scores 0 but still counts, so the
/// metric does not depend on which classes happen to appear.
pub fn macro_f1(predicted: &[usize], gold: &[usize], num_classes: usize) -> Result<f64> {
    check(predicted, gold)?;
    if num_classes == 0 {
        return Err(Error::Domain("macro_f1 over zero classes".into()));
    }
    let mut total = 0.0;
    for k in 0..num_classes {
        let tp = predicted.iter().zip(gold).filter(|(&p, &g)| p == k && g == k).count() as f64;
        let fp = predicted.iter().zip(gold).filter(|(&p, &g)| p == k && g != k).count() as f64;
        let fn_ = predicted.iter().zip(gold).filter(|(&p, &g)| p != k && g == k).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    Ok(total / num_classes as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a row-major `[n×k]` matrix.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values.chunks(k).map(argmax).collect()
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn check(predicted: &[usize], gold: &[usize]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::Domain("metric over an empty set".into()));
    }
    if predicted.len() != gold.len() {
        return Err(Error::dim("metric", &[predicted.len()], &[gold.len()]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_f1() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        // class 0: tp 2, fp 0, fn 1 → 0.8; class 1: tp 1, fp 1, fn 0 → 2/3
        let f1 = macro_f1(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[1, 1], &[1, 1], 2).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_rows(&[0.0, 1.0, 5.0, 5.0], 2), vec![1, 0]);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
