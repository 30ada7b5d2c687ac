use crate::error::{Result, TifError};

fn check(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(TifError::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(TifError::InvalidArgument("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over every class that occurs in
/// either `truth` or `pred`. A class with no true positives scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let k = pred.iter().chain(truth).max().expect("non-empty") + 1;
    let (mut tp, mut fp, mut fnn) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tp[c] + fp[c] + fnn[c] > 0).collect();
    let sum: f64 = present
        .iter()
        .map(|&c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnn[c]) as f64)
        .sum();
    Ok(sum / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hand_computed() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 1, fp 0, fn 1 -> 2/3.
        let f = macro_f1(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert!((accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[1, 0], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(macro_f1(&[0], &[0, 1]).is_err());
    }
}
