use crate::error::{DigError, Result};

use super::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Sum of per-sample logistic losses, computed from logits.
pub(crate) fn bce_terms<T: Scalar>(logits: &[T], labels: &[T]) -> T {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum()
}

/// Mean binary cross-entropy between logits and `{0,1}` labels.
pub fn bce_loss<T: Scalar>(logits: &[T], labels: &[T]) -> Result<T> {
    if logits.is_empty() {
        return Err(DigError::InvalidInput("bce_loss on empty input".into()));
    }
    if logits.len() != labels.len() {
        return Err(DigError::shape("bce_loss", logits.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(DigError::InvalidInput(format!("non-binary label {bad}")));
    }
    Ok(bce_terms(logits, labels) / T::of_usize(logits.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_logit_is_ln2() {
        assert!((bce_loss(&[0.0f64], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.0f64, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn positive_logit_two() {
        // −ln σ(2) = ln(1 + e^{−2})
        let expect = (1.0f64 + (-2.0f64).exp()).ln();
        let got = bce_loss(&[2.0f64], &[1.0]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn large_logits_stay_finite() {
        let l = bce_loss(&[800.0f64, -800.0], &[0.0, 1.0]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        let l = bce_loss(&[800.0f32], &[1.0]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rejects_empty_and_non_binary() {
        assert!(bce_loss::<f64>(&[], &[]).is_err());
        assert!(bce_loss(&[0.3f64], &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn bce_is_non_negative(z in prop::collection::vec(-50.0f64..50.0, 1..20), seed in any::<u64>()) {
            let labels: Vec<f64> = z.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
            prop_assert!(bce_loss(&z, &labels).unwrap() >= 0.0);
        }
    }
}
