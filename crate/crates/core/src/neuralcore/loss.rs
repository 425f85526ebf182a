use super::Real;
use crate::error::{Error, Result};

/// Probability floor inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-sum t_i ln(max(p_i, 1e-12))`
pub fn cross_entropy<T: Real>(p: &[T], t: &[T]) -> Result<T> {
    if p.len() != t.len() {
        return Err(Error::Shape(format!(
            "cross-entropy of {} probabilities against {} targets",
            p.len(),
            t.len()
        )));
    }
    let floor = T::from_f64c(PROB_FLOOR);
    Ok(p.iter()
        .zip(t)
        .map(|(&pi, &ti)| -ti * pi.max(floor).ln())
        .sum())
}

/// Fused head: returns `(loss, probabilities, d loss / d logits)`, the
/// gradient being `p - t` for a normalized target.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], t: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let p = softmax(logits);
    let loss = cross_entropy(&p, t)?;
    let grad = p.iter().zip(t).map(|(&pi, &ti)| pi - ti).collect();
    Ok((loss, p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        for n in [2usize, 7, 64, 152] {
            let logits = vec![0.3f64; n];
            let mut t = vec![0.0; n];
            t[n / 3] = 0.6;
            t[n - 1] += 0.4;
            let (loss, p, _) = softmax_cross_entropy(&logits, &t).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12);
            assert!(p.iter().all(|&x| (x - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn peaked_logits_give_small_loss() {
        let mut logits = vec![0.0f64; 10];
        logits[4] = 20.0;
        let mut t = vec![0.0; 10];
        t[4] = 1.0;
        let (loss, _, _) = softmax_cross_entropy(&logits, &t).unwrap();
        // scalar oracle: ln(1 + 9 e^-20)
        let want = (1.0 + 9.0 * (-20.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-15);
        assert!(loss < 1e-3);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(cross_entropy(&[0.5f64, 0.5], &[1.0]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..80),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
