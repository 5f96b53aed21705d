//! Shared numeric primitives for 7-way score vectors.

use crate::error::{FerError, Result};
use crate::labels::NUM_CLASSES;

/// Raw per-class scores. All entries must be finite.
pub type LogitVector = [f64; NUM_CLASSES];

/// A normalized 7-way distribution: nonnegative, sums to 1 within 1e-6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbVector(pub [f64; NUM_CLASSES]);

impl ProbVector {
    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FerError::InvalidInput(
                "probability entries must be finite and nonnegative".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(FerError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Index of the largest entry; ties resolve to the lowest class code.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &LogitVector) -> Result<ProbVector> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(FerError::InvalidInput(
            "softmax input must be finite".into(),
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(ProbVector(out))
}

/// Stable softmax over the last axis of an arbitrary row slice, in place.
pub fn softmax_rows(rows: &mut ndarray::Array2<f64>) {
    for mut row in rows.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax(&[0.0; 7]).unwrap();
        for v in p.0 {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let x = [0.3, -1.2, 4.0, 0.0, 2.5, -0.7, 1.1];
        let mut shifted = x;
        for v in &mut shifted {
            *v += 1000.0;
        }
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (u, v) in a.0.iter().zip(&b.0) {
            // (x + 1000) - (max + 1000) is not bitwise x - max, so only
            // near-exact invariance is possible
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
    }

    #[test]
    fn matches_high_precision_oracle() {
        // exp/sum of [1,2,3,0,0,0,0] evaluated at 40 decimal digits.
        let expected = [
            0.079498487340942194395,
            0.21609929352886460925,
            0.58741878274235001187,
            0.02924585909696079612,
            0.02924585909696079612,
            0.02924585909696079612,
            0.02924585909696079612,
        ];
        let p = softmax(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for (got, want) in p.0.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let p = ProbVector([0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2]);
        assert_eq!(p.argmax(), 0);
    }

    proptest! {
        #[test]
        fn softmax_preserves_argmax(xs in proptest::array::uniform7(-50.0f64..50.0)) {
            let p = softmax(&xs).unwrap();
            let arg_in = {
                let mut best = 0;
                for i in 1..7 { if xs[i] > xs[best] { best = i; } }
                best
            };
            prop_assert_eq!(p.argmax(), arg_in);
        }

        #[test]
        fn softmax_sums_to_one(xs in proptest::array::uniform7(-500.0f64..500.0)) {
            let p = softmax(&xs).unwrap();
            let sum: f64 = p.0.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
