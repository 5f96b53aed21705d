use ndarray::Array2;

use crate::error::{FerError, Result};

/// Sinusoidal positional encoding:
///   PE(pos, 2i)   = sin(pos / 10000^(2i/d))
///   PE(pos, 2i+1) = cos(pos / 10000^(2i/d))
pub fn positional_encoding(t: usize, d: usize) -> Result<Array2<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(FerError::Config(format!(
            "positional encoding dim must be even and > 0, got {d}"
        )));
    }
    if t < 1 {
        return Err(FerError::Config("sequence length must be >= 1".into()));
    }
    let mut pe = Array2::<f64>::zeros((t, d));
    for pos in 0..t {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = rate.sin();
            pe[[pos, 2 * i + 1]] = rate.cos();
        }
    }
    Ok(pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_zero_alternates_zero_one() {
        let pe = positional_encoding(3, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe[[0, 2 * i]], 0.0);
            assert_eq!(pe[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn row_one_matches_high_precision_sinusoids() {
        // sin(1), cos(1), sin(10^-2), cos(10^-2) at 40 decimal digits
        let pe = positional_encoding(2, 4).unwrap();
        let want = [
            0.84147098480789650665,
            0.5403023058681397174,
            0.0099998333341666646825,
            0.99995000041666527778,
        ];
        for (j, w) in want.iter().enumerate() {
            assert!((pe[[1, j]] - w).abs() < 1e-10, "{} vs {w}", pe[[1, j]]);
        }
    }

    #[test]
    fn entries_bounded_by_one() {
        let pe = positional_encoding(50, 512).unwrap();
        for v in pe.iter() {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn deterministic_across_calls() {
        let a = positional_encoding(9, 64).unwrap();
        let b = positional_encoding(9, 64).unwrap();
        assert_eq!(a, b);
    }
}
