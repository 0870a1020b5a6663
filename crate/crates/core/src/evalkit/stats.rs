//! Summary statistics and the paired tests used by the evaluation.

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{CoreError, Result};

/// Mean and population standard deviation (two passes).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(CoreError::Contract(format!(
            "{k} successes out of {n} trials"
        )));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let b = Binomial::new(p, n).map_err(|e| CoreError::Contract(e.to_string()))?;
    Ok(b.sf(k - 1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub positive: u64,
    pub negative: u64,
    pub ties: u64,
    /// One-sided p-value for "positive differences dominate".
    pub p_value: f64,
}

/// One-sided sign test on paired differences; exact zeros are dropped.
pub fn sign_test(diffs: &[f64]) -> Result<SignTest> {
    let positive = diffs.iter().filter(|d| **d > 0.0).count() as u64;
    let negative = diffs.iter().filter(|d| **d < 0.0).count() as u64;
    let ties = diffs.len() as u64 - positive - negative;
    let n = positive + negative;
    let p_value = if n == 0 {
        1.0
    } else {
        binomial_upper_tail(positive, n, 0.5)?
    };
    Ok(SignTest {
        positive,
        negative,
        ties,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_matches_hand_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((m, s), (5.0, 2.0));
    }

    #[test]
    fn binomial_tail_and_sign_test() {
        assert!((binomial_upper_tail(3, 3, 0.5).unwrap() - 0.125).abs() < 1e-12);
        assert!((binomial_upper_tail(1, 2, 0.5).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(0, 5, 0.1).unwrap(), 1.0);
        let t = sign_test(&[1.0, 2.0, 0.0, -1.0, 3.0]).unwrap();
        assert_eq!((t.positive, t.negative, t.ties), (3, 1, 1));
        assert!((t.p_value - 5.0 / 16.0).abs() < 1e-12);
        assert_eq!(sign_test(&[0.0, 0.0]).unwrap().p_value, 1.0);
    }
}
