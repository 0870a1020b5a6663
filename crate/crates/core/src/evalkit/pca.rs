//! Principal-component projection by power iteration, for exporting
//! embedding clouds to two dimensions.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// One `k`-vector per input row.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal axes (zero vectors for uninformative axes).
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Variance of the projected coordinates along each axis.
    pub variances: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean-centred projection onto the top `k` principal axes.
pub fn pca_project(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Projection> {
    if k == 0 || rows.len() < k + 1 {
        return Err(CoreError::Contract(format!(
            "PCA to {k} axes needs at least {} rows, got {}",
            k + 1,
            rows.len()
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(CoreError::Contract(
            "PCA rows must share a positive width".into(),
        ));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let total_var: f64 = x.iter().map(|r| dot(r, r)).sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for a in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let orth = |v: &mut Vec<f64>, axes: &[Vec<f64>]| {
            for u in axes {
                let c = dot(v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
        };
        orth(&mut v, &axes);
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..1000 {
            // w = Xᵀ X v / n
            let proj: Vec<f64> = x.iter().map(|r| dot(r, &v)).collect();
            let mut w = vec![0.0; d];
            for (r, p) in x.iter().zip(&proj) {
                w.iter_mut()
                    .zip(r)
                    .for_each(|(acc, xi)| *acc += p * xi / n as f64);
            }
            orth(&mut w, &axes);
            let new_lambda = normalize(&mut w);
            let delta = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            lambda = new_lambda;
            if delta < 1e-12 || new_lambda == 0.0 {
                break;
            }
        }
        if lambda <= 1e-12 * total_var.max(f64::MIN_POSITIVE) {
            warn!(
                "PCA input has rank below {k}; axis {} and later are zero",
                a + 1
            );
            v = vec![0.0; d];
            lambda = 0.0;
        }
        axes.push(v);
        variances.push(lambda);
    }
    let coords = x
        .iter()
        .map(|r| axes.iter().map(|u| dot(r, u)).collect())
        .collect();
    Ok(Projection {
        coords,
        axes,
        mean,
        variances,
    })
}
