//! Open-loop chunk comparison.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean over steps of the per-step delta cosine; steps where either
    /// vector is zero contribute 0.
    pub cos_sim: f64,
}

pub fn traj_metrics(predicted: &[[f32; 2]], target: &[[f32; 2]]) -> Result<TrajMetrics> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(CoreError::Contract(format!(
            "trajectory shapes differ: {}x2 vs {}x2",
            predicted.len(),
            target.len()
        )));
    }
    let n = predicted.len();
    let (mut se, mut ae, mut cos) = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(target) {
        let (p, t) = ([p[0] as f64, p[1] as f64], [t[0] as f64, t[1] as f64]);
        for k in 0..2 {
            se += (p[k] - t[k]).powi(2);
            ae += (p[k] - t[k]).abs();
        }
        let np = p[0].hypot(p[1]);
        let nt = t[0].hypot(t[1]);
        if np > 0.0 && nt > 0.0 {
            cos += ((p[0] * t[0] + p[1] * t[1]) / (np * nt)).clamp(-1.0, 1.0);
        }
    }
    Ok(TrajMetrics {
        mse: se / (2 * n) as f64,
        mae: ae / (2 * n) as f64,
        cos_sim: cos / n as f64,
    })
}
