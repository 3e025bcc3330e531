use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ResponseEstimate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<String>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// `z[i][j] = (v_i − v_j) / sqrt(s_i² + s_j²)`
    pub z: Vec<Vec<f64>>,
    pub max_abs_z: f64,
    /// Every pairwise `|z| < 3`.
    pub consensus: bool,
    /// Index of the estimate with the largest total `|z|` when consensus fails.
    pub outlier: Option<usize>,
    pub outlier_method: Option<String>,
}

fn z_score(a: &ResponseEstimate, b: &ResponseEstimate) -> f64 {
    let diff = a.value - b.value;
    let s = a.stderr.hypot(b.stderr);
    if diff == 0.0 {
        0.0
    } else if s == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / s
    }
}

/// Pairwise z-scores of estimates of one target.
pub fn compare_estimates(estimates: &[ResponseEstimate]) -> Result<ComparisonReport> {
    if estimates.len() < 2 {
        return Err(Error::config("estimates", "need at least two estimates to compare"));
    }
    let target = &estimates[0].target;
    if let Some(k) = estimates.iter().position(|e| &e.target != target) {
        return Err(Error::config(
            format!("estimates[{k}].target"),
            format!(
                "estimate targets differ: {:?} vs {:?}",
                estimates[k].target, target
            ),
        ));
    }
    let n = estimates.len();
    let z: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| z_score(&estimates[i], &estimates[j])).collect())
        .collect();
    let max_abs_z = z
        .iter()
        .flatten()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);
    let consensus = max_abs_z < 3.0;
    let outlier = (!consensus).then(|| {
        let totals: Vec<f64> = z.iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
        (0..n)
            .max_by(|&a, &b| totals[a].total_cmp(&totals[b]))
            .expect("non-empty")
    });
    Ok(ComparisonReport {
        methods: estimates.iter().map(|e| e.method.tag().to_string()).collect(),
        values: estimates.iter().map(|e| e.value).collect(),
        stderrs: estimates.iter().map(|e| e.stderr).collect(),
        z,
        max_abs_z,
        consensus,
        outlier_method: outlier.map(|k| estimates[k].method.tag().to_string()),
        outlier,
    })
}
