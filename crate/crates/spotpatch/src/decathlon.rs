//! Decathlon-style benchmark scoring against a fine-tuning baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecathlonResult {
    pub per_task_score: Vec<f64>,
    pub baselines: Vec<f64>,
    pub score: f64,
    pub footprint: f64,
    pub score_per_footprint: f64,
}

/// b_d = 2 * mAP_d(fine-tuning) - 1, normalizing the baseline's own total
/// benchmark score to 2500.
pub fn baseline_from_finetune(ft_map: &[f64]) -> Result<Vec<f64>> {
    for &m in ft_map {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Argument(format!("mAP {} outside [0, 1]", m)));
        }
    }
    Ok(ft_map.iter().map(|&m| 2.0 * m - 1.0).collect())
}

/// Score = 10000 * mean over tasks of (max(s_d - b_d, 0) / (1 - b_d))^2.
pub fn score(s: &[f64], b: &[f64]) -> Result<f64> {
    if s.len() != b.len() {
        return Err(Error::Argument(format!(
            "score: {} task scores vs {} baselines",
            s.len(),
            b.len()
        )));
    }
    if s.is_empty() {
        return Err(Error::Argument("score: no tasks".into()));
    }
    let mut total = 0.0;
    for (&sd, &bd) in s.iter().zip(b) {
        if bd >= 1.0 {
            return Err(Error::Argument(format!(
                "baseline {} >= 1 makes the normalizer non-positive",
                bd
            )));
        }
        let gain = (sd - bd).max(0.0) / (1.0 - bd);
        total += gain * gain;
    }
    Ok(10000.0 * total / s.len() as f64)
}

pub fn score_per_footprint(score: f64, footprint: f64) -> Result<f64> {
    if footprint <= 0.0 {
        return Err(Error::Argument(format!(
            "footprint {} must be positive",
            footprint
        )));
    }
    Ok(score / footprint)
}

pub fn evaluate(s: &[f64], ft_map: &[f64], footprint: f64) -> Result<DecathlonResult> {
    let baselines = baseline_from_finetune(ft_map)?;
    let total = score(s, &baselines)?;
    Ok(DecathlonResult {
        per_task_score: s.to_vec(),
        baselines,
        score: total,
        footprint,
        score_per_footprint: score_per_footprint(total, footprint)?,
    })
}
