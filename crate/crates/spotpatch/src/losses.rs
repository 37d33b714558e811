//! Composite training objective: detection loss plus sparsity and
//! adaptation penalties on the patch variables.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_lambda_sps")]
    pub lambda_sps: f32,
    #[serde(default = "default_lambda_adp")]
    pub lambda_adp: f32,
    #[serde(default = "default_box_weight")]
    pub box_weight: f32,
}

fn default_lambda_sps() -> f32 {
    1e-4
}
fn default_lambda_adp() -> f32 {
    2e-5
}
fn default_box_weight() -> f32 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sps: default_lambda_sps(),
            lambda_adp: default_lambda_adp(),
            box_weight: default_box_weight(),
        }
    }
}

/// Per-cell targets for the grid detection head: a class per cell
/// (0 = background) and box deltas for foreground cells.
#[derive(Clone, Debug)]
pub struct CellTargets {
    pub classes: Vec<usize>,
    pub deltas: Vec<Option<[f32; 4]>>,
}

impl CellTargets {
    pub fn foreground(&self) -> usize {
        self.deltas.iter().filter(|d| d.is_some()).count()
    }
}

/// Mean cross-entropy over all cells plus box_weight times the mean
/// smooth-L1 over foreground cells. The box term is zero when no cell is
/// foreground.
pub fn detection_loss(
    tape: &mut Tape,
    class_logits: Var,
    box_deltas: Var,
    targets: &CellTargets,
    cfg: &LossConfig,
) -> Result<Var> {
    let cells = targets.classes.len();
    if cells == 0 {
        return Err(Error::Argument("detection_loss: no cells".into()));
    }
    if targets.deltas.len() != cells {
        return Err(Error::Argument(format!(
            "detection_loss: {} classes vs {} delta entries",
            cells,
            targets.deltas.len()
        )));
    }
    let cls = tape.softmax_cross_entropy(class_logits, &targets.classes)?;
    let fg = targets.foreground();
    if fg == 0 {
        return Ok(cls);
    }
    let mut target = Tensor::zeros(vec![cells, 4]);
    let mut weights = Tensor::zeros(vec![cells, 4]);
    let w = 1.0 / (4 * fg) as f32;
    for (cell, d) in targets.deltas.iter().enumerate() {
        if let Some(d) = d {
            for k in 0..4 {
                target.data_mut()[cell * 4 + k] = d[k];
                weights.data_mut()[cell * 4 + k] = w;
            }
        }
    }
    let box_term = tape.smooth_l1(box_deltas, &target, &weights)?;
    let box_scaled = tape.scale(box_term, cfg.box_weight);
    tape.add(cls, box_scaled)
}

/// Sum of binarized gate variables, on the graph (STE gradient flows to the
/// gate logits).
pub fn sparsity_loss_graph(tape: &mut Tape, gates: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &g in gates {
        acc = tape.add(acc, g)?;
    }
    Ok(acc)
}

/// Sum of squared scaling factors, on the graph.
pub fn adaptation_loss_graph(tape: &mut Tape, scales: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &s in scales {
        let sq = tape.mul(s, s)?;
        acc = tape.add(acc, sq)?;
    }
    Ok(acc)
}

/// det + lambda_sps * sps + lambda_adp * adp, on the graph.
pub fn total_loss_graph(
    tape: &mut Tape,
    det: Var,
    sps: Var,
    adp: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let sps_term = tape.scale(sps, cfg.lambda_sps);
    let adp_term = tape.scale(adp, cfg.lambda_adp);
    let partial = tape.add(det, sps_term)?;
    tape.add(partial, adp_term)
}

/// Number of open gates.
pub fn sparsity_loss(gates: &[bool]) -> f64 {
    gates.iter().filter(|&&g| g).count() as f64
}

/// Sum of squared scaling factors.
pub fn adaptation_loss(scales: &[f32]) -> f64 {
    scales.iter().map(|&s| (s as f64) * (s as f64)).sum()
}

pub fn total_loss(det: f64, sps: f64, adp: f64, cfg: &LossConfig) -> f64 {
    det + cfg.lambda_sps as f64 * sps + cfg.lambda_adp as f64 * adp
}
