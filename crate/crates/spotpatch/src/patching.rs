//! Per-layer masked weight transforms with learned gates.
//!
//! A frozen source model is adapted by adding a scaled sign residual to each
//! patched weight tensor: W' = W + g * omega * (1 - 2M), where M is a 1-bit
//! mask and g a per-layer gate. Baseline patching modes fall out as
//! degenerate configurations of the same machinery.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv { stride: usize, pad: usize },
    BatchNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Weight shape: [in, out] for dense, [K, C, kh, kw] for conv,
    /// [channels] for batch-norm.
    pub weight_shape: Vec<usize>,
    pub patchable: bool,
}

/// Task-specific (or source) batch-norm parameters for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            scale: Tensor::full(vec![channels], 1.0),
            shift: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// 4 parameter arrays per channel.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum LayerParams {
    Weight(Tensor),
    Bn(BnParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// The frozen pre-trained parameter set. Immutable after construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceModel {
    pub layers: Vec<Layer>,
}

impl SourceModel {
    pub fn patchable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.patchable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight_elements(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Weight(w) => Some(w.len()),
                LayerParams::Bn(_) => None,
            })
            .sum()
    }

    pub fn bn_elements(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Bn(b) => Some(b.param_count()),
                LayerParams::Weight(_) => None,
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    SpotPatch,
    /// All gates forced open.
    WeightTransform,
    /// All gates forced closed; only batch-norm is trained.
    BnOnly,
    /// Elementwise multiplicative masks, no residual, no gates.
    Piggyback,
    /// Trains a full copy of the source parameters.
    FineTune,
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PatchMode::SpotPatch => "spotpatch",
            PatchMode::WeightTransform => "weight-transform",
            PatchMode::BnOnly => "bn-only",
            PatchMode::Piggyback => "piggyback",
            PatchMode::FineTune => "fine-tune",
        };
        f.write_str(s)
    }
}

/// Trainable patch variables for one patchable weight layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerPatchVars {
    pub mask_logits: Tensor,
    pub gate_logit: f32,
    pub scale: f32,
}

/// All trainable state for adapting one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchTrainState {
    /// One entry per model layer; Some for patchable weight layers when the
    /// mode carries masks.
    pub patch: Vec<Option<LayerPatchVars>>,
    /// Task batch-norm per model layer; Some for BN layers when the mode
    /// retrains BN.
    pub bn: Vec<Option<BnParams>>,
    /// Full weight copies, fine-tune mode only.
    pub finetune: Vec<Option<Tensor>>,
}

const INIT_MASK_LOGIT_RANGE: f32 = 0.01;
const INIT_SCALE: f32 = 0.001;
const INIT_GATE_LOGIT: f32 = 0.5;

impl PatchTrainState {
    pub fn init(model: &SourceModel, mode: PatchMode, rng: &mut impl Rng) -> Self {
        let n = model.layers.len();
        let mut state = PatchTrainState {
            patch: vec![None; n],
            bn: vec![None; n],
            finetune: vec![None; n],
        };
        for (i, layer) in model.layers.iter().enumerate() {
            match (&layer.params, mode) {
                (LayerParams::Weight(w), PatchMode::FineTune) => {
                    state.finetune[i] = Some(w.clone());
                }
                (LayerParams::Weight(w), PatchMode::SpotPatch)
                | (LayerParams::Weight(w), PatchMode::WeightTransform)
                | (LayerParams::Weight(w), PatchMode::Piggyback)
                    if layer.spec.patchable =>
                {
                    let logits: Vec<f32> = (0..w.len())
                        .map(|_| {
                            if mode == PatchMode::Piggyback {
                                // Multiplicative masks must start at 1 or the
                                // source weights are wiped out.
                                rng.gen_range(0.0..2.0 * INIT_MASK_LOGIT_RANGE)
                            } else {
                                rng.gen_range(-INIT_MASK_LOGIT_RANGE..INIT_MASK_LOGIT_RANGE)
                            }
                        })
                        .collect();
                    state.patch[i] = Some(LayerPatchVars {
                        mask_logits: Tensor::new(w.shape().to_vec(), logits).unwrap(),
                        gate_logit: INIT_GATE_LOGIT,
                        scale: INIT_SCALE,
                    });
                }
                (LayerParams::Bn(b), m) => {
                    // Piggyback trains masks only; every other mode carries
                    // task-specific BN.
                    if m != PatchMode::Piggyback {
                        state.bn[i] = Some(b.clone());
                    }
                }
                _ => {}
            }
        }
        state
    }

    /// Force every gate logit to a fixed value (e.g. -1.0 to close all gates).
    pub fn set_gate_logits(&mut self, value: f32) {
        for p in self.patch.iter_mut().flatten() {
            p.gate_logit = value;
        }
    }

    /// Copy batch-norm parameters (including running stats) from the source.
    pub fn copy_bn_from_source(&mut self, model: &SourceModel) {
        for (i, layer) in model.layers.iter().enumerate() {
            if let LayerParams::Bn(b) = &layer.params {
                if self.bn[i].is_some() {
                    self.bn[i] = Some(b.clone());
                }
            }
        }
    }
}

/// S = 1 - 2M for a {0,1}-valued mask.
pub fn sign_from_mask(mask: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument(format!(
            "sign_from_mask: mask value {} is not binary",
            bad
        )));
    }
    let mut out = mask.clone();
    for v in out.data_mut() {
        *v = 1.0 - 2.0 * *v;
    }
    Ok(out)
}

/// W' = W + omega * (1 - 2M).
pub fn weight_transform(weights: &Tensor, omega: f32, mask: &Tensor) -> Result<Tensor> {
    if !weights.same_shape(mask) {
        return Err(Error::Dimension {
            context: "weight_transform",
            lhs: weights.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let sign = sign_from_mask(mask)?;
    let mut out = weights.clone();
    for (o, s) in out.data_mut().iter_mut().zip(sign.data()) {
        *o += omega * s;
    }
    Ok(out)
}

/// W' = W + g * omega * (1 - 2M). A closed gate returns W bit-for-bit.
pub fn gated_transform(weights: &Tensor, gate: bool, omega: f32, mask: &Tensor) -> Result<Tensor> {
    if gate {
        weight_transform(weights, omega, mask)
    } else {
        if !weights.same_shape(mask) {
            return Err(Error::Dimension {
                context: "gated_transform",
                lhs: weights.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        Ok(weights.clone())
    }
}

/// W' = W .* M, the multiplicative-mask baseline.
pub fn piggyback_transform(weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if !weights.same_shape(mask) {
        return Err(Error::Dimension {
            context: "piggyback_transform",
            lhs: weights.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let mut out = weights.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    Ok(out)
}

/// Graph handles produced by one patched forward pass; the trainer reads
/// gradients and the loss builders read gate/scale vars through these.
pub struct ForwardBindings {
    pub output: Var,
    /// Binarized gate vars, one per patchable layer, in layer order.
    pub gates: Vec<Var>,
    /// (layer index, leaf var) for each trainable tensor group.
    pub gate_logits: Vec<(usize, Var)>,
    pub mask_logits: Vec<(usize, Var)>,
    pub scales: Vec<(usize, Var)>,
    pub bn_scales: Vec<(usize, Var)>,
    pub bn_shifts: Vec<(usize, Var)>,
    pub finetune: Vec<(usize, Var)>,
}

#[derive(Default)]
struct Bindings {
    gates: Vec<Var>,
    gate_logits: Vec<(usize, Var)>,
    mask_logits: Vec<(usize, Var)>,
    scales: Vec<(usize, Var)>,
    bn_scales: Vec<(usize, Var)>,
    bn_shifts: Vec<(usize, Var)>,
    finetune: Vec<(usize, Var)>,
}

/// Runs the model with patched parameters, recording the graph on `tape`.
///
/// Training mode uses batch statistics in batch-norm layers and updates the
/// task running stats in `state`; eval mode uses the stored running stats.
pub fn forward_patched(
    tape: &mut Tape,
    model: &SourceModel,
    state: &mut PatchTrainState,
    mode: PatchMode,
    x: &Tensor,
    training: bool,
) -> Result<ForwardBindings> {
    let mut b = Bindings::default();
    let mut cur = tape.constant(x.clone());
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate() {
        match (&layer.spec.kind, &layer.params) {
            (LayerKind::BatchNorm, LayerParams::Bn(source_bn)) => {
                let (bn, trainable) = match (&state.bn[i], mode) {
                    (Some(task), _) => (task.clone(), mode != PatchMode::Piggyback),
                    (None, PatchMode::Piggyback) => (source_bn.clone(), false),
                    (None, _) => {
                        return Err(Error::Config(format!(
                            "mode {} expects task batch-norm at layer {}, state has none",
                            mode, i
                        )))
                    }
                };
                let scale = tape.leaf(bn.scale.clone(), trainable);
                let shift = tape.leaf(bn.shift.clone(), trainable);
                let bn_training = training && trainable;
                let (y, mean, var) = tape.batchnorm(
                    cur,
                    scale,
                    shift,
                    &bn.running_mean,
                    &bn.running_var,
                    bn_training,
                )?;
                if bn_training {
                    let task = state.bn[i].as_mut().unwrap();
                    update_running(&mut task.running_mean, &mean);
                    update_running(&mut task.running_var, &var);
                }
                if trainable {
                    b.bn_scales.push((i, scale));
                    b.bn_shifts.push((i, shift));
                }
                cur = y;
                if i != last {
                    cur = tape.relu(cur);
                }
            }
            (kind, LayerParams::Weight(w)) if !matches!(kind, LayerKind::BatchNorm) => {
                let w_var = build_weights(tape, i, w, layer.spec.patchable, state, mode, &mut b)?;
                cur = match kind {
                    LayerKind::Dense => tape.matmul(cur, w_var)?,
                    LayerKind::Conv { stride, pad } => tape.conv2d(cur, w_var, *stride, *pad)?,
                    LayerKind::BatchNorm => unreachable!(),
                };
            }
            _ => {
                return Err(Error::Config(format!(
                    "layer {} kind/params mismatch",
                    i
                )))
            }
        }
    }
    Ok(ForwardBindings {
        output: cur,
        gates: b.gates,
        gate_logits: b.gate_logits,
        mask_logits: b.mask_logits,
        scales: b.scales,
        bn_scales: b.bn_scales,
        bn_shifts: b.bn_shifts,
        finetune: b.finetune,
    })
}

fn build_weights(
    tape: &mut Tape,
    i: usize,
    w: &Tensor,
    patchable: bool,
    state: &PatchTrainState,
    mode: PatchMode,
    b: &mut Bindings,
) -> Result<Var> {
    if mode == PatchMode::FineTune {
        let ft = state.finetune[i].as_ref().ok_or_else(|| {
            Error::Config(format!("fine-tune state missing weights for layer {}", i))
        })?;
        let v = tape.leaf(ft.clone(), true);
        b.finetune.push((i, v));
        return Ok(v);
    }
    let frozen = tape.constant(w.clone());
    if mode == PatchMode::BnOnly || !patchable {
        return Ok(frozen);
    }
    match (mode, &state.patch[i]) {
        (_, None) => Err(Error::Config(format!(
            "mode {} requires mask state for layer {}, state has none",
            mode, i
        ))),
        (PatchMode::Piggyback, Some(vars)) => {
            let logits = tape.leaf(vars.mask_logits.clone(), true);
            b.mask_logits.push((i, logits));
            let mask = tape.binarize_ste(logits);
            tape.mul(frozen, mask)
        }
        (PatchMode::SpotPatch, Some(vars)) | (PatchMode::WeightTransform, Some(vars)) => {
            let logits = tape.leaf(vars.mask_logits.clone(), true);
            b.mask_logits.push((i, logits));
            let mask = tape.binarize_ste(logits);
            let sign = tape.affine_const(mask, -2.0, 1.0);
            let omega = tape.leaf(Tensor::scalar(vars.scale), true);
            b.scales.push((i, omega));
            let amount = if mode == PatchMode::SpotPatch {
                let f = tape.leaf(Tensor::scalar(vars.gate_logit), true);
                b.gate_logits.push((i, f));
                let g = tape.binarize_ste(f);
                b.gates.push(g);
                tape.mul(g, omega)?
            } else {
                let one = tape.constant(Tensor::scalar(1.0));
                b.gates.push(one);
                omega
            };
            let residual = tape.mul_scalar(sign, amount)?;
            tape.add(frozen, residual)
        }
        (PatchMode::FineTune, _) | (PatchMode::BnOnly, _) => unreachable!(),
    }
}

const BN_MOMENTUM: f32 = 0.9;

fn update_running(running: &mut Tensor, batch: &Tensor) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}
