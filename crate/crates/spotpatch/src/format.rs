//! Bit-exact patch container (`.sptp`) and footprint accounting.
//!
//! Layout, all integers little-endian:
//!   magic "SPTP" | version u16 | layer count u16
//!   per layer: layer id u16 | flags u8 (bit0 = gate, bit1 = has-BN)
//!     if gate:  omega f32 | mask length in bits u32 | packed mask bytes
//!     if BN:    channel count u32 | scale, shift, running mean, running
//!               variance as f32 arrays
//!
//! Masks are packed over the weight tensor's row-major flattened order,
//! LSB-first within each byte, zero-padded to a byte boundary.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::patching::{BnParams, PatchMode, PatchTrainState, SourceModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPTP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedPayload {
    pub omega: f32,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: u16,
    /// Present iff the layer's gate is open.
    pub gated: Option<GatedPayload>,
    pub bn: Option<BnParams>,
}

/// The deployment artifact: gate bits, bit-packed masks, per-layer scales,
/// and task batch-norm values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployedPatch {
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitMode {
    Base32,
    Base8,
}

impl BitMode {
    /// Bits per float parameter: the patch's float payload is counted as
    /// quantized alongside the base model.
    pub fn float_bits(self) -> u64 {
        match self {
            BitMode::Base32 => 32,
            BitMode::Base8 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FootprintReport {
    pub bits_gamma: u64,
    pub bits_theta: u64,
    pub ratio: f64,
    pub mode: BitMode,
    pub patched_layer_fraction: f64,
}

pub fn pack_mask(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], nbits: usize) -> Vec<bool> {
    (0..nbits).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

pub fn serialize(patch: &DeployedPatch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(patch.layers.len() as u16).to_le_bytes());
    for layer in &patch.layers {
        out.extend_from_slice(&layer.layer_id.to_le_bytes());
        let mut flags = 0u8;
        if layer.gated.is_some() {
            flags |= 1;
        }
        if layer.bn.is_some() {
            flags |= 2;
        }
        out.push(flags);
        if let Some(g) = &layer.gated {
            out.extend_from_slice(&g.omega.to_le_bytes());
            out.extend_from_slice(&(g.mask.len() as u32).to_le_bytes());
            out.extend_from_slice(&pack_mask(&g.mask));
        }
        if let Some(bn) = &layer.bn {
            out.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
            for arr in [&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var] {
                for v in arr.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated {}: expected {} bytes, {} remain",
                    what,
                    n,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<DeployedPatch> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}, expected {}", version, FORMAT_VERSION),
        });
    }
    let count = r.u16("layer count")?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let layer_id = r.u16("layer id")?;
        let flags_off = r.pos;
        let flags = r.take(1, "flags")?[0];
        if flags & !3 != 0 {
            return Err(Error::Format {
                offset: flags_off,
                message: format!("unknown flag bits 0b{:08b}", flags),
            });
        }
        let gated = if flags & 1 != 0 {
            let omega = r.f32("omega")?;
            let nbits = r.u32("mask bit length")? as usize;
            let packed = r.take(nbits.div_ceil(8), "mask payload")?;
            Some(GatedPayload {
                omega,
                mask: unpack_mask(packed, nbits),
            })
        } else {
            None
        };
        let bn = if flags & 2 != 0 {
            let channels = r.u32("bn channel count")? as usize;
            let mut arrays = Vec::with_capacity(4);
            for what in ["bn scale", "bn shift", "bn running mean", "bn running variance"] {
                let mut data = Vec::with_capacity(channels);
                for _ in 0..channels {
                    data.push(r.f32(what)?);
                }
                arrays.push(Tensor::new(vec![channels], data)?);
            }
            let running_var = arrays.pop().unwrap();
            let running_mean = arrays.pop().unwrap();
            let shift = arrays.pop().unwrap();
            let scale = arrays.pop().unwrap();
            Some(BnParams {
                scale,
                shift,
                running_mean,
                running_var,
            })
        } else {
            None
        };
        layers.push(LayerEntry {
            layer_id,
            gated,
            bn,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(DeployedPatch { layers })
}

/// Binarize the training state into a deployment patch.
///
/// Fine-tune mode ships the full parameter copy rather than a mask patch, so
/// it has no `.sptp` representation; its footprint is 1.0 by construction.
pub fn deploy(model: &SourceModel, state: &PatchTrainState, mode: PatchMode) -> Result<DeployedPatch> {
    if mode == PatchMode::FineTune {
        return Err(Error::Config(
            "fine-tune mode deploys a full parameter copy, not a mask patch".into(),
        ));
    }
    let mut layers = Vec::new();
    for (i, _) in model.layers.iter().enumerate() {
        let gated = state.patch[i].as_ref().and_then(|vars| {
            let gate = match mode {
                PatchMode::SpotPatch => vars.gate_logit >= 0.0,
                PatchMode::WeightTransform | PatchMode::Piggyback => true,
                PatchMode::BnOnly | PatchMode::FineTune => false,
            };
            gate.then(|| GatedPayload {
                omega: vars.scale,
                mask: vars.mask_logits.data().iter().map(|&r| r >= 0.0).collect(),
            })
        });
        let bn = state.bn[i].clone();
        if gated.is_some() || bn.is_some() {
            layers.push(LayerEntry {
                layer_id: i as u16,
                gated,
                bn,
            });
        }
    }
    Ok(DeployedPatch { layers })
}

/// Total parameter bits of the source model under a bit mode.
pub fn bitsize_theta(model: &SourceModel, mode: BitMode) -> u64 {
    (model.weight_elements() as u64 + model.bn_elements() as u64) * mode.float_bits()
}

/// (mask bits, float parameter count) shipped by the patch. Gate bits and
/// container framing are excluded: the metric counts parameters.
pub fn patch_components(patch: &DeployedPatch) -> (u64, u64) {
    let mut mask_bits = 0u64;
    let mut float_params = 0u64;
    for layer in &patch.layers {
        if let Some(g) = &layer.gated {
            mask_bits += g.mask.len() as u64;
            float_params += 1; // omega
        }
        if let Some(bn) = &layer.bn {
            float_params += bn.param_count() as u64;
        }
    }
    (mask_bits, float_params)
}

pub fn bitsize_gamma(patch: &DeployedPatch, mode: BitMode) -> u64 {
    let (mask_bits, float_params) = patch_components(patch);
    mask_bits + float_params * mode.float_bits()
}

/// Relative footprint of a mask patch against its source model.
pub fn footprint(patch: &DeployedPatch, model: &SourceModel, mode: BitMode) -> Result<FootprintReport> {
    let n_layers = model.layers.len();
    if let Some(bad) = patch
        .layers
        .iter()
        .find(|l| l.layer_id as usize >= n_layers)
    {
        return Err(Error::Config(format!(
            "patch layer id {} outside model with {} layers",
            bad.layer_id, n_layers
        )));
    }
    for layer in &patch.layers {
        let model_layer = &model.layers[layer.layer_id as usize];
        if let (Some(g), crate::patching::LayerParams::Weight(w)) =
            (&layer.gated, &model_layer.params)
        {
            if g.mask.len() != w.len() {
                return Err(Error::Config(format!(
                    "layer {}: mask has {} bits, weight tensor has {} elements",
                    layer.layer_id,
                    g.mask.len(),
                    w.len()
                )));
            }
        }
    }
    let bits_theta = bitsize_theta(model, mode);
    let bits_gamma = bitsize_gamma(patch, mode);
    let patchable = model.patchable_layers().len();
    let gated = patch.layers.iter().filter(|l| l.gated.is_some()).count();
    Ok(FootprintReport {
        bits_gamma,
        bits_theta,
        ratio: bits_gamma as f64 / bits_theta as f64,
        mode,
        patched_layer_fraction: if patchable == 0 {
            0.0
        } else {
            gated as f64 / patchable as f64
        },
    })
}

/// Footprint of the fine-tune baseline: the whole parameter set ships, so the
/// ratio is 1.0 per task by construction.
pub fn footprint_finetune(model: &SourceModel, mode: BitMode) -> FootprintReport {
    let bits_theta = bitsize_theta(model, mode);
    FootprintReport {
        bits_gamma: bits_theta,
        bits_theta,
        ratio: 1.0,
        mode,
        patched_layer_fraction: 1.0,
    }
}

/// Human-readable layer table for the inspector CLI.
pub fn inspect(patch: &DeployedPatch) -> serde_json::Value {
    let layers: Vec<_> = patch
        .layers
        .iter()
        .map(|l| {
            json!({
                "layer": l.layer_id,
                "gate": l.gated.is_some() as u8,
                "mask_bits": l.gated.as_ref().map_or(0, |g| g.mask.len()),
                "omega": l.gated.as_ref().map(|g| g.omega),
                "bn_channels": l.bn.as_ref().map_or(0, |b| b.channels()),
            })
        })
        .collect();
    json!({
        "format_version": FORMAT_VERSION,
        "layers": layers,
    })
}
