//! Experiment driver: model construction, seeded SGD training, desk-scale
//! decathlon runs, and report assembly.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{cell_targets, decode_predictions, Dataset, Sample, SyntheticTaskSpec};
use crate::decathlon::{self, DecathlonResult};
use crate::error::{Error, Result};
use crate::eval::{map_at_50, Box};
use crate::format::{self, BitMode, DeployedPatch, FootprintReport};
use crate::losses::{
    adaptation_loss_graph, detection_loss, sparsity_loss_graph, total_loss_graph, LossConfig,
};
use crate::patching::{
    forward_patched, BnParams, ForwardBindings, Layer, LayerKind, LayerParams, LayerSpec,
    PatchMode, PatchTrainState, SourceModel,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Convolutional backbone description; every conv is followed by BN + ReLU,
/// and a 1x1 detection-head conv (classes + 1 background + 4 deltas) is
/// appended automatically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub convs: Vec<ConvSpec>,
}

impl ModelSpec {
    /// Footprint-accounting default: wide enough that BN is a small fraction
    /// of the parameter count.
    pub fn default_toy() -> Self {
        let c = |out, stride| ConvSpec {
            out_channels: out,
            kernel: 3,
            stride,
            pad: 1,
        };
        ModelSpec {
            input_channels: 3,
            image_size: 32,
            num_classes: 3,
            convs: vec![c(32, 2), c(32, 1), c(32, 2), c(32, 1), c(32, 2), c(32, 1), c(32, 1)],
        }
    }

    /// Smaller backbone used by the training benchmarks.
    pub fn default_train() -> Self {
        let c = |out, stride| ConvSpec {
            out_channels: out,
            kernel: 3,
            stride,
            pad: 1,
        };
        ModelSpec {
            input_channels: 3,
            image_size: 32,
            num_classes: 3,
            convs: vec![c(12, 2), c(12, 2), c(12, 2), c(12, 1), c(12, 1)],
        }
    }

    pub fn grid(&self) -> usize {
        let stride: usize = self.convs.iter().map(|c| c.stride).product();
        self.image_size / stride
    }

    pub fn head_channels(&self) -> usize {
        self.num_classes + 1 + 4
    }

    /// Randomly initialized model with identity batch-norm.
    pub fn build(&self, rng: &mut impl Rng) -> SourceModel {
        let mut layers = Vec::new();
        let mut in_ch = self.input_channels;
        for c in &self.convs {
            layers.push(conv_layer(c.out_channels, in_ch, c.kernel, c.stride, c.pad, rng));
            layers.push(Layer {
                spec: LayerSpec {
                    kind: LayerKind::BatchNorm,
                    weight_shape: vec![c.out_channels],
                    patchable: false,
                },
                params: LayerParams::Bn(BnParams::identity(c.out_channels)),
            });
            in_ch = c.out_channels;
        }
        layers.push(conv_layer(self.head_channels(), in_ch, 1, 1, 0, rng));
        SourceModel { layers }
    }
}

fn conv_layer(out: usize, inp: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Layer {
    let fan_in = (inp * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..out * inp * k * k)
        .map(|_| normal_sample(rng) * std)
        .collect();
    Layer {
        spec: LayerSpec {
            kind: LayerKind::Conv { stride, pad },
            weight_shape: vec![out, inp, k, k],
            patchable: true,
        },
        params: LayerParams::Weight(Tensor::new(vec![out, inp, k, k], data).unwrap()),
    }
}

fn normal_sample(rng: &mut impl Rng) -> f32 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f32,
    pub momentum: f32,
    pub steps: usize,
    pub batch_size: usize,
    /// Gate logits move on a gradient scaled by lambda_sps and sigma'; they
    /// need a larger step to traverse their init within a desk-scale budget.
    pub gate_lr_mult: f32,
    pub mask_lr_mult: f32,
    /// Scaling factors move slowly: the gate dynamics compare the task-loss
    /// benefit (proportional to omega) against lambda_sps, and a fast-growing
    /// omega would drown out the sparsity pressure.
    #[serde(default = "default_scale_lr_mult")]
    pub scale_lr_mult: f32,
}

fn default_scale_lr_mult() -> f32 {
    0.005
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            steps: 400,
            batch_size: 8,
            gate_lr_mult: 200.0,
            mask_lr_mult: 20.0,
            scale_lr_mult: default_scale_lr_mult(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub mode: PatchMode,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Extra steps for training the source model from scratch.
    #[serde(default = "default_source_steps")]
    pub source_steps: usize,
    pub source_task: SyntheticTaskSpec,
    pub target_tasks: Vec<SyntheticTaskSpec>,
    #[serde(default = "default_bit_mode")]
    pub bit_mode: BitMode,
}

fn default_source_steps() -> usize {
    1600
}
fn default_bit_mode() -> BitMode {
    BitMode::Base32
}

impl ExperimentConfig {
    pub fn desk_default(mode: PatchMode, seed: u64) -> Self {
        let task = |s: u64, delta: f64| SyntheticTaskSpec {
            seed: s,
            image_size: 32,
            channels: 3,
            num_classes: 3,
            delta,
            objects_min: 1,
            objects_max: 2,
            train_count: 96,
            eval_count: 48,
        };
        ExperimentConfig {
            model: ModelSpec::default_train(),
            mode,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed,
            source_steps: 1600,
            source_task: task(11, 0.0),
            target_tasks: vec![task(101, 0.35), task(202, 0.7), task(303, 1.0)],
        bit_mode: BitMode::Base32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_seed: u64,
    pub delta: f64,
    pub map50: f64,
    pub footprint: FootprintReport,
    pub gate_states: Vec<bool>,
    pub patched_fraction: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub per_task: Vec<TaskReport>,
    pub total_footprint: f64,
    pub decathlon: Option<DecathlonResult>,
    pub wall_clock_secs: f64,
}

fn subseed(seed: u64, tag: u64) -> u64 {
    // splitmix64 step over the mixed input
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Train the source model from scratch on the source task.
pub fn train_source(cfg: &ExperimentConfig) -> Result<SourceModel> {
    let dataset = crate::data::gen_task(&cfg.source_task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 1));
    let init = cfg.model.build(&mut rng);
    let mut state = PatchTrainState::init(&init, PatchMode::FineTune, &mut rng);
    let opt = OptimizerConfig {
        steps: cfg.source_steps,
        ..cfg.optimizer.clone()
    };
    let mut trainer = Trainer::new(&init, PatchMode::FineTune, &cfg.loss, &opt, &cfg.model);
    trainer.run(&dataset, &mut state, &mut rng)?;
    // Materialize the trained copy as the frozen source.
    let mut layers = init.layers.clone();
    for (i, layer) in layers.iter_mut().enumerate() {
        if let Some(w) = &state.finetune[i] {
            layer.params = LayerParams::Weight(w.clone());
        }
        if let Some(bn) = &state.bn[i] {
            layer.params = LayerParams::Bn(bn.clone());
        }
    }
    Ok(SourceModel { layers })
}

/// Train a patch for one target task and report metrics.
pub fn train_patch(
    model: &SourceModel,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    task_index: usize,
) -> Result<(PatchTrainState, Option<DeployedPatch>, TaskReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 1000 + task_index as u64));
    let mut state = PatchTrainState::init(model, cfg.mode, &mut rng);
    let mut trainer = Trainer::new(model, cfg.mode, &cfg.loss, &cfg.optimizer, &cfg.model);
    let final_loss = trainer.run(dataset, &mut state, &mut rng)?;
    let (patch, footprint) = if cfg.mode == PatchMode::FineTune {
        (None, format::footprint_finetune(model, cfg.bit_mode))
    } else {
        let patch = format::deploy(model, &state, cfg.mode)?;
        let fp = format::footprint(&patch, model, cfg.bit_mode)?;
        (Some(patch), fp)
    };
    let gate_states = gate_states(&state, cfg.mode, model);
    let map50 = evaluate_map(model, &mut state, cfg.mode, dataset, &cfg.model)?;
    let report = TaskReport {
        task_seed: dataset.spec.seed,
        delta: dataset.spec.delta,
        map50,
        patched_fraction: footprint.patched_layer_fraction,
        footprint,
        gate_states,
        final_loss,
    };
    Ok((state, patch, report))
}

fn gate_states(state: &PatchTrainState, mode: PatchMode, model: &SourceModel) -> Vec<bool> {
    model
        .patchable_layers()
        .iter()
        .map(|&i| match (mode, &state.patch[i]) {
            (PatchMode::SpotPatch, Some(v)) => v.gate_logit >= 0.0,
            (PatchMode::WeightTransform, Some(_)) | (PatchMode::Piggyback, Some(_)) => true,
            (PatchMode::FineTune, _) => true,
            _ => false,
        })
        .collect()
}

/// Run the full decathlon: train the source, patch every target task, and
/// score against the fine-tune baseline.
///
/// `baseline_map` supplies the fine-tune per-task mAPs when the configured
/// mode is not fine-tune itself.
pub fn run_decathlon(
    cfg: &ExperimentConfig,
    baseline_map: Option<&[f64]>,
) -> Result<(RunReport, Vec<Option<DeployedPatch>>)> {
    if cfg.target_tasks.len() < 2 {
        return Err(Error::Config(format!(
            "decathlon needs at least 2 target tasks, got {}",
            cfg.target_tasks.len()
        )));
    }
    let started = Instant::now();
    let model = train_source(cfg)?;
    let mut per_task = Vec::new();
    let mut patches = Vec::new();
    for (ti, task) in cfg.target_tasks.iter().enumerate() {
        let dataset = crate::data::gen_task(task)?;
        let (_, patch, report) = train_patch(&model, &dataset, cfg, ti)?;
        per_task.push(report);
        patches.push(patch);
    }
    let maps: Vec<f64> = per_task.iter().map(|t| t.map50).collect();
    let total_footprint: f64 = per_task.iter().map(|t| t.footprint.ratio).sum();
    let ft_maps: Vec<f64> = match (cfg.mode, baseline_map) {
        (PatchMode::FineTune, _) => maps.clone(),
        (_, Some(b)) if b.len() == maps.len() => b.to_vec(),
        (_, Some(b)) => {
            return Err(Error::Config(format!(
                "baseline has {} tasks, run has {}",
                b.len(),
                maps.len()
            )))
        }
        (_, None) => {
            return Err(Error::Config(
                "scoring a non-fine-tune run requires a fine-tune baseline".into(),
            ))
        }
    };
    let decathlon = decathlon::evaluate(&maps, &ft_maps, total_footprint)?;
    let report = RunReport {
        config: cfg.clone(),
        per_task,
        total_footprint,
        decathlon: Some(decathlon),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, patches))
}

/// Gate heatmap as a portable graymap (P2): one row per task, one column per
/// patchable layer; closed gates are white, open gates dark.
pub fn dump_gates(reports: &[TaskReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Argument("dump_gates: no task reports".into()));
    }
    let cols = reports[0].gate_states.len();
    let mut out = format!("P2\n{} {}\n255\n", cols, reports.len());
    for r in reports {
        let row: Vec<&str> = r
            .gate_states
            .iter()
            .map(|&g| if g { "32" } else { "255" })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// mAP@0.5 of the current (binarized) state on the task's eval split.
pub fn evaluate_map(
    model: &SourceModel,
    state: &mut PatchTrainState,
    mode: PatchMode,
    dataset: &Dataset,
    spec: &ModelSpec,
) -> Result<f64> {
    let samples: Vec<&Sample> = dataset.eval.iter().collect();
    if samples.is_empty() {
        return Err(Error::Argument("evaluate_map: empty eval split".into()));
    }
    let batch = batch_images(&samples);
    let mut tape = Tape::new();
    let b = forward_patched(&mut tape, model, state, mode, &batch, false)?;
    let k = spec.head_channels();
    let logits = tape.channel_rows(b.output, 0, spec.num_classes + 1)?;
    let deltas = tape.channel_rows(b.output, spec.num_classes + 1, k)?;
    let pred_boxes = decode_predictions(
        tape.value(logits),
        tape.value(deltas),
        samples.len(),
        spec.image_size,
        spec.grid(),
        0.05,
    );
    // Shift each image into its own coordinate band so cross-image boxes
    // can never overlap during matching.
    let band = (spec.image_size * 4) as f64;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (si, sample) in samples.iter().enumerate() {
        let off = si as f64 * band;
        for p in &pred_boxes[si] {
            preds.push(Box {
                xmin: p.xmin + off,
                xmax: p.xmax + off,
                ..*p
            });
        }
        for g in &sample.boxes {
            gts.push(Box {
                xmin: g.xmin as f64 + off,
                ymin: g.ymin as f64,
                xmax: g.xmax as f64 + off,
                ymax: g.ymax as f64,
                class: g.class,
                score: 1.0,
            });
        }
    }
    Ok(map_at_50(&preds, &gts)?.map)
}

fn batch_images(samples: &[&Sample]) -> Tensor {
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(
        vec![samples.len(), shape[0], shape[1], shape[2]],
        data,
    )
    .unwrap()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Group {
    Mask(usize),
    Gate(usize),
    Scale(usize),
    BnScale(usize),
    BnShift(usize),
    FineTune(usize),
}

struct Trainer<'a> {
    model: &'a SourceModel,
    mode: PatchMode,
    loss: &'a LossConfig,
    opt: &'a OptimizerConfig,
    spec: &'a ModelSpec,
    velocity: HashMap<Group, Tensor>,
}

impl<'a> Trainer<'a> {
    fn new(
        model: &'a SourceModel,
        mode: PatchMode,
        loss: &'a LossConfig,
        opt: &'a OptimizerConfig,
        spec: &'a ModelSpec,
    ) -> Self {
        Trainer {
            model,
            mode,
            loss,
            opt,
            spec,
            velocity: HashMap::new(),
        }
    }

    fn run(
        &mut self,
        dataset: &Dataset,
        state: &mut PatchTrainState,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if dataset.train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let mut last_loss = 0.0;
        for step in 0..self.opt.steps {
            let batch: Vec<&Sample> = (0..self.opt.batch_size)
                .map(|_| &dataset.train[rng.gen_range(0..dataset.train.len())])
                .collect();
            last_loss = self.step(&batch, state).map_err(|e| match e {
                Error::Run { message, .. } => Error::Run { step, message },
                other => other,
            })?;
            if !last_loss.is_finite() {
                return Err(Error::Run {
                    step,
                    message: format!("loss {} is not finite", last_loss),
                });
            }
        }
        Ok(last_loss)
    }

    fn step(&mut self, batch: &[&Sample], state: &mut PatchTrainState) -> Result<f64> {
        let images = batch_images(batch);
        let targets = cell_targets(batch, self.spec.image_size, self.spec.grid());
        let mut tape = Tape::new();
        let b = forward_patched(&mut tape, self.model, state, self.mode, &images, true)?;
        let k = self.spec.head_channels();
        let logits = tape.channel_rows(b.output, 0, self.spec.num_classes + 1)?;
        let deltas = tape.channel_rows(b.output, self.spec.num_classes + 1, k)?;
        let det = detection_loss(&mut tape, logits, deltas, &targets, self.loss)?;
        let gate_vars: Vec<_> = b.gates.clone();
        let scale_vars: Vec<_> = b.scales.iter().map(|&(_, v)| v).collect();
        let sps = sparsity_loss_graph(&mut tape, &gate_vars)?;
        let adp = adaptation_loss_graph(&mut tape, &scale_vars)?;
        let total = total_loss_graph(&mut tape, det, sps, adp, self.loss)?;
        let loss_value = tape.value(total).item() as f64;
        tape.backward(total)?;
        self.apply(&tape, &b, state);
        Ok(loss_value)
    }

    fn apply(&mut self, tape: &Tape, b: &ForwardBindings, state: &mut PatchTrainState) {
        let lr = self.opt.lr;
        let mut updates: Vec<(Group, f32, Vec<f32>)> = Vec::new();
        for &(i, v) in &b.mask_logits {
            updates.push((Group::Mask(i), lr * self.opt.mask_lr_mult, tape.grad(v).data().to_vec()));
        }
        for &(i, v) in &b.gate_logits {
            updates.push((Group::Gate(i), lr * self.opt.gate_lr_mult, tape.grad(v).data().to_vec()));
        }
        for &(i, v) in &b.scales {
            updates.push((Group::Scale(i), lr * self.opt.scale_lr_mult, tape.grad(v).data().to_vec()));
        }
        for &(i, v) in &b.bn_scales {
            updates.push((Group::BnScale(i), lr, tape.grad(v).data().to_vec()));
        }
        for &(i, v) in &b.bn_shifts {
            updates.push((Group::BnShift(i), lr, tape.grad(v).data().to_vec()));
        }
        for &(i, v) in &b.finetune {
            updates.push((Group::FineTune(i), lr, tape.grad(v).data().to_vec()));
        }
        for (group, lr, grad) in updates {
            let vel = self
                .velocity
                .entry(group)
                .or_insert_with(|| Tensor::zeros(vec![grad.len()]));
            for (v, g) in vel.data_mut().iter_mut().zip(&grad) {
                *v = self.opt.momentum * *v + g;
            }
            let step: Vec<f32> = vel.data().iter().map(|&v| lr * v).collect();
            match group {
                Group::Mask(i) => {
                    let t = &mut state.patch[i].as_mut().unwrap().mask_logits;
                    sub_assign(t.data_mut(), &step);
                }
                Group::Gate(i) => state.patch[i].as_mut().unwrap().gate_logit -= step[0],
                Group::Scale(i) => state.patch[i].as_mut().unwrap().scale -= step[0],
                Group::BnScale(i) => {
                    sub_assign(state.bn[i].as_mut().unwrap().scale.data_mut(), &step)
                }
                Group::BnShift(i) => {
                    sub_assign(state.bn[i].as_mut().unwrap().shift.data_mut(), &step)
                }
                Group::FineTune(i) => {
                    sub_assign(state.finetune[i].as_mut().unwrap().data_mut(), &step)
                }
            }
        }
    }
}

fn sub_assign(params: &mut [f32], step: &[f32]) {
    for (p, s) in params.iter_mut().zip(step) {
        *p -= s;
    }
}
