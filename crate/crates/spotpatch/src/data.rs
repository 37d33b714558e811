//! Synthetic shape-detection tasks.
//!
//! Images contain colored shapes (square, circle, triangle) on a flat noisy
//! background. A similarity knob `delta` interpolates the generator
//! parameters (palette, geometry, background) away from the source task:
//! delta = 0 reproduces the source distribution exactly, delta = 1 is the
//! most dissimilar target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CellTargets;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 3] = ["square", "circle", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Similarity-to-source knob in [0, 1].
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_objects_min")]
    pub objects_min: usize,
    #[serde(default = "default_objects_max")]
    pub objects_max: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

fn default_image_size() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    3
}
fn default_objects_min() -> usize {
    1
}
fn default_objects_max() -> usize {
    2
}

/// Concrete distribution parameters after applying `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub palette: Vec<[f32; 3]>,
    pub background: f32,
    pub size_min: f32,
    pub size_max: f32,
    pub noise_std: f32,
}

const SOURCE_PALETTE: [[f32; 3]; 3] = [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.9]];
const ALT_PALETTE: [[f32; 3]; 3] = [[0.1, 0.8, 0.9], [0.9, 0.1, 0.7], [0.85, 0.9, 0.1]];

impl SyntheticTaskSpec {
    pub fn generator_params(&self) -> Result<GeneratorParams> {
        if self.num_classes == 0 {
            return Err(Error::Argument("task has zero classes".into()));
        }
        if self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::Argument(format!(
                "at most {} classes supported, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Argument(format!("delta {} outside [0, 1]", self.delta)));
        }
        let d = self.delta as f32;
        let lerp = |a: f32, b: f32| a + d * (b - a);
        let palette = (0..self.num_classes)
            .map(|c| {
                let (s, a) = (SOURCE_PALETTE[c], ALT_PALETTE[c]);
                [lerp(s[0], a[0]), lerp(s[1], a[1]), lerp(s[2], a[2])]
            })
            .collect();
        Ok(GeneratorParams {
            palette,
            background: lerp(0.05, 0.55),
            size_min: lerp(10.0, 6.0),
            size_max: lerp(16.0, 10.0),
            noise_std: lerp(0.02, 0.05),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    let params = spec.generator_params()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.train_count)
        .map(|_| gen_sample(spec, &params, &mut rng))
        .collect();
    let eval = (0..spec.eval_count)
        .map(|_| gen_sample(spec, &params, &mut rng))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        eval,
    })
}

fn gen_sample(spec: &SyntheticTaskSpec, p: &GeneratorParams, rng: &mut ChaCha8Rng) -> Sample {
    let (c, n) = (spec.channels, spec.image_size);
    let mut image = Tensor::full(vec![c, n, n], p.background);
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..spec.num_classes);
        let size = rng.gen_range(p.size_min..=p.size_max);
        let half = size / 2.0;
        let cx = rng.gen_range(half..(n as f32 - half));
        let cy = rng.gen_range(half..(n as f32 - half));
        draw_shape(&mut image, class, cx, cy, size, &p.palette[class]);
        boxes.push(Annotation {
            class,
            xmin: cx - half,
            ymin: cy - half,
            xmax: cx + half,
            ymax: cy + half,
        });
    }
    // Pixel noise, drawn after shapes so it perturbs everything uniformly.
    for v in image.data_mut() {
        *v += rng.gen_range(-1.0f32..1.0) * p.noise_std;
    }
    Sample { image, boxes }
}

fn draw_shape(image: &mut Tensor, class: usize, cx: f32, cy: f32, size: f32, color: &[f32; 3]) {
    let n = image.shape()[2];
    let channels = image.shape()[0];
    let half = size / 2.0;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let inside = match class {
                0 => dx.abs() <= half && dy.abs() <= half,
                1 => dx * dx + dy * dy <= half * half,
                // Upward triangle inscribed in the bounding square.
                _ => {
                    dy >= -half
                        && dy <= half
                        && dx.abs() <= (dy + half) / (2.0 * half) * half
                }
            };
            if inside {
                for ch in 0..channels {
                    let sh = image.shape().to_vec();
                    let idx = (ch * sh[1] + y) * sh[2] + x;
                    image.data_mut()[idx] = color[ch.min(2)];
                }
            }
        }
    }
}

/// Grid-cell target assignment for a one-scale detection head.
///
/// Each ground-truth box is assigned to the cell containing its center; the
/// cell's class is the box class + 1 (0 is background) and its deltas encode
/// the box relative to the cell anchor. When two boxes land in the same cell
/// the larger one wins.
pub fn cell_targets(samples: &[&Sample], image_size: usize, grid: usize) -> CellTargets {
    let cell_size = image_size as f32 / grid as f32;
    let cells_per_image = grid * grid;
    let mut classes = vec![0usize; samples.len() * cells_per_image];
    let mut deltas: Vec<Option<[f32; 4]>> = vec![None; samples.len() * cells_per_image];
    let mut areas = vec![0.0f32; samples.len() * cells_per_image];
    for (si, sample) in samples.iter().enumerate() {
        for b in &sample.boxes {
            let (cx, cy) = ((b.xmin + b.xmax) / 2.0, (b.ymin + b.ymax) / 2.0);
            let (w, h) = (b.xmax - b.xmin, b.ymax - b.ymin);
            let gx = ((cx / cell_size) as usize).min(grid - 1);
            let gy = ((cy / cell_size) as usize).min(grid - 1);
            let idx = si * cells_per_image + gy * grid + gx;
            let area = w * h;
            if deltas[idx].is_some() && areas[idx] >= area {
                continue;
            }
            let (ax, ay) = ((gx as f32 + 0.5) * cell_size, (gy as f32 + 0.5) * cell_size);
            classes[idx] = b.class + 1;
            deltas[idx] = Some([
                (cx - ax) / cell_size,
                (cy - ay) / cell_size,
                (w / cell_size).ln(),
                (h / cell_size).ln(),
            ]);
            areas[idx] = area;
        }
    }
    CellTargets { classes, deltas }
}

/// Decodes head outputs for one image batch into scored boxes.
///
/// `class_rows` is [cells, classes + 1] (column 0 = background), `delta_rows`
/// is [cells, 4], both in the (image, gy, gx) row order that `cell_targets`
/// uses. Applies per-class greedy NMS at IoU 0.5.
pub fn decode_predictions(
    class_rows: &Tensor,
    delta_rows: &Tensor,
    num_images: usize,
    image_size: usize,
    grid: usize,
    min_score: f64,
) -> Vec<Vec<crate::eval::Box>> {
    let cells_per_image = grid * grid;
    let k = class_rows.shape()[1];
    let cell_size = image_size as f32 / grid as f32;
    let mut out = vec![Vec::new(); num_images];
    for si in 0..num_images {
        let mut candidates = Vec::new();
        for cell in 0..cells_per_image {
            let row = si * cells_per_image + cell;
            let logits = &class_rows.data()[row * k..(row + 1) * k];
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let (best_c, best_e) = exps[1..]
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &e)| {
                    if e > acc.1 {
                        (i, e)
                    } else {
                        acc
                    }
                });
            let score = best_e / denom;
            if score < min_score {
                continue;
            }
            let (gy, gx) = (cell / grid, cell % grid);
            let d = &delta_rows.data()[row * 4..(row + 1) * 4];
            let (ax, ay) = ((gx as f32 + 0.5) * cell_size, (gy as f32 + 0.5) * cell_size);
            let cx = ax + d[0] * cell_size;
            let cy = ay + d[1] * cell_size;
            let w = d[2].clamp(-4.0, 4.0).exp() * cell_size;
            let h = d[3].clamp(-4.0, 4.0).exp() * cell_size;
            candidates.push(crate::eval::Box {
                xmin: (cx - w / 2.0) as f64,
                ymin: (cy - h / 2.0) as f64,
                xmax: (cx + w / 2.0) as f64,
                ymax: (cy + h / 2.0) as f64,
                class: best_c,
                score,
            });
        }
        out[si] = nms(candidates, 0.5);
    }
    out
}

fn nms(mut boxes: Vec<crate::eval::Box>, thresh: f64) -> Vec<crate::eval::Box> {
    boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut keep: Vec<crate::eval::Box> = Vec::new();
    'outer: for b in boxes {
        for k in &keep {
            if k.class == b.class && crate::eval::iou(k, &b).unwrap_or(0.0) > thresh {
                continue 'outer;
            }
        }
        keep.push(b);
    }
    keep
}
