//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single PASS/FAIL line (visible with `--nocapture`).

mod common;

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::time::Instant;

use common::{rand_tensor, rng};
use rand::Rng;
use spotpatch::autodiff::{sigmoid, Tape};
use spotpatch::data::gen_task;
use spotpatch::decathlon;
use spotpatch::eval::{average_precision, iou, Box as EvalBox};
use spotpatch::format::{
    bitsize_gamma, deploy, deserialize, footprint, footprint_finetune, pack_mask,
    patch_components, serialize, BitMode, DeployedPatch, GatedPayload, LayerEntry,
};
use spotpatch::patching::{forward_patched, BnParams, PatchMode, PatchTrainState};
use spotpatch::train::{run_decathlon, train_patch, train_source, ExperimentConfig, ModelSpec};
use spotpatch::Tensor;

fn criterion<F: FnOnce() + UnwindSafe>(name: &str, f: F) {
    match catch_unwind(f) {
        Ok(()) => println!("PASS: {}", name),
        Err(e) => {
            println!("FAIL: {}", name);
            resume_unwind(e);
        }
    }
}

#[test]
fn criterion_01_identity_patch_is_bit_exact() {
    criterion("identity patch bit-exact on 100 random inputs", || {
        let start = Instant::now();
        let mut r = rng(20);
        let model = ModelSpec::default_train().build(&mut r);
        // patched path: gates forced closed, batch-norm copied from source
        let mut patched = PatchTrainState::init(&model, PatchMode::SpotPatch, &mut r);
        patched.set_gate_logits(-1.0);
        patched.copy_bn_from_source(&model);
        // reference path: the unmodified source weights
        let mut source = PatchTrainState::init(&model, PatchMode::BnOnly, &mut r);
        source.copy_bn_from_source(&model);

        let batch = rand_tensor(&mut r, vec![100, 3, 32, 32]);
        let mut tape = Tape::new();
        let a = forward_patched(&mut tape, &model, &mut patched, PatchMode::SpotPatch, &batch, false)
            .unwrap();
        let va = tape.value(a.output).clone();
        let mut tape = Tape::new();
        let b = forward_patched(&mut tape, &model, &mut source, PatchMode::BnOnly, &batch, false)
            .unwrap();
        let vb = tape.value(b.output);
        assert_eq!(va.shape(), vb.shape());
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "outputs diverge bitwise");
        }
        assert!(start.elapsed().as_secs_f64() < 1.0, "must finish under 1 s");
    });
}

#[test]
fn criterion_02_ste_forward_and_backward() {
    criterion("straight-through estimator forward/backward factors", || {
        for (r, expected_fwd) in [(-0.7f32, 0.0f32), (0.0, 1.0), (0.4, 1.0), (-0.0, 1.0)] {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::scalar(r), true);
            let b = tape.binarize_ste(v);
            assert_eq!(tape.value(b).item(), expected_fwd);
        }
        for r in [-4.0f32, -1.0, 0.0, 1.0, 4.0] {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::scalar(r), true);
            let b = tape.binarize_ste(v);
            let s = tape.reduce_sum(b);
            tape.backward(s).unwrap();
            let got = tape.grad(v).item() as f64;
            // the gradient tensor is f32, so the 1e-12 bound applies against
            // the same-precision analytic product
            let s = sigmoid(r);
            let want = (s * (1.0 - s)) as f64;
            assert!(
                (got - want).abs() < 1e-12,
                "backward factor at r = {}: {} vs {}",
                r,
                got,
                want
            );
            // and against the f64 analytic value within f32 round-off
            let s64 = 1.0 / (1.0 + (-r as f64).exp());
            assert!((got - s64 * (1.0 - s64)).abs() < 1e-7);
            if r == 0.0 {
                assert!((got - 0.25).abs() < 1e-12);
            }
        }
    });
}

#[test]
fn criterion_03_autodiff_matches_finite_differences() {
    criterion("autodiff vs central finite differences", || {
        let start = Instant::now();
        for seed in 0..20u64 {
            let mut r = rng(1000 + seed);
            let a = rand_tensor(&mut r, vec![3, 5]);
            let b = rand_tensor(&mut r, vec![5, 2]);
            common::check_gradients(
                &[a, b],
                |tape, v| {
                    let c = tape.matmul(v[0], v[1]).unwrap();
                    tape.reduce_sum(c)
                },
                1e-3,
                1e-3,
                "matmul",
            );

            let x = rand_tensor(&mut r, vec![2, 2, 5, 5]);
            let w = rand_tensor(&mut r, vec![3, 2, 3, 3]);
            let mixer = rand_tensor(&mut r, vec![2, 3, 3, 3]);
            common::check_gradients(
                &[x, w],
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], 2, 1).unwrap();
                    let m = tape.constant(mixer.clone());
                    let p = tape.mul(y, m).unwrap();
                    tape.reduce_sum(p)
                },
                1e-3,
                1e-3,
                "conv2d",
            );

            let x = rand_tensor(&mut r, vec![4, 3, 2, 2]);
            let scale = rand_tensor(&mut r, vec![3]);
            let shift = rand_tensor(&mut r, vec![3]);
            let mixer = rand_tensor(&mut r, vec![4, 3, 2, 2]);
            common::check_gradients(
                &[x, scale, shift],
                |tape, v| {
                    let rm = Tensor::zeros(vec![3]);
                    let rv = Tensor::full(vec![3], 1.0);
                    let (y, _, _) = tape.batchnorm(v[0], v[1], v[2], &rm, &rv, true).unwrap();
                    let m = tape.constant(mixer.clone());
                    let p = tape.mul(y, m).unwrap();
                    tape.reduce_sum(p)
                },
                1e-3,
                1e-3,
                "batchnorm",
            );

            let logits = rand_tensor(&mut r, vec![4, 3]);
            let labels = vec![0, 2, 1, 1];
            common::check_gradients(
                &[logits],
                |tape, v| tape.softmax_cross_entropy(v[0], &labels).unwrap(),
                1e-3,
                1e-3,
                "cross-entropy",
            );
        }
        assert!(start.elapsed().as_secs_f64() < 30.0, "must finish under 30 s");
    });
}

#[test]
fn criterion_04_decathlon_normalization() {
    criterion("benchmark normalization (2500 self-score, 10000 max, 0 floor)", || {
        let mut r = rng(40);
        for _ in 0..50 {
            let n = r.gen_range(2..12);
            let maps: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
            let b = decathlon::baseline_from_finetune(&maps).unwrap();
            let s = decathlon::score(&maps, &b).unwrap();
            assert!(
                (s - 2500.0).abs() < 1e-9,
                "baseline against itself scored {}",
                s
            );
        }
        let ft: Vec<f64> = (0..7).map(|i| 0.55 + 0.05 * i as f64).collect();
        let b = decathlon::baseline_from_finetune(&ft).unwrap();
        assert_eq!(decathlon::score(&vec![1.0; 7], &b).unwrap(), 10000.0);
        assert_eq!(decathlon::score(&vec![0.0; 7], &b).unwrap(), 0.0);
    });
}

#[test]
fn criterion_05_footprint_arithmetic() {
    criterion("footprint accounting identities", || {
        // fine-tuning 9 tasks ships 9 full copies: total footprint 9.00 exactly
        let mut r = rng(50);
        let model = ModelSpec::default_train().build(&mut r);
        let total: f64 = (0..9)
            .map(|_| footprint_finetune(&model, BitMode::Base32).ratio)
            .sum();
        assert_eq!(total, 9.0);

        // an all-gates-open 1-bit patch of the default toy model costs about
        // 1/32 of the model
        let toy = ModelSpec::default_toy().build(&mut r);
        let state = PatchTrainState::init(&toy, PatchMode::WeightTransform, &mut r);
        let patch = deploy(&toy, &state, PatchMode::WeightTransform).unwrap();
        let ratio = footprint(&patch, &toy, BitMode::Base32).unwrap().ratio;
        assert!(
            (1.0 / 32.0..=1.0 / 32.0 + 0.02).contains(&ratio),
            "all-open 32-bit ratio {} outside [1/32, 1/32 + 0.02]",
            ratio
        );

        // 8-bit ratio = 4 * mask ratio + float ratio, exactly, for random patches
        for seed in 0..100u64 {
            let mut r = rng(5000 + seed);
            let layers = (0..r.gen_range(1..5))
                .map(|i| LayerEntry {
                    layer_id: i as u16,
                    gated: Some(GatedPayload {
                        omega: r.gen_range(-1.0..1.0),
                        mask: (0..r.gen_range(1..200)).map(|_| r.gen_bool(0.5)).collect(),
                    }),
                    bn: if r.gen_bool(0.5) {
                        Some(BnParams::identity(r.gen_range(1..8)))
                    } else {
                        None
                    },
                })
                .collect();
            let patch = DeployedPatch { layers };
            let theta_params = r.gen_range(1000u64..100000);
            let (m_bits, f_params) = patch_components(&patch);
            // exact integer cross-multiplication:
            //   gamma8 / theta8 == 4 * m/theta32 + 32 f / theta32
            let gamma8 = bitsize_gamma(&patch, BitMode::Base8) as u128;
            let theta8 = (theta_params * 8) as u128;
            let theta32 = (theta_params * 32) as u128;
            let lhs = gamma8 * theta32;
            let rhs = (4 * m_bits as u128 + 32 * f_params as u128) * theta8;
            assert_eq!(lhs, rhs, "base-8 decomposition must hold exactly");
        }

        // the worked decomposition: mask ratio 0.16 and float ratio 0.19 under
        // 32-bit accounting (total 0.35) become 4*0.16 + 0.19 = 0.83 at 8 bits.
        // Concretely: 100-float model, 512 mask bits, 19 patch floats.
        let patch = DeployedPatch {
            layers: vec![
                LayerEntry {
                    layer_id: 0,
                    gated: Some(GatedPayload { omega: 0.5, mask: vec![true; 200] }),
                    bn: None,
                },
                LayerEntry {
                    layer_id: 1,
                    gated: Some(GatedPayload { omega: 0.5, mask: vec![false; 200] }),
                    bn: None,
                },
                LayerEntry {
                    layer_id: 2,
                    gated: Some(GatedPayload { omega: 0.5, mask: vec![true; 112] }),
                    bn: Some(BnParams::identity(4)),
                },
            ],
        };
        let theta32 = 100.0 * 32.0;
        let theta8 = 100.0 * 8.0;
        let (m_bits, f_params) = patch_components(&patch);
        assert_eq!((m_bits, f_params), (512, 19));
        let mask_ratio = m_bits as f64 / theta32;
        let float_ratio = f_params as f64 * 32.0 / theta32;
        assert!((mask_ratio - 0.16).abs() < 1e-12);
        assert!((float_ratio - 0.19).abs() < 1e-12);
        assert!((mask_ratio + float_ratio - 0.35).abs() < 1e-12);
        let base8 = bitsize_gamma(&patch, BitMode::Base8) as f64 / theta8;
        assert!((base8 - 0.83).abs() < 1e-12);
        assert!((base8 - (4.0 * mask_ratio + float_ratio)).abs() < 1e-12);
    });
}

#[test]
fn criterion_06_codec_round_trips() {
    criterion("patch container codec round trips", || {
        let mut r = rng(60);
        for _ in 0..200 {
            let layers = (0..r.gen_range(0..6))
                .map(|i| LayerEntry {
                    layer_id: i as u16 * 3,
                    gated: if r.gen_bool(0.8) {
                        Some(GatedPayload {
                            omega: r.gen_range(-2.0..2.0),
                            // deliberately includes non-byte-aligned sizes
                            mask: (0..r.gen_range(0..67)).map(|_| r.gen_bool(0.5)).collect(),
                        })
                    } else {
                        None
                    },
                    bn: if r.gen_bool(0.4) {
                        let c = r.gen_range(1..6);
                        let mut bn = BnParams::identity(c);
                        for v in bn.running_mean.data_mut() {
                            *v = r.gen_range(-1.0..1.0);
                        }
                        Some(bn)
                    } else {
                        None
                    },
                })
                .collect();
            let patch = DeployedPatch { layers };
            let bytes = serialize(&patch);
            let decoded = deserialize(&bytes).unwrap();
            assert_eq!(decoded, patch, "value round trip");
            assert_eq!(serialize(&decoded), bytes, "byte round trip");
        }
        // the documented worked example: mask [0,1,1,0] packs to 0b00000110
        assert_eq!(pack_mask(&[false, true, true, false]), vec![0b0000_0110]);
    });
}

#[test]
fn criterion_07_average_precision_matches_brute_force() {
    criterion("average precision vs brute-force PR oracle", || {
        // worked IoU example: (0,0,2,2) vs (1,0,3,2) -> 2/6 = 1/3
        let a = EvalBox { xmin: 0.0, ymin: 0.0, xmax: 2.0, ymax: 2.0, class: 0, score: 0.0 };
        let b = EvalBox { xmin: 1.0, ymin: 0.0, xmax: 3.0, ymax: 2.0, class: 0, score: 0.0 };
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-9);

        let mut r = rng(70);
        for case in 0..100 {
            let gen_box = |r: &mut rand_chacha::ChaCha8Rng| {
                let xmin = r.gen_range(0.0..8.0);
                let ymin = r.gen_range(0.0..8.0);
                EvalBox {
                    xmin,
                    ymin,
                    xmax: xmin + r.gen_range(0.5..4.0),
                    ymax: ymin + r.gen_range(0.5..4.0),
                    class: 0,
                    score: (r.gen_range(0..5) as f64) / 4.0, // deliberate ties
                }
            };
            let preds: Vec<EvalBox> = (0..r.gen_range(0..=6)).map(|_| gen_box(&mut r)).collect();
            let gts: Vec<EvalBox> = (1..=r.gen_range(1..=6)).map(|_| gen_box(&mut r)).collect();
            let fast = average_precision(&preds, &gts, 0.5).unwrap();
            let slow = brute_force_ap(&preds, &gts, 0.5);
            assert!(
                (fast - slow).abs() < 1e-9,
                "case {}: {} vs brute force {}",
                case,
                fast,
                slow
            );
        }
    });
}

/// Independent AP oracle: for every prefix of the ranked prediction list,
/// recompute the greedy matching from scratch, then integrate the
/// interpolated precision envelope over recall.
fn brute_force_ap(preds: &[EvalBox], gts: &[EvalBox], thresh: f64) -> f64 {
    fn raw_iou(a: &EvalBox, b: &EvalBox) -> f64 {
        let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
        let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
        let inter = ix * iy;
        let area = |v: &EvalBox| (v.xmax - v.xmin) * (v.ymax - v.ymin);
        inter / (area(a) + area(b) - inter)
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&x, &y| preds[y].score.partial_cmp(&preds[x].score).unwrap().then(x.cmp(&y)));
    let mut points: Vec<(f64, f64)> = Vec::new();
    for k in 1..=order.len() {
        let mut matched = vec![false; gts.len()];
        let mut tp = 0usize;
        for &pi in &order[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if matched[gi] {
                    continue;
                }
                let v = raw_iou(&preds[pi], gt);
                if v >= thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p_env = points
            .iter()
            .filter(|(pr, _)| *pr >= r)
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        ap += (r - prev) * p_env;
        prev = r;
    }
    ap
}

/// Shared setup for the training-based criteria: a three-task benchmark with
/// one target identical to the source distribution, one moderately shifted,
/// and one maximally shifted.
fn spread_config(seed: u64, lambda_sps: f32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default(PatchMode::SpotPatch, seed);
    cfg.loss.lambda_sps = lambda_sps;
    cfg.target_tasks[0].seed = cfg.source_task.seed;
    cfg.target_tasks[0].delta = 0.0;
    // target_tasks[1] stays at delta 0.35, target_tasks[2] at delta 1.0
    cfg.target_tasks.remove(1);
    cfg
}

#[test]
fn criterion_08_sparsity_pressure_prunes_more_layers() {
    criterion("mean patched fraction strictly decreasing in lambda_sps", || {
        let start = Instant::now();
        let mut means = Vec::new();
        for lambda in [1e-5f32, 1e-4, 1e-3] {
            let mut fractions = Vec::new();
            for seed in 0..3u64 {
                let cfg = spread_config(seed, lambda);
                let model = train_source(&cfg).unwrap();
                for (i, task) in cfg.target_tasks.iter().enumerate() {
                    let ds = gen_task(task).unwrap();
                    let (_, _, report) = train_patch(&model, &ds, &cfg, i).unwrap();
                    fractions.push(report.patched_fraction);
                }
            }
            means.push(fractions.iter().sum::<f64>() / fractions.len() as f64);
        }
        assert!(
            means[0] > means[1] && means[1] > means[2],
            "patched fractions not strictly decreasing: {:?}",
            means
        );
        assert!(
            start.elapsed().as_secs_f64() < 600.0,
            "must finish under 10 min"
        );
    });
}

#[test]
fn criterion_09_gates_track_task_similarity() {
    criterion("delta 0 patches <=10% of layers, delta 1 patches >=30%", || {
        let mut hits = 0;
        for seed in 0..3u64 {
            let mut cfg = spread_config(seed, 1e-4);
            cfg.target_tasks[1].seed = 777;
            let model = train_source(&cfg).unwrap();
            let near = gen_task(&cfg.target_tasks[0]).unwrap();
            let far = gen_task(&cfg.target_tasks[1]).unwrap();
            let (_, _, near_report) = train_patch(&model, &near, &cfg, 0).unwrap();
            let (_, _, far_report) = train_patch(&model, &far, &cfg, 1).unwrap();
            if near_report.patched_fraction <= 0.10 && far_report.patched_fraction >= 0.30 {
                hits += 1;
            }
        }
        assert!(hits >= 2, "similarity behavior held in only {}/3 seeds", hits);
    });
}

#[test]
fn criterion_10_mode_ordering() {
    criterion("fine-tune accuracy and gated-patch footprint both win", || {
        let mut hits = 0;
        for seed in 0..3u64 {
            let mut cfg = ExperimentConfig::desk_default(PatchMode::SpotPatch, seed);
            cfg.loss.lambda_sps = 1e-3;
            let model = train_source(&cfg).unwrap();
            let ds = gen_task(&cfg.target_tasks[0]).unwrap();
            let (_, _, sp) = train_patch(&model, &ds, &cfg, 0).unwrap();
            let mut ft_cfg = cfg.clone();
            ft_cfg.mode = PatchMode::FineTune;
            let (_, _, ft) = train_patch(&model, &ds, &ft_cfg, 0).unwrap();
            let mut wt_cfg = cfg.clone();
            wt_cfg.mode = PatchMode::WeightTransform;
            let (_, _, wt) = train_patch(&model, &ds, &wt_cfg, 0).unwrap();
            if ft.map50 >= sp.map50 && sp.footprint.ratio < wt.footprint.ratio {
                hits += 1;
            }
        }
        assert!(hits >= 2, "mode ordering held in only {}/3 seeds", hits);
    });
}

#[test]
fn criterion_11_runs_are_deterministic() {
    criterion("identical configs give identical reports and patch bytes", || {
        let mut cfg = ExperimentConfig::desk_default(PatchMode::SpotPatch, 7);
        cfg.source_steps = 40;
        cfg.optimizer.steps = 30;
        for t in cfg.target_tasks.iter_mut().chain([&mut cfg.source_task]) {
            t.train_count = 24;
            t.eval_count = 12;
        }
        let baseline = vec![0.5; cfg.target_tasks.len()];
        let (r1, p1) = run_decathlon(&cfg, Some(&baseline)).unwrap();
        let (r2, p2) = run_decathlon(&cfg, Some(&baseline)).unwrap();
        let strip = |r: &spotpatch::train::RunReport| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock_secs");
            serde_json::to_string(&v).unwrap()
        };
        assert_eq!(strip(&r1), strip(&r2), "report JSON must match");
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            match (a, b) {
                (Some(a), Some(b)) => assert_eq!(serialize(a), serialize(b), ".sptp bytes must match"),
                (None, None) => {}
                _ => panic!("patch presence differs between runs"),
            }
        }
        // sanity: the source data differs from the first target task
        assert_ne!(
            gen_task(&cfg.source_task).unwrap(),
            gen_task(&cfg.target_tasks[0]).unwrap()
        );
    });
}
