use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use spotpatch::data::{gen_task, SyntheticTaskSpec};
use spotpatch::decathlon;
use spotpatch::error::{Error, Result};
use spotpatch::format::{self, BitMode};
use spotpatch::patching::{PatchMode, SourceModel};
use spotpatch::train::{self, ExperimentConfig, RunReport};

#[derive(Parser)]
#[command(name = "spotpatch", about = "Patch-based transfer learning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON; defaults to the built-in desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// spotpatch | weight-transform | bn-only | piggyback | fine-tune
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda_sps: Option<f32>,
    #[arg(long)]
    lambda_adp: Option<f32>,
    /// 32 or 8
    #[arg(long)]
    bit_mode: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic detection dataset.
    GenData {
        /// Task spec JSON; defaults to a 3-class source task.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "dataset.json")]
        out: PathBuf,
    },
    /// Train the source model and write it as JSON.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a patch for one target task against a trained source model.
    TrainPatch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        task_index: usize,
    },
    /// Full benchmark: train source, patch every target task, score.
    RunDecathlon {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fine-tune baseline RunReport JSON (required unless mode is fine-tune).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Comma-separated lambda_sps values to sweep; each value reruns the
        /// benchmark and adds rows to sweep.csv.
        #[arg(long)]
        sweep_lambda_sps: Option<String>,
    },
    /// Footprint report for a serialized patch.
    Footprint {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 32)]
        bit_mode: u32,
    },
    /// Decathlon score from per-task mAPs.
    Score {
        /// Comma-separated per-task mAPs of the evaluated method.
        #[arg(long)]
        maps: String,
        /// Comma-separated fine-tune baseline mAPs.
        #[arg(long)]
        ft_maps: String,
        #[arg(long)]
        footprint: f64,
    },
    /// Layer table of a serialized patch as JSON.
    InspectPatch {
        #[arg(long)]
        patch: PathBuf,
    },
    /// Gate heatmap (portable graymap) from a RunReport.
    DumpGates {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "gates.pgm")]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}

fn parse_mode(s: &str) -> Result<PatchMode> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown mode '{}'", s)))
}

fn parse_bit_mode(v: u32) -> Result<BitMode> {
    match v {
        32 => Ok(BitMode::Base32),
        8 => Ok(BitMode::Base8),
        other => Err(Error::Config(format!("bit mode must be 32 or 8, got {}", other))),
    }
}

fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::desk_default(PatchMode::SpotPatch, 0),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(l) = args.lambda_sps {
        cfg.loss.lambda_sps = l;
    }
    if let Some(l) = args.lambda_adp {
        cfg.loss.lambda_adp = l;
    }
    if let Some(b) = args.bit_mode {
        cfg.bit_mode = parse_bit_mode(b)?;
    }
    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)?;
    Ok((cfg, out_dir))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("bad number '{}'", v)))
        })
        .collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            spec,
            seed,
            delta,
            out,
        } => {
            let mut task: SyntheticTaskSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SyntheticTaskSpec {
                    seed: 0,
                    image_size: 32,
                    channels: 3,
                    num_classes: 3,
                    delta: 0.0,
                    objects_min: 1,
                    objects_max: 2,
                    train_count: 96,
                    eval_count: 48,
                },
            };
            if let Some(s) = seed {
                task.seed = s;
            }
            if let Some(d) = delta {
                task.delta = d;
            }
            let dataset = gen_task(&task)?;
            write_json(&out, &dataset)?;
            println!(
                "wrote {} ({} train / {} eval samples)",
                out.display(),
                dataset.train.len(),
                dataset.eval.len()
            );
        }
        Command::TrainSource { cfg } => {
            let (cfg, out_dir) = load_config(&cfg)?;
            let model = train::train_source(&cfg)?;
            let path = out_dir.join("source_model.json");
            write_json(&path, &model)?;
            println!("wrote {}", path.display());
        }
        Command::TrainPatch {
            cfg,
            model,
            task_index,
        } => {
            let (cfg, out_dir) = load_config(&cfg)?;
            let model: SourceModel = serde_json::from_str(&fs::read_to_string(model)?)?;
            let task = cfg.target_tasks.get(task_index).ok_or_else(|| {
                Error::Config(format!("task index {} out of range", task_index))
            })?;
            let dataset = gen_task(task)?;
            let (_, patch, report) = train::train_patch(&model, &dataset, &cfg, task_index)?;
            if let Some(p) = patch {
                let path = out_dir.join(format!("task_{}.sptp", task_index));
                fs::write(&path, format::serialize(&p))?;
                println!("wrote {}", path.display());
            }
            let path = out_dir.join(format!("task_{}_report.json", task_index));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
            println!(
                "task {}: mAP@0.5 {:.4}, footprint {:.4}, patched {:.1}%",
                task_index,
                report.map50,
                report.footprint.ratio,
                100.0 * report.patched_fraction
            );
        }
        Command::RunDecathlon {
            cfg,
            baseline,
            sweep_lambda_sps,
        } => {
            let (base_cfg, out_dir) = load_config(&cfg)?;
            let baseline_maps: Option<Vec<f64>> = match baseline {
                Some(p) => {
                    let report: RunReport = serde_json::from_str(&fs::read_to_string(p)?)?;
                    Some(report.per_task.iter().map(|t| t.map50).collect())
                }
                None => None,
            };
            let lambdas: Vec<f32> = match sweep_lambda_sps {
                Some(s) => parse_f64_list(&s)?.into_iter().map(|v| v as f32).collect(),
                None => vec![base_cfg.loss.lambda_sps],
            };
            let mut csv = String::from("lambda_sps,task,patched_fraction,footprint,map50\n");
            for (li, &lambda) in lambdas.iter().enumerate() {
                let mut cfg = base_cfg.clone();
                cfg.loss.lambda_sps = lambda;
                let (report, patches) = train::run_decathlon(&cfg, baseline_maps.as_deref())?;
                let tag = if lambdas.len() == 1 {
                    String::new()
                } else {
                    format!("_l{}", li)
                };
                for (ti, patch) in patches.iter().enumerate() {
                    if let Some(p) = patch {
                        fs::write(
                            out_dir.join(format!("task_{}{}.sptp", ti, tag)),
                            format::serialize(p),
                        )?;
                    }
                }
                for t in &report.per_task {
                    csv.push_str(&format!(
                        "{:e},{},{},{},{}\n",
                        lambda, t.task_seed, t.patched_fraction, t.footprint.ratio, t.map50
                    ));
                }
                fs::write(out_dir.join(format!("gates{}.pgm", tag)), train::dump_gates(&report.per_task)?)?;
                write_json(&out_dir.join(format!("report{}.json", tag)), &report)?;
                if let Some(d) = &report.decathlon {
                    println!(
                        "lambda_sps {:e}: score {:.1}, footprint {:.3}, score/footprint {:.1}",
                        lambda, d.score, d.footprint, d.score_per_footprint
                    );
                }
            }
            fs::write(out_dir.join("sweep.csv"), csv)?;
            println!("wrote {}", out_dir.join("sweep.csv").display());
        }
        Command::Footprint {
            patch,
            model,
            bit_mode,
        } => {
            let patch = format::deserialize(&fs::read(patch)?)?;
            let model: SourceModel = serde_json::from_str(&fs::read_to_string(model)?)?;
            let report = format::footprint(&patch, &model, parse_bit_mode(bit_mode)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Score {
            maps,
            ft_maps,
            footprint,
        } => {
            let s = parse_f64_list(&maps)?;
            let ft = parse_f64_list(&ft_maps)?;
            let result = decathlon::evaluate(&s, &ft, footprint)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::InspectPatch { patch } => {
            let patch = format::deserialize(&fs::read(patch)?)?;
            println!("{}", serde_json::to_string_pretty(&format::inspect(&patch))?);
        }
        Command::DumpGates { report, out } => {
            let report: RunReport = serde_json::from_str(&fs::read_to_string(report)?)?;
            fs::write(&out, train::dump_gates(&report.per_task)?)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
