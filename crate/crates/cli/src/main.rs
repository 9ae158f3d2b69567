//! Command-line front end: verification suites, toy training runs, scaling
//! benchmarks, task generation, and storyboard tooling.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttt_lab::bench::{throughput_bench, slopes, BenchConfig};
use ttt_lab::graph::OpKind;
use ttt_lab::model::{Model, ModelConfig, Variant};
use ttt_lab::pipeline::{
    assemble_sequence, build_local_mask, parse_prompt, parse_storyboard, spans_csv,
    tokens_to_bytes, PlaceholderVideoSource, ProfileConfig, Prompt,
};
use ttt_lab::report::{Manifest, Report};
use ttt_lab::seeded_rng;
use ttt_lab::shard::shard_bench;
use ttt_lab::tasks::{Task, TaskKind, TaskSpec};
use ttt_lab::train::{single_stage, toy_groups, train_toy, StageSchedule, TrainSettings};
use ttt_lab::ttt::{TttConfig, TttParams, TttVariant};
use ttt_lab::verify::{all_pass, run_suite};

#[derive(Parser)]
#[command(name = "ttt-lab", version, about = "Sequence-layer laboratory: test-time-training layers and their linear-complexity baselines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Dims {
    /// Sequence length.
    #[arg(long = "T", default_value_t = 128)]
    t: usize,
    /// Model (token) width.
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Inner projection width.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Heads.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Inner-loop mini-batch size.
    #[arg(long, default_value_t = 64)]
    b: usize,
    /// Inner-loop learning rate (defaults per variant: 1.0 ttt-linear, 0.1 ttt-mlp).
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a verification suite: grad | scan | shard | mask | pipeline | all.
    Verify {
        suite: String,
        /// Test fixture: corrupt the named primitive's backward rule so the
        /// grad suite demonstrably fails (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a toy model on a synthetic task and emit loss/accuracy curves.
    Train {
        #[arg(long, default_value = "ttt-mlp")]
        variant: String,
        /// Task kind: copy | recall.
        #[arg(long, default_value = "recall")]
        task: String,
        #[command(flatten)]
        dims: Dims,
        /// Stored key-value pairs (recall) or prefix length (copy).
        #[arg(long, default_value_t = 24)]
        pairs: usize,
        /// Value alphabet size for recall.
        #[arg(long, default_value_t = 8)]
        values: usize,
        /// Optimization steps (single-stage run when no --config is given).
        #[arg(long, default_value_t = 400)]
        steps: usize,
        /// Stage-schedule TOML mirroring the multi-stage recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Wall-clock scaling benchmarks (throughput) or shard benchmarks.
    Bench {
        /// throughput | shard
        #[arg(long, default_value = "throughput")]
        mode: String,
        /// Variants to measure (default: all seven).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        /// Sequence lengths.
        #[arg(long = "T", value_delimiter = ',', default_values_t = vec![256, 512, 1024, 2048])]
        t_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        b: usize,
        /// Shard counts for --mode shard.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4])]
        shards: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// f64 (verification default) or f32 (throughput only).
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic task dataset to disk.
    Gen {
        /// copy | recall
        #[arg(long, default_value = "recall")]
        task: String,
        #[command(flatten)]
        dims: Dims,
        #[arg(long, default_value_t = 24)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        values: usize,
        /// Instances to emit.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse a storyboard (or free-text prompt) and report its structure.
    Parse { file: PathBuf },
    /// Assemble a storyboard into an interleaved token sequence dump.
    Assemble {
        file: PathBuf,
        /// toy | full-scale
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn profile_of(name: &str) -> anyhow::Result<ProfileConfig> {
    match name {
        "toy" => Ok(ProfileConfig::toy()),
        "full-scale" => Ok(ProfileConfig::full_scale()),
        other => anyhow::bail!("unknown profile '{other}' (expected toy|full-scale)"),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Verify { suite, corrupt_backward, out, seed } => {
            let corrupt = match corrupt_backward.as_deref() {
                None => None,
                Some(name) => Some(
                    OpKind::parse(name)
                        .ok_or_else(|| anyhow::anyhow!("unknown primitive '{name}'"))?,
                ),
            };
            let checks = run_suite(&suite, corrupt)?;
            for c in &checks {
                println!(
                    "{} {}/{}: observed {:.3e} (tol {:.1e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.suite,
                    c.name,
                    c.observed,
                    c.tolerance
                );
            }
            let manifest = Manifest::new(
                "verify",
                serde_json::json!({"suite": suite, "corrupt": corrupt_backward}),
                seed,
                "f64",
            );
            let mut report = Report::new(manifest);
            report.add_checks("verify", &checks);
            report.emit(&out)?;
            if all_pass(&checks) {
                println!("verify {suite}: all {} checks passed", checks.len());
                Ok(ExitCode::SUCCESS)
            } else {
                let failed: Vec<&str> =
                    checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                eprintln!("verify {suite}: FAILED checks: {}", failed.join(", "));
                Ok(ExitCode::from(1))
            }
        }

        Cmd::Train { variant, task, dims, pairs, values, steps, config, seed, out } => {
            let variant = Variant::parse(&variant)?;
            let mut mcfg = ModelConfig::new(variant, dims.d, dims.k);
            mcfg.heads = dims.heads;
            mcfg.b = dims.b;
            if let Some(eta) = dims.eta {
                mcfg.eta = eta;
            }
            let spec = match TaskKind::parse(&task)? {
                TaskKind::Copy => TaskSpec::copy(pairs, dims.d, seed),
                TaskKind::Recall => {
                    let seg = dims.t / 3;
                    let layout = vec![seg, seg, dims.t - 2 * seg];
                    TaskSpec::recall(dims.t, dims.d, pairs, values, pairs.min(8), layout, seed)
                }
            };
            let task_obj = Task::new(spec.clone())?;
            let schedule = match &config {
                Some(path) => StageSchedule::from_toml(&std::fs::read_to_string(path)?)?,
                None => single_stage(spec.t, steps, toy_groups(&mcfg, 3e-3, 1e-3)),
            };
            let mut rng = seeded_rng(seed);
            let mut model = Model::init(mcfg, &mut rng)?;
            let settings = TrainSettings::default();
            let report_data = train_toy(&mut model, &task_obj, &schedule, &settings, seed)?;
            println!(
                "trained {} on {}: final loss {:.5}, accuracy {:.3} (chance {:.3})",
                variant.name(),
                task,
                report_data.final_loss,
                report_data.final_accuracy,
                spec.chance_accuracy()
            );
            let manifest = Manifest::new(
                "train",
                serde_json::json!({
                    "variant": variant.name(), "task": task, "T": spec.t, "d": spec.d,
                    "k": dims.k, "b": dims.b, "eta": mcfg.eta, "pairs": pairs,
                    "values": values, "schedule": schedule.to_toml(),
                }),
                seed,
                "f64",
            );
            let mut report = Report::new(manifest);
            report.add_train_report("train_curve", &report_data);
            report.add_loss_plot(&report_data);
            let files = report.emit(&out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Bench { mode, variant, t_list, d, k, b, shards, repeats, precision, seed, out } => {
            let variants = if variant.is_empty() {
                Variant::all().to_vec()
            } else {
                variant.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?
            };
            let manifest = Manifest::new(
                "bench",
                serde_json::json!({
                    "mode": mode, "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
                    "T": t_list, "d": d, "k": k, "b": b, "shards": shards,
                    "repeats": repeats, "precision": precision,
                }),
                seed,
                &precision,
            );
            let mut report = Report::new(manifest);
            match mode.as_str() {
                "throughput" => {
                    let cfg = BenchConfig { variants, t_list, repeats, d, k, b, seed, ..BenchConfig::default() };
                    let rows = match precision.as_str() {
                        "f64" => throughput_bench::<f64>(&cfg)?,
                        "f32" => throughput_bench::<f32>(&cfg)?,
                        other => anyhow::bail!("unknown precision '{other}'"),
                    };
                    for (v, s) in slopes(&rows) {
                        println!("{v}: log-log slope {s:.3}");
                    }
                    report.add_timing_rows("timings", &rows);
                    report.add_scaling_plot(&rows);
                }
                "shard" => {
                    let mut cfg = TttConfig::new(d, k, TttVariant::Mlp);
                    cfg.b = b;
                    let mut rng = seeded_rng(seed);
                    let params: TttParams = TttParams::init(&cfg, &mut rng)?;
                    let rows = shard_bench(&cfg, &params, &shards, &t_list, repeats.max(5), seed)?;
                    for r in &rows {
                        println!(
                            "T={} shards={}: {:.3} ms (std {:.3})",
                            r.t, r.n_shards, r.mean_ms, r.std_ms
                        );
                    }
                    report.add_shard_rows("shard_timings", &rows);
                }
                other => anyhow::bail!("unknown bench mode '{other}'"),
            }
            let files = report.emit(&out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Gen { task, dims, pairs, values, count, seed, out } => {
            let spec = match TaskKind::parse(&task)? {
                TaskKind::Copy => TaskSpec::copy(pairs, dims.d, seed),
                TaskKind::Recall => {
                    let seg = dims.t / 3;
                    let layout = vec![seg, seg, dims.t - 2 * seg];
                    TaskSpec::recall(dims.t, dims.d, pairs, values, pairs.min(8), layout, seed)
                }
            };
            let task_obj = Task::new(spec.clone())?;
            std::fs::create_dir_all(&out)?;
            let manifest = Manifest::new(
                "gen",
                serde_json::json!({
                    "task": task, "T": spec.t, "d": spec.d, "pairs": pairs,
                    "values": values, "count": count,
                }),
                seed,
                "f64",
            );
            let hash = manifest.config_hash.clone();

            let mut answers_csv = String::from("instance,position,class\n");
            let mut x_bytes = Vec::new();
            let mut target_bytes = Vec::new();
            for i in 0..count as u64 {
                let inst = task_obj.instance(i);
                for &(pos, cls) in &inst.answers {
                    answers_csv.push_str(&format!("{i},{pos},{cls}\n"));
                }
                for &v in inst.x.data() {
                    x_bytes.extend_from_slice(&v.to_le_bytes());
                }
                for &v in inst.target.data() {
                    target_bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            std::fs::write(out.join(format!("answers_{hash}.csv")), answers_csv)?;
            std::fs::write(out.join(format!("inputs_{hash}.f64le")), x_bytes)?;
            std::fs::write(out.join(format!("targets_{hash}.f64le")), target_bytes)?;
            Report::new(manifest).emit(&out)?;
            println!("generated {count} instances of {task} into {}", out.display());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Parse { file } => {
            let text = std::fs::read_to_string(&file)?;
            match parse_prompt(&text)? {
                Prompt::Storyboard(sb) => {
                    println!("format 3 storyboard: {} scenes, {} segments", sb.scenes.len(), sb.total_segments());
                    for (i, scene) in sb.scenes.iter().enumerate() {
                        println!("  scene {}: {} paragraphs", i + 1, scene.paragraphs.len());
                    }
                }
                Prompt::FreeText { paragraphs, scene_hints } => {
                    println!(
                        "free text (format 1/2): {} paragraphs, {} scene hints (not assemblable)",
                        paragraphs.len(),
                        scene_hints.len()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Assemble { file, profile, out } => {
            let text = std::fs::read_to_string(&file)?;
            let sb = parse_storyboard(&text)?;
            let prof = profile_of(&profile)?;
            let video = PlaceholderVideoSource::new(prof, sb.total_segments());
            let seq = assemble_sequence(&sb, &prof, &video)?;
            let mask = build_local_mask(&seq)?;
            std::fs::create_dir_all(&out)?;
            let manifest = Manifest::new(
                "assemble",
                serde_json::json!({"file": file.display().to_string(), "profile": profile}),
                0,
                "f64",
            );
            let hash = manifest.config_hash.clone();
            std::fs::write(out.join(format!("spans_{hash}.csv")), spans_csv(&seq))?;
            std::fs::write(out.join(format!("tokens_{hash}.u32le")), tokens_to_bytes(&seq.tokens))?;
            Report::new(manifest).emit(&out)?;
            println!(
                "assembled {} segments, {} tokens ({} admissibility-symmetric mask rows)",
                seq.n_segments(),
                seq.len(),
                mask.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
