//! `dsms` command-line harness: train runs, evaluate checkpoints, analyze
//! communication dumps, exercise the codec property suite and inspect
//! wire frames.

mod codec_check;
mod frame_dump;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dsms_core::analysis;
use dsms_core::config::{ConfigMap, RunConfig};
use dsms_core::runner;

#[derive(Parser)]
#[command(
    name = "dsms",
    about = "Bandwidth-aware multi-agent communication simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct RunFlags {
    /// Plain-text config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario: predator_prey | coop_nav
    #[arg(long)]
    scenario: Option<String>,
    /// Mode: dsms | no_comm | full_comm | fixed_equal
    #[arg(long)]
    mode: Option<String>,
    /// Total bandwidth in units (one unit = one real scalar).
    #[arg(long)]
    bandwidth: Option<usize>,
    /// Training episodes per seed.
    #[arg(long)]
    episodes: Option<u64>,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra override in section.key=value form; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run (all seeds), resumable from its checkpoints.
    Train(RunFlags),
    /// Evaluate a trained seed directory and write fresh dumps.
    Eval {
        /// A seed directory produced by `train` (contains config.txt and
        /// checkpoint.ntar).
        #[arg(long)]
        run_dir: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 200)]
        episodes: u32,
        /// Where to write the per-step dumps (default: <run_dir>/eval.jsonl).
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Aggregate analysis dumps into per-step and per-block tables.
    Analyze {
        /// One or more .jsonl dump files.
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        /// Step blocks like "1-4,5-15"; defaults to the seven
        /// Predator-Prey blocks when the dumps carry prey distances.
        #[arg(long)]
        blocks: Option<String>,
        /// Output directory for the CSV tables.
        #[arg(long, default_value = "analysis_out")]
        out: PathBuf,
    },
    /// Run the codec property suite against an independent oracle.
    CodecCheck {
        /// Message sizes to test.
        #[arg(long, default_value = "4,16,32,256")]
        sizes: String,
        /// Random messages per size.
        #[arg(long, default_value_t = 100)]
        messages: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Decode and hex-dump a wire frame (a built-in demo frame if no file
    /// is given).
    FrameDump {
        /// File holding one binary frame.
        file: Option<PathBuf>,
    },
}

fn build_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut map = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ConfigMap::parse(&text)?
        }
        None => ConfigMap::default(),
    };
    if let Some(v) = &flags.scenario {
        map.set("run.scenario", v.clone());
    }
    if let Some(v) = &flags.mode {
        map.set("run.mode", v.clone());
    }
    if let Some(v) = flags.bandwidth {
        map.set("run.bandwidth", v.to_string());
    }
    if let Some(v) = flags.episodes {
        map.set("run.episodes", v.to_string());
    }
    if let Some(v) = &flags.seed {
        map.set("run.seeds", v.clone());
    }
    if let Some(v) = &flags.out {
        map.set("run.out", v.display().to_string());
    }
    for pair in &flags.sets {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set expects section.key=value, got {pair:?}");
        };
        map.set(key.trim(), value.trim().to_string());
    }
    Ok(RunConfig::from_map(&map)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(flags) => {
            let cfg = build_config(&flags)?;
            println!(
                "training {} | mode {} | bandwidth {} | {} episodes | seeds {:?}",
                cfg.scenario.name(),
                cfg.mode.name(),
                cfg.bandwidth,
                cfg.episodes,
                cfg.seeds
            );
            let outcome = runner::run(&cfg)?;
            for seed in &outcome.seeds {
                let resumed = seed
                    .resumed_at
                    .map(|e| format!(" (resumed at {e})"))
                    .unwrap_or_default();
                println!(
                    "seed {}{}: {} episodes, final eval over {}: return {:.3} +/- {:.3}",
                    seed.seed,
                    resumed,
                    seed.episodes,
                    seed.final_eval.episodes,
                    seed.final_eval.mean_return,
                    seed.final_eval.std_return
                );
            }
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Eval {
            run_dir,
            episodes,
            dump,
        } => {
            let dump_path = dump.unwrap_or_else(|| run_dir.join("eval.jsonl"));
            let (summary, cfg, seed) =
                runner::evaluate_run_dir(&run_dir, episodes, Some(&dump_path))?;
            println!(
                "{} | mode {} | bandwidth {} | seed {}",
                cfg.scenario.name(),
                cfg.mode.name(),
                cfg.bandwidth,
                seed
            );
            println!(
                "eval over {episodes} episodes: return {:.3} +/- {:.3}",
                summary.mean_return, summary.std_return
            );
            match cfg.scenario {
                dsms_core::env::Scenario::PredatorPrey => {
                    println!("captures/episode: {:.3}", summary.captures)
                }
                dsms_core::env::Scenario::CoopNav => println!(
                    "avg landmark distance: {:.4} | collision rate: {:.2}%",
                    summary.avg_dist, summary.collision_rate
                ),
            }
            println!(
                "mean reconstruction error: {:.3e} | mean allocated bandwidth: {:.2}",
                summary.recon_err, summary.budget_total_mean
            );
            println!("dumps written to {}", dump_path.display());
            Ok(())
        }
        Command::Analyze { dumps, blocks, out } => {
            let mut records = Vec::new();
            for path in &dumps {
                records.extend(
                    analysis::read_dumps(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                );
            }
            if records.is_empty() {
                bail!("no records in the given dumps");
            }
            std::fs::create_dir_all(&out)?;
            let steps = analysis::per_step_summary(&records)?;
            let step_csv = out.join("per_step.csv");
            analysis::write_step_csv(&step_csv, &steps)?;
            println!("wrote {}", step_csv.display());

            let has_dist = records.iter().any(|r| r.dist_to_prey.is_some());
            let block_list = match &blocks {
                Some(spec) => Some(analysis::parse_blocks(spec)?),
                None if has_dist => Some(analysis::default_pp_blocks()),
                None => None,
            };
            if let Some(block_list) = block_list {
                let table = analysis::block_summary(&records, &block_list)?;
                let block_csv = out.join("blocks.csv");
                analysis::write_block_csv(&block_csv, &table)?;
                println!("wrote {}", block_csv.display());
            }
            if has_dist {
                let rho = analysis::budget_distance_spearman(&records)?;
                for (agent, r) in rho.iter().enumerate() {
                    match r {
                        Some(r) => {
                            println!("agent {agent}: spearman(closeness, budget) = {r:+.4}")
                        }
                        None => println!("agent {agent}: spearman undefined (no rank variance)"),
                    }
                }
            }
            Ok(())
        }
        Command::CodecCheck {
            sizes,
            messages,
            seed,
        } => {
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| s.trim().parse().context("bad --sizes entry"))
                .collect::<Result<_>>()?;
            if codec_check::run(&sizes, messages, seed) {
                Ok(())
            } else {
                bail!("codec property suite failed")
            }
        }
        Command::FrameDump { file } => {
            let bytes = match &file {
                Some(path) => std::fs::read(path)
                    .with_context(|| format!("reading {}", path.display()))?,
                None => frame_dump::demo_frame(),
            };
            frame_dump::dump(&bytes);
            Ok(())
        }
    }
}
