//! Full-run orchestration: per-seed training with periodic evaluation
//! windows, checkpoint/resume, metrics CSV and final-evaluation analysis
//! dumps. Seeds are independent jobs and run concurrently.
//!
//! Layout under the run's output directory:
//!
//! ```text
//! out/
//!   config.txt              effective configuration echo
//!   seed_<s>/
//!     config.txt            per-seed echo (seeds = <s>)
//!     metrics.csv           one row per evaluation window
//!     checkpoint.ntar       latest learning state
//!     final_eval.jsonl      per-step dumps of the final evaluation
//! ```
//!
//! A killed run resumes from `checkpoint.ntar`; metrics rows beyond the
//! checkpoint are dropped on resume, so an interrupted-and-resumed run
//! ends with exactly the rows an uninterrupted one would have.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::config::RunConfig;
use crate::metrics::{self, MetricsError, MetricsRecord, METRICS_SCHEMA};
use crate::nn::{load_archive, save_archive, NnError};
use crate::par;
use crate::trainer::{EvalSummary, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Archive(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub resumed_at: Option<u64>,
    pub episodes: u64,
    pub final_eval: EvalSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seeds: Vec<SeedOutcome>,
}

/// Render the effective configuration in the config-file syntax.
pub fn config_echo(cfg: &RunConfig, seed_override: Option<u64>) -> String {
    let seeds = match seed_override {
        Some(s) => s.to_string(),
        None => cfg
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    };
    let t = &cfg.trainer;
    let e = &cfg.env;
    format!(
        "[run]\nscenario = {}\nmode = {}\nbandwidth = {}\nseeds = {}\nepisodes = {}\nout = {}\n\n\
         [trainer]\ngamma = {}\nlr_actor = {}\nlr_critic = {}\nsoft_update = {}\nbatch_segments = {}\n\
         segment_len = {}\nexploration_sigma = {}\ntemperature = {}\nreward_scale = {}\nbuffer_capacity = {}\n\
         warmup_transitions = {}\nupdate_every_steps = {}\ngrad_clip = {}\neval_interval = {}\neval_episodes = {}\n\
         final_eval_episodes = {}\nlstm_hidden = {}\nhead_hidden = {}\ncritic_hidden = {}\nmsg_len = {}\n\n\
         [env]\nworld_half = {}\ndt = {}\ndamping = {}\naccel = {}\nagent_radius = {}\nobstacle_radius = {}\n\
         landmark_radius = {}\nforest_radius = {}\nwindow_side = {}\nleader_window_side = {}\n\
         pp_episode_len = {}\ncn_episode_len = {}\ncapture_reward = {}\ncollision_penalty = {}\n\
         prey_avoid_margin = {}\n",
        cfg.scenario.name(),
        cfg.mode.name(),
        cfg.bandwidth,
        seeds,
        cfg.episodes,
        cfg.out_dir.display(),
        t.gamma,
        t.lr_actor,
        t.lr_critic,
        t.soft_update_rate,
        t.batch_segments,
        t.segment_len,
        t.exploration_sigma,
        t.temperature,
        t.reward_scale,
        t.buffer_capacity,
        t.warmup_transitions,
        t.update_every_steps,
        t.grad_clip,
        t.eval_interval,
        t.eval_episodes,
        t.final_eval_episodes,
        t.lstm_hidden,
        t.head_hidden,
        t.critic_hidden,
        t.msg_len,
        e.world_half,
        e.dt,
        e.damping,
        e.accel,
        e.agent_radius,
        e.obstacle_radius,
        e.landmark_radius,
        e.forest_radius,
        e.window_side,
        e.leader_window_side,
        e.pp_episode_len,
        e.cn_episode_len,
        e.capture_reward,
        e.collision_penalty,
        e.prey_avoid_margin,
    )
}

fn window_record(
    cfg: &RunConfig,
    seed: u64,
    episode: u64,
    s: &EvalSummary,
    update_stats: Option<(f64, f64)>,
) -> MetricsRecord {
    use crate::env::Scenario;
    MetricsRecord {
        schema: METRICS_SCHEMA,
        scenario: cfg.scenario.name().to_string(),
        mode: cfg.mode.name().to_string(),
        seed,
        episode,
        eval_episodes: s.episodes,
        mean_return: s.mean_return,
        captures: (cfg.scenario == Scenario::PredatorPrey).then_some(s.captures),
        avg_dist: (cfg.scenario == Scenario::CoopNav).then_some(s.avg_dist),
        collision_rate: (cfg.scenario == Scenario::CoopNav).then_some(s.collision_rate),
        recon_err: s.recon_err,
        mean_budget_total: s.budget_total_mean,
        critic_loss: update_stats.map(|(c, _)| c),
        actor_q: update_stats.map(|(_, q)| q),
    }
}

/// Train one seed to completion (possibly resuming), then run the final
/// evaluation and write its dumps.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome, RunnerError> {
    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), config_echo(cfg, Some(seed)))?;
    let ckpt_path = dir.join("checkpoint.ntar");
    let metrics_path = dir.join("metrics.csv");

    let mut trainer = Trainer::new(
        cfg.scenario,
        cfg.mode,
        cfg.bandwidth,
        cfg.trainer.clone(),
        cfg.env.clone(),
        cfg.episodes,
        seed,
    );
    let mut resumed_at = None;
    if ckpt_path.exists() {
        let entries = load_archive(&ckpt_path)?;
        trainer.restore_from_archive(&entries)?;
        resumed_at = Some(trainer.episodes_done());
        // Drop any metrics row written after the checkpointed episode
        // (a kill can land between the CSV append and the checkpoint).
        if metrics_path.exists() {
            let rows = metrics::read_records(&metrics_path)?;
            let keep: Vec<MetricsRecord> = rows
                .into_iter()
                .filter(|r| r.episode <= trainer.episodes_done())
                .collect();
            fs::remove_file(&metrics_path)?;
            metrics::append_records(&metrics_path, &keep)?;
        }
    }

    while trainer.episodes_done() < cfg.episodes {
        trainer.train_episode()?;
        let done = trainer.episodes_done();
        if done.is_multiple_of(cfg.trainer.eval_interval) {
            let stats = trainer.drain_update_stats();
            let (summary, _) = trainer.evaluate(cfg.trainer.eval_episodes, false, 0)?;
            metrics::append_records(
                &metrics_path,
                &[window_record(cfg, seed, done, &summary, stats)],
            )?;
            save_archive(&ckpt_path, &trainer.to_archive())?;
            let losses = stats
                .map(|(c, q)| format!(" | critic loss {c:.3} | actor q {q:.3}"))
                .unwrap_or_default();
            println!(
                "seed {seed} | episode {done}/{} | eval return {:.3}{losses}",
                cfg.episodes, summary.mean_return
            );
        }
    }

    let (final_eval, dumps) = trainer.evaluate(cfg.trainer.final_eval_episodes, true, 0)?;
    analysis::write_dumps(&dir.join("final_eval.jsonl"), &dumps)?;
    save_archive(&ckpt_path, &trainer.to_archive())?;
    Ok(SeedOutcome {
        seed,
        resumed_at,
        episodes: trainer.episodes_done(),
        final_eval,
    })
}

/// Train every seed of the run configuration; seeds run as independent
/// parallel jobs with private output directories.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunnerError> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), config_echo(cfg, None))?;
    let results: Vec<Result<SeedOutcome, RunnerError>> =
        par::map_collect(&cfg.seeds, |&seed| run_seed(cfg, seed));
    let mut seeds = Vec::with_capacity(results.len());
    for r in results {
        seeds.push(r?);
    }
    Ok(RunOutcome { seeds })
}

/// Evaluate a trained seed directory without touching its training state.
pub fn evaluate_run_dir(
    run_dir: &Path,
    episodes: u32,
    dump_path: Option<&Path>,
) -> Result<(EvalSummary, RunConfig, u64), RunnerError> {
    let text = fs::read_to_string(run_dir.join("config.txt"))?;
    let map = crate::config::ConfigMap::parse(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let cfg = RunConfig::from_map(&map)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let seed = cfg.seeds[0];
    let mut trainer = Trainer::new(
        cfg.scenario,
        cfg.mode,
        cfg.bandwidth,
        cfg.trainer.clone(),
        cfg.env.clone(),
        cfg.episodes,
        seed,
    );
    let entries = load_archive(&run_dir.join("checkpoint.ntar"))?;
    trainer.restore_from_archive(&entries)?;
    let (summary, dumps) = trainer.evaluate(episodes, dump_path.is_some(), 0)?;
    if let Some(path) = dump_path {
        analysis::write_dumps(path, &dumps)?;
    }
    Ok((summary, cfg, seed))
}
