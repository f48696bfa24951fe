//! Centralized-training / decentralized-execution learning loop.
//!
//! A deterministic actor-critic setup with one shared recurrent actor and
//! one centralized critic that sees every agent's encoded history, every
//! action and the scheduler's weight vector. Episodes are collected
//! through the real communication path (scheduling, spectral clipping,
//! the wire frame, reconstruction); updates replay stored segments and
//! recompute the differentiable path without the wire's 32-bit rounding.
//!
//! Per-segment gradient work fans out over the batch in parallel; the
//! per-segment results are reduced in index order, so updates do not
//! depend on thread scheduling.

mod replay;

pub use replay::{EpisodeRecord, ReplayBuffer, SegmentRef};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::{
    self, aggregate, aggregate_on_tape, critic_value, encode_history, message_head, policy_head,
    utility_head, AgentError, Bindings, HistoryInput, HistoryInputIds, PipelineConfig,
};
use crate::analysis::{DumpRecord, DUMP_SCHEMA};
use crate::codec::{self, full_budget, one_sided_len, CodecError, RealMessage};
use crate::config::CommMode;
use crate::env::{
    self, observation_len, EnvError, EnvParams, JointAction, Scenario,
};
use crate::nn::{
    AdamConfig, Gradients, NnError, ParameterStore, Tape, Tensor, ValueId,
};
use crate::par;
use crate::scheduler::{
    allocate, gumbel_softmax, sample_gumbel_noise, BudgetVector, SchedulerError, UtilityVector,
};
use crate::wire::{decode_frame, encode_frame, WireError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Learning-loop hyperparameters. Defaults are conventional actor-critic
/// settings at desk scale; everything is overridable from the run config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub soft_update_rate: f64,
    pub batch_segments: usize,
    /// Truncated unroll length L.
    pub segment_len: usize,
    pub exploration_sigma: f64,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    /// Reward multiplier applied inside TD targets only; keeps critic
    /// value magnitudes trainable without touching reported returns.
    pub reward_scale: f64,
    pub buffer_capacity: usize,
    pub warmup_transitions: usize,
    pub update_every_steps: usize,
    /// Global gradient-norm ceiling per update; zero disables clipping.
    pub grad_clip: f64,
    /// Episodes between evaluation windows.
    pub eval_interval: u64,
    pub eval_episodes: u32,
    pub final_eval_episodes: u32,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub critic_hidden: usize,
    /// Protocol message size p.
    pub msg_len: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            soft_update_rate: 0.01,
            batch_segments: 32,
            segment_len: 8,
            exploration_sigma: 0.1,
            temperature: 1.0,
            reward_scale: 1.0,
            buffer_capacity: 100_000,
            warmup_transitions: 1_000,
            update_every_steps: 4,
            grad_clip: 1.0,
            eval_interval: 200,
            eval_episodes: 10,
            final_eval_episodes: 200,
            lstm_hidden: 64,
            head_hidden: 64,
            critic_hidden: 64,
            msg_len: 32,
        }
    }
}

/// Headline numbers of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub returns: Vec<f64>,
    /// Scenario headline: shared global return (Predator-Prey) or the sum
    /// of agent returns (Cooperative Navigation).
    pub mean_return: f64,
    pub captures: f64,
    pub avg_dist: f64,
    pub collision_rate: f64,
    pub recon_err: f64,
    pub budget_total_mean: f64,
}

/// Aggregate over an evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: u32,
    pub mean_return: f64,
    pub std_return: f64,
    pub captures: f64,
    pub avg_dist: f64,
    pub collision_rate: f64,
    pub recon_err: f64,
    pub budget_total_mean: f64,
}

/// Deterministic seed derivation (splitmix-style) for episode streams.
pub fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.rotate_left(17)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_INIT: u64 = 3;

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Polyak-average `online` into `target`.
pub fn soft_update(
    target: &mut ParameterStore,
    online: &ParameterStore,
    rate: f64,
) -> Result<(), TrainError> {
    target.blend_from(online, rate)?;
    Ok(())
}

/// Fixed context for a rollout, separate from the mutable trainer state.
#[derive(Debug, Clone)]
pub struct RolloutSpec {
    pub scenario: Scenario,
    pub mode: CommMode,
    pub bandwidth: usize,
    pub pipe: PipelineConfig,
    pub env: EnvParams,
    pub temperature: f64,
    pub segment_len: usize,
}

impl RolloutSpec {
    fn budgets_for_weights(&self, w: &[f64]) -> Result<Option<BudgetVector>, TrainError> {
        let n = self.pipe.n_agents;
        let budgets = match self.mode {
            CommMode::NoComm => return Ok(None),
            CommMode::Dsms => {
                let wv = crate::scheduler::WeightVector::new(w.to_vec())?;
                allocate(&wv, self.bandwidth, n)?
            }
            CommMode::FixedEqual => {
                BudgetVector::new(vec![2 * (self.bandwidth / (2 * n)); n])
            }
            CommMode::FullComm => BudgetVector::new(vec![full_budget(self.pipe.msg_len); n]),
        };
        // Conservation holds in every mode; this is asserted every round.
        assert!(
            budgets.total() <= self.bandwidth,
            "allocation {} exceeds bandwidth {}",
            budgets.total(),
            self.bandwidth
        );
        assert!(budgets.as_slice().iter().all(|b| b % 2 == 0 && *b >= 2));
        Ok(Some(budgets))
    }
}

/// Run one full episode through the real communication path.
///
/// `exploration` carries the rng and the Gaussian action-noise scale and
/// marks the rollout as a training one (Gumbel noise on, noise recorded);
/// `None` is evaluation mode, fully deterministic in the episode seed.
pub fn collect_episode(
    spec: &RolloutSpec,
    actor: &ParameterStore,
    env_seed: u64,
    mut exploration: Option<(&mut ChaCha8Rng, f64)>,
    dump_episode: Option<u64>,
) -> Result<(EpisodeRecord, EpisodeMetrics, Vec<DumpRecord>), TrainError> {
    let n = spec.pipe.n_agents;
    let p = spec.pipe.msg_len;
    let hid = spec.pipe.lstm_hidden;
    let mut state = env::reset_with(spec.scenario, env_seed, spec.env.clone());
    assert_eq!(state.num_agents(), n, "pipeline/scenario agent mismatch");

    let mut tape = Tape::new();
    let bind = Bindings::bind(&mut tape, actor, false);

    let mut h_val = vec![vec![0.0; hid]; n];
    let mut c_val = vec![vec![0.0; hid]; n];
    let mut prev_action = vec![vec![0.0; spec.pipe.action_dim]; n];
    let mut prev_msg = vec![vec![0.0; p]; n];
    let mut prev_w = vec![0.0; n];

    let mut record = EpisodeRecord {
        obs: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        weights: Vec::new(),
        utilities: Vec::new(),
        gumbel: Vec::new(),
        agg_msgs: Vec::new(),
        budgets: Vec::new(),
        hidden_snaps: Vec::new(),
        segment_len: spec.segment_len,
    };
    let mut dumps = Vec::new();

    let mut returns = vec![0.0; n];
    let mut captures = 0.0;
    let mut coverage_acc = 0.0;
    let mut collision_agents = 0usize;
    let mut recon_acc = 0.0;
    let mut budget_total_acc = 0.0;
    let mut steps = 0u32;

    loop {
        let t = state.step as usize;
        if t.is_multiple_of(spec.segment_len) {
            record.hidden_snaps.push(
                (0..n)
                    .map(|i| (h_val[i].clone(), c_val[i].clone()))
                    .collect(),
            );
        }

        let obs: Vec<Vec<f64>> = (0..n)
            .map(|i| env::observe(&state, i).map(|o| o.to_vec()))
            .collect::<Result<_, _>>()?;
        record.obs.push(obs.clone());

        // Encoder step per agent.
        let mut h_ids = Vec::with_capacity(n);
        for i in 0..n {
            let prev_h = tape.constant(h_val[i].clone());
            let prev_c = tape.constant(c_val[i].clone());
            let input = HistoryInput {
                observation: obs[i].clone(),
                prev_action: prev_action[i].clone(),
                prev_message: prev_msg[i].clone(),
                prev_weight: prev_w[i],
                agent_id: i,
            }
            .to_ids(&mut tape, &spec.pipe);
            let (h, c) = encode_history(&mut tape, &bind, &spec.pipe, prev_h, prev_c, &input)?;
            h_val[i] = tape.value(h).to_vec();
            c_val[i] = tape.value(c).to_vec();
            h_ids.push(h);
        }

        // Utilities -> weights -> budgets.
        let utilities: Vec<f64> = h_ids
            .iter()
            .map(|&h| {
                utility_head(&mut tape, &bind, &spec.pipe, h).map(|u| tape.scalar(u))
            })
            .collect::<Result<_, _>>()?;
        let noise = match exploration {
            Some((ref mut rng, _)) => Some(sample_gumbel_noise(rng, n)),
            None => None,
        };
        let weights = gumbel_softmax(
            &UtilityVector::new(utilities.clone())?,
            spec.temperature,
            noise.as_deref(),
        )?;
        let budgets = spec.budgets_for_weights(weights.as_slice())?;

        // Message round: compress, one frame on the medium, reconstruct.
        let mut recon_err = vec![0.0; n];
        let agg: Vec<Vec<f64>> = match &budgets {
            None => vec![vec![0.0; p]; n],
            Some(budgets) => {
                let raw_msgs: Vec<RealMessage> = h_ids
                    .iter()
                    .map(|&h| {
                        let m = message_head(&mut tape, &bind, &spec.pipe, h)?;
                        RealMessage::new(tape.value(m).to_vec()).map_err(TrainError::from)
                    })
                    .collect::<Result<_, _>>()?;
                let clipped: Vec<_> = raw_msgs
                    .iter()
                    .zip(budgets.as_slice())
                    .map(|(m, &b)| codec::compress(m, b))
                    .collect::<Result<_, _>>()?;
                // A grant can exceed the full one-sided spectrum; the frame
                // carries what each message actually occupies.
                let occupied = BudgetVector::new(clipped.iter().map(|c| c.budget()).collect());
                let frame = encode_frame(&occupied, &clipped)?;
                let (budgets_rx, clipped_rx) = decode_frame(&frame)?;
                debug_assert_eq!(budgets_rx, occupied);
                let restored: Vec<RealMessage> = clipped_rx
                    .iter()
                    .map(codec::reconstruct)
                    .collect::<Result<_, _>>()?;
                for i in 0..n {
                    let orig = raw_msgs[i].values();
                    let rest = restored[i].values();
                    let err: f64 = orig
                        .iter()
                        .zip(rest)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let energy: f64 = orig.iter().map(|v| v * v).sum();
                    recon_err[i] = if energy > 0.0 { err / energy } else { err };
                }
                (0..n)
                    .map(|i| {
                        let others: Vec<RealMessage> = (0..n)
                            .filter(|j| *j != i)
                            .map(|j| restored[j].clone())
                            .collect();
                        aggregate(&others, n, p).map(|m| m.into_values())
                    })
                    .collect::<Result<_, _>>()?
            }
        };

        // Policy + exploration.
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let agg_id = tape.constant(agg[i].clone());
            let a = policy_head(&mut tape, &bind, &spec.pipe, h_ids[i], agg_id)?;
            let mut a_val = [tape.value(a)[0], tape.value(a)[1]];
            if let Some((ref mut rng, sigma)) = exploration {
                a_val[0] = (a_val[0] + sigma * gaussian(rng)).clamp(-1.0, 1.0);
                a_val[1] = (a_val[1] + sigma * gaussian(rng)).clamp(-1.0, 1.0);
            }
            actions.push(a_val);
        }

        let dist_before = (spec.scenario == Scenario::PredatorPrey)
            .then(|| env::pp_distances(&state));
        let (next_state, rewards, done) = env::step(&state, &JointAction(actions.clone()))?;

        // Records.
        let budgets_vec = budgets
            .as_ref()
            .map(|b| b.as_slice().to_vec())
            .unwrap_or_else(|| vec![0; n]);
        budget_total_acc += budgets_vec.iter().sum::<usize>() as f64;
        record.actions.push(actions.clone());
        record.rewards.push(rewards.clone());
        record.weights.push(weights.as_slice().to_vec());
        record.utilities.push(utilities.clone());
        record
            .gumbel
            .push(noise.clone().unwrap_or_else(|| vec![0.0; n]));
        record.agg_msgs.push(agg.clone());
        record.budgets.push(budgets_vec.clone());

        if let Some(episode) = dump_episode {
            dumps.push(DumpRecord {
                schema: DUMP_SCHEMA,
                episode,
                step: state.step + 1,
                utilities: utilities.clone(),
                weights: weights.as_slice().to_vec(),
                budgets: budgets_vec,
                rewards: rewards.clone(),
                recon_err: recon_err.clone(),
                dist_to_prey: dist_before,
            });
        }

        // Metrics.
        for i in 0..n {
            returns[i] += rewards[i];
        }
        recon_acc += recon_err.iter().sum::<f64>() / n as f64;
        match spec.scenario {
            Scenario::PredatorPrey => captures += env::pp_captures(&next_state) as f64,
            Scenario::CoopNav => {
                coverage_acc += env::cn_landmark_coverage(&next_state);
                collision_agents += env::cn_agents_in_collision(&next_state);
            }
        }
        steps += 1;

        // Next-round inputs.
        for i in 0..n {
            prev_action[i] = actions[i].to_vec();
            prev_msg[i] = agg[i].clone();
            prev_w[i] = weights.as_slice()[i];
        }
        state = next_state;
        if done {
            break;
        }
    }

    // Terminal observations close the record for one-step targets.
    record.obs.push(
        (0..n)
            .map(|i| env::observe(&state, i).map(|o| o.to_vec()))
            .collect::<Result<_, _>>()?,
    );

    let steps_f = steps as f64;
    let metrics = EpisodeMetrics {
        mean_return: match spec.scenario {
            Scenario::PredatorPrey => returns[0],
            Scenario::CoopNav => returns.iter().sum(),
        },
        captures,
        avg_dist: if spec.scenario == Scenario::CoopNav {
            coverage_acc / steps_f
        } else {
            0.0
        },
        collision_rate: if spec.scenario == Scenario::CoopNav {
            100.0 * collision_agents as f64 / (steps_f * n as f64)
        } else {
            0.0
        },
        recon_err: recon_acc / steps_f,
        budget_total_mean: budget_total_acc / steps_f,
        returns,
    };
    Ok((record, metrics, dumps))
}

/// The full learning state for one seed.
pub struct Trainer {
    pub scenario: Scenario,
    pub mode: CommMode,
    pub bandwidth: usize,
    pub cfg: TrainerConfig,
    pub env_params: EnvParams,
    pipe: PipelineConfig,
    actor: ParameterStore,
    critic: ParameterStore,
    target_actor: ParameterStore,
    target_critic: ParameterStore,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    seed: u64,
    episodes_done: u64,
    total_episodes: u64,
    steps_since_update: usize,
    update_stats: UpdateStats,
}

/// Running sums of per-update diagnostics since the last drain.
#[derive(Debug, Clone, Copy, Default)]
struct UpdateStats {
    critic_loss: f64,
    actor_q: f64,
    updates: u64,
}

impl Trainer {
    pub fn new(
        scenario: Scenario,
        mode: CommMode,
        bandwidth: usize,
        cfg: TrainerConfig,
        env_params: EnvParams,
        total_episodes: u64,
        seed: u64,
    ) -> Self {
        let mut pipe = PipelineConfig::new(
            env::num_agents(scenario),
            observation_len(scenario),
            cfg.msg_len,
        );
        pipe.lstm_hidden = cfg.lstm_hidden;
        pipe.head_hidden = cfg.head_hidden;
        pipe.critic_hidden = cfg.critic_hidden;

        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_INIT, 0));
        let actor = agent::init_actor_params(&pipe, &mut init_rng);
        let critic = agent::init_critic_params(&pipe, &mut init_rng);
        let target_actor = actor.target_copy();
        let target_critic = critic.target_copy();
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_TRAIN, 0));
        Self {
            scenario,
            mode,
            bandwidth,
            cfg,
            env_params,
            pipe,
            actor,
            critic,
            target_actor,
            target_critic,
            buffer,
            rng,
            seed,
            episodes_done: 0,
            total_episodes,
            steps_since_update: 0,
            update_stats: UpdateStats::default(),
        }
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.pipe
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Feed an externally collected episode into the replay buffer.
    pub fn push_episode(&mut self, episode: EpisodeRecord) {
        self.buffer.push(episode);
    }

    pub fn actor(&self) -> &ParameterStore {
        &self.actor
    }

    pub fn critic(&self) -> &ParameterStore {
        &self.critic
    }

    fn rollout_spec(&self) -> RolloutSpec {
        RolloutSpec {
            scenario: self.scenario,
            mode: self.mode,
            bandwidth: self.bandwidth,
            pipe: self.pipe.clone(),
            env: self.env_params.clone(),
            temperature: self.cfg.temperature,
            segment_len: self.cfg.segment_len,
        }
    }

    fn exploration_sigma(&self) -> f64 {
        let progress = self.episodes_done as f64 / self.total_episodes.max(1) as f64;
        self.cfg.exploration_sigma * (1.0 - progress).max(0.0)
    }

    /// Collect one training episode, store it and run any due updates.
    pub fn train_episode(&mut self) -> Result<EpisodeMetrics, TrainError> {
        let spec = self.rollout_spec();
        let env_seed = mix_seed(self.seed, STREAM_TRAIN, self.episodes_done + 1);
        let sigma = self.exploration_sigma();
        let (record, metrics, _) =
            collect_episode(&spec, &self.actor, env_seed, Some((&mut self.rng, sigma)), None)?;
        let steps = record.len();
        self.buffer.push(record);
        self.episodes_done += 1;

        if self.buffer.transitions() >= self.cfg.warmup_transitions {
            self.steps_since_update += steps;
            while self.steps_since_update >= self.cfg.update_every_steps {
                self.steps_since_update -= self.cfg.update_every_steps;
                let picks = self
                    .buffer
                    .sample_segments(&mut self.rng, self.cfg.batch_segments);
                let critic_loss = self.critic_update(&picks)?;
                let actor_q = self.actor_update(&picks)?;
                self.soft_update_targets()?;
                self.update_stats.critic_loss += critic_loss;
                self.update_stats.actor_q += actor_q;
                self.update_stats.updates += 1;
            }
        }
        Ok(metrics)
    }

    /// Mean critic TD loss and actor objective over the updates since the
    /// last call; `None` when no update ran.
    pub fn drain_update_stats(&mut self) -> Option<(f64, f64)> {
        let stats = std::mem::take(&mut self.update_stats);
        (stats.updates > 0).then(|| {
            (
                stats.critic_loss / stats.updates as f64,
                stats.actor_q / stats.updates as f64,
            )
        })
    }

    /// Deterministic evaluation: no Gumbel noise, no exploration noise.
    pub fn evaluate(
        &self,
        episodes: u32,
        dump: bool,
        first_episode_index: u64,
    ) -> Result<(EvalSummary, Vec<DumpRecord>), TrainError> {
        let spec = self.rollout_spec();
        let mut all_metrics = Vec::with_capacity(episodes as usize);
        let mut all_dumps = Vec::new();
        for e in 0..episodes {
            let idx = first_episode_index + e as u64;
            let env_seed = mix_seed(self.seed, STREAM_EVAL, idx);
            let (_, metrics, dumps) =
                collect_episode(&spec, &self.actor, env_seed, None, dump.then_some(idx))?;
            all_metrics.push(metrics);
            all_dumps.extend(dumps);
        }
        let count = all_metrics.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
            all_metrics.iter().map(f).sum::<f64>() / count
        };
        let mean_return = mean(&|m| m.mean_return);
        let var = all_metrics
            .iter()
            .map(|m| (m.mean_return - mean_return).powi(2))
            .sum::<f64>()
            / count;
        Ok((
            EvalSummary {
                episodes,
                mean_return,
                std_return: var.sqrt(),
                captures: mean(&|m| m.captures),
                avg_dist: mean(&|m| m.avg_dist),
                collision_rate: mean(&|m| m.collision_rate),
                recon_err: mean(&|m| m.recon_err),
                budget_total_mean: mean(&|m| m.budget_total_mean),
            },
            all_dumps,
        ))
    }

    /// One temporal-difference critic step over a sampled segment batch.
    /// Returns the mean squared TD error.
    pub fn critic_update(&mut self, picks: &[SegmentRef]) -> Result<f64, TrainError> {
        if picks.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let results: Vec<(Gradients, f64)> =
            par::map_collect(picks, |pick| self.critic_segment_grads(*pick));
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for (g, l) in &results {
            grads.accumulate(g);
            loss += l;
        }
        let scale = 1.0 / picks.len() as f64;
        grads.scale(scale);
        loss *= scale;
        self.clip_grads(&mut grads);
        self.critic
            .adam_update(&grads, &AdamConfig::with_lr(self.cfg.lr_critic))?;
        Ok(loss)
    }

    fn clip_grads(&self, grads: &mut Gradients) {
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.l2_norm();
            if norm > self.cfg.grad_clip {
                grads.scale(self.cfg.grad_clip / norm);
            }
        }
    }

    /// One deterministic policy-gradient step through the full
    /// differentiable pipeline. Returns the mean critic value (the
    /// objective being ascended).
    pub fn actor_update(&mut self, picks: &[SegmentRef]) -> Result<f64, TrainError> {
        if picks.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let results: Vec<(Gradients, f64)> =
            par::map_collect(picks, |pick| self.actor_segment_grads(*pick));
        let mut grads = Gradients::default();
        let mut objective = 0.0;
        for (g, o) in &results {
            grads.accumulate(g);
            objective += o;
        }
        let scale = 1.0 / picks.len() as f64;
        grads.scale(scale);
        objective *= scale;
        self.clip_grads(&mut grads);
        self.actor
            .adam_update(&grads, &AdamConfig::with_lr(self.cfg.lr_actor))?;
        Ok(objective)
    }

    pub fn soft_update_targets(&mut self) -> Result<(), TrainError> {
        soft_update(&mut self.target_actor, &self.actor, self.cfg.soft_update_rate)?;
        soft_update(
            &mut self.target_critic,
            &self.critic,
            self.cfg.soft_update_rate,
        )?;
        Ok(())
    }

    /// History inputs of step `t` for agent `i` as tape constants.
    fn stored_inputs(
        &self,
        tape: &mut Tape,
        ep: &EpisodeRecord,
        t: usize,
        i: usize,
    ) -> HistoryInputIds {
        let p = self.pipe.msg_len;
        let (prev_action, prev_message, prev_weight) = if t == 0 {
            (vec![0.0; self.pipe.action_dim], vec![0.0; p], 0.0)
        } else {
            (
                ep.actions[t - 1][i].to_vec(),
                ep.agg_msgs[t - 1][i].clone(),
                ep.weights[t - 1][i],
            )
        };
        HistoryInput {
            observation: ep.obs[t][i].clone(),
            prev_action,
            prev_message,
            prev_weight,
            agent_id: i,
        }
        .to_ids(tape, &self.pipe)
    }

    /// Differentiable communication round on a tape: utilities, weights,
    /// budgets (straight-through ceiling), spectral clipping, aggregation
    /// and actions.
    fn round_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        h_all: &[ValueId],
        gumbel: Option<&[f64]>,
    ) -> Result<(ValueId, Vec<usize>, Vec<ValueId>), TrainError> {
        let n = self.pipe.n_agents;
        let p = self.pipe.msg_len;
        let u_ids: Vec<ValueId> = h_all
            .iter()
            .map(|&h| utility_head(tape, bind, &self.pipe, h))
            .collect::<Result<_, _>>()?;
        let u_vec = tape.concat(&u_ids);
        let logits = match gumbel {
            Some(g) => {
                let g_id = tape.constant(g.to_vec());
                tape.add(u_vec, g_id)
            }
            None => u_vec,
        };
        let scaled = tape.scale(logits, 1.0 / self.cfg.temperature);
        let weights = tape.softmax(scaled);

        let budgets: Vec<usize> = match self.mode {
            CommMode::Dsms => {
                let mult = (self.bandwidth / 2 - n) as f64;
                let pre = tape.scale(weights, mult);
                let ceiled = tape.soft_ceil(pre);
                let b_vec = tape.scale(ceiled, 2.0);
                tape.value(b_vec).iter().map(|v| *v as usize).collect()
            }
            CommMode::FixedEqual => vec![2 * (self.bandwidth / (2 * n)); n],
            CommMode::FullComm => vec![full_budget(p); n],
            CommMode::NoComm => vec![0; n],
        };
        assert!(
            budgets.iter().sum::<usize>() <= self.bandwidth,
            "allocation exceeds bandwidth during update"
        );

        let aggregated: Vec<ValueId> = if self.mode == CommMode::NoComm || n == 1 {
            (0..n).map(|_| tape.constant(vec![0.0; p])).collect()
        } else {
            let restored: Vec<ValueId> = (0..n)
                .map(|j| {
                    let m = message_head(tape, bind, &self.pipe, h_all[j])?;
                    let spec = tape.dft_forward(m);
                    let keep = (budgets[j] / 2).min(one_sided_len(p));
                    let clipped = tape.clip_spectrum(spec, keep);
                    Ok(tape.idft_reconstruct(clipped, p))
                })
                .collect::<Result<_, TrainError>>()?;
            (0..n)
                .map(|i| {
                    let others: Vec<ValueId> = (0..n)
                        .filter(|j| *j != i)
                        .map(|j| restored[j])
                        .collect();
                    aggregate_on_tape(tape, &others)
                })
                .collect()
        };

        let actions: Vec<ValueId> = (0..n)
            .map(|i| policy_head(tape, bind, &self.pipe, h_all[i], aggregated[i]))
            .collect::<Result<_, _>>()?;
        Ok((weights, budgets, actions))
    }

    fn critic_segment_grads(&self, pick: SegmentRef) -> (Gradients, f64) {
        let ep = self.buffer.episode(pick.episode);
        let (t0, t1) = ep.segment_bounds(pick.segment);
        let n = self.pipe.n_agents;
        let gamma = self.cfg.gamma;

        let mut tape = Tape::new();
        let actor_bind = Bindings::bind(&mut tape, &self.actor, false);
        let critic_bind = Bindings::bind(&mut tape, &self.critic, true);
        let tgt_actor_bind = Bindings::bind(&mut tape, &self.target_actor, false);
        let tgt_critic_bind = Bindings::bind(&mut tape, &self.target_critic, false);

        let snap = &ep.hidden_snaps[pick.segment];
        let mut h_on: Vec<ValueId> = Vec::with_capacity(n);
        let mut c_on: Vec<ValueId> = Vec::with_capacity(n);
        let mut h_tg: Vec<ValueId> = Vec::with_capacity(n);
        let mut c_tg: Vec<ValueId> = Vec::with_capacity(n);
        for (h, c) in snap {
            h_on.push(tape.constant(h.clone()));
            c_on.push(tape.constant(c.clone()));
            h_tg.push(tape.constant(h.clone()));
            c_tg.push(tape.constant(c.clone()));
        }
        // Advance the target chain through step t0 so it leads the online
        // chain by the one step the bootstrap needs.
        for i in 0..n {
            let input = self.stored_inputs(&mut tape, ep, t0, i);
            let (h, c) =
                encode_history(&mut tape, &tgt_actor_bind, &self.pipe, h_tg[i], c_tg[i], &input)
                    .expect("target encoder shapes are fixed");
            h_tg[i] = h;
            c_tg[i] = c;
        }

        let mut sq_terms = Vec::with_capacity((t1 - t0) * n);
        for t in t0..t1 {
            for i in 0..n {
                let input = self.stored_inputs(&mut tape, ep, t, i);
                let (h, c) = encode_history(
                    &mut tape, &actor_bind, &self.pipe, h_on[i], c_on[i], &input,
                )
                .expect("encoder shapes are fixed");
                h_on[i] = h;
                c_on[i] = c;
            }
            let a_ids: Vec<ValueId> = (0..n)
                .map(|i| tape.constant(ep.actions[t][i].to_vec()))
                .collect();
            let w_id = tape.constant(ep.weights[t].clone());
            let q_ids: Vec<ValueId> = (0..n)
                .map(|i| {
                    critic_value(&mut tape, &critic_bind, &self.pipe, &h_on, &a_ids, w_id, i)
                        .expect("critic shapes are fixed")
                })
                .collect();

            let terminal = t + 1 == ep.len();
            let scale = self.cfg.reward_scale;
            let targets: Vec<f64> = if terminal {
                ep.rewards[t].iter().map(|r| scale * r).collect()
            } else {
                for i in 0..n {
                    let input = self.stored_inputs(&mut tape, ep, t + 1, i);
                    let (h, c) = encode_history(
                        &mut tape,
                        &tgt_actor_bind,
                        &self.pipe,
                        h_tg[i],
                        c_tg[i],
                        &input,
                    )
                    .expect("target encoder shapes are fixed");
                    h_tg[i] = h;
                    c_tg[i] = c;
                }
                let (w_next, _, a_next) = self
                    .round_on_tape(&mut tape, &tgt_actor_bind, &h_tg, None)
                    .expect("target round shapes are fixed");
                (0..n)
                    .map(|i| {
                        let q = critic_value(
                            &mut tape,
                            &tgt_critic_bind,
                            &self.pipe,
                            &h_tg,
                            &a_next,
                            w_next,
                            i,
                        )
                        .expect("target critic shapes are fixed");
                        scale * ep.rewards[t][i] + gamma * tape.scalar(q)
                    })
                    .collect()
            };

            for (i, &q) in q_ids.iter().enumerate() {
                let y = tape.constant_scalar(targets[i]);
                let diff = tape.sub(q, y);
                let sq = tape.mul(diff, diff);
                sq_terms.push(sq);
            }
        }
        let stacked = tape.concat(&sq_terms);
        let loss = tape.mean(stacked);
        (tape.backward(loss), tape.scalar(loss))
    }

    fn actor_segment_grads(&self, pick: SegmentRef) -> (Gradients, f64) {
        let ep = self.buffer.episode(pick.episode);
        let (t0, t1) = ep.segment_bounds(pick.segment);
        let n = self.pipe.n_agents;

        let mut tape = Tape::new();
        let actor_bind = Bindings::bind(&mut tape, &self.actor, true);
        let critic_bind = Bindings::bind(&mut tape, &self.critic, false);

        let snap = &ep.hidden_snaps[pick.segment];
        let mut h_live: Vec<ValueId> = Vec::with_capacity(n);
        let mut c_live: Vec<ValueId> = Vec::with_capacity(n);
        for (h, c) in snap {
            h_live.push(tape.constant(h.clone()));
            c_live.push(tape.constant(c.clone()));
        }

        let mut q_terms = Vec::with_capacity((t1 - t0) * n);
        for t in t0..t1 {
            for i in 0..n {
                let input = self.stored_inputs(&mut tape, ep, t, i);
                let (h, c) = encode_history(
                    &mut tape, &actor_bind, &self.pipe, h_live[i], c_live[i], &input,
                )
                .expect("encoder shapes are fixed");
                h_live[i] = h;
                c_live[i] = c;
            }
            // Gumbel noise is the draw made when the step was collected,
            // held fixed for the update.
            let (weights, _, actions) = self
                .round_on_tape(&mut tape, &actor_bind, &h_live, Some(&ep.gumbel[t]))
                .expect("round shapes are fixed");
            for i in 0..n {
                let q = critic_value(
                    &mut tape,
                    &critic_bind,
                    &self.pipe,
                    &h_live,
                    &actions,
                    weights,
                    i,
                )
                .expect("critic shapes are fixed");
                q_terms.push(q);
            }
        }
        let stacked = tape.concat(&q_terms);
        let objective = tape.mean(stacked);
        let loss = tape.scale(objective, -1.0);
        (tape.backward(loss), tape.scalar(objective))
    }

    // ---------------------------------------------------------------
    // Checkpointing
    // ---------------------------------------------------------------

    fn store_to_entries(
        prefix: &str,
        store: &ParameterStore,
        moments: bool,
        out: &mut BTreeMap<String, Tensor>,
    ) {
        for (name, tensor) in store.iter() {
            out.insert(format!("{prefix}.param.{name}"), tensor.clone());
        }
        if moments {
            for (name, m, v) in store.export_moments() {
                out.insert(
                    format!("{prefix}.adam_m.{name}"),
                    Tensor {
                        shape: vec![m.len()],
                        data: m.to_vec(),
                    },
                );
                out.insert(
                    format!("{prefix}.adam_v.{name}"),
                    Tensor {
                        shape: vec![v.len()],
                        data: v.to_vec(),
                    },
                );
            }
            out.insert(
                format!("{prefix}.opt_step"),
                Tensor::scalar(store.optimizer_step() as f64),
            );
        }
    }

    fn store_from_entries(
        prefix: &str,
        store: &mut ParameterStore,
        moments: bool,
        entries: &BTreeMap<String, Tensor>,
    ) -> Result<(), TrainError> {
        let missing = |name: &str| TrainError::Checkpoint(format!("missing entry {name}"));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let step = if moments {
            let key = format!("{prefix}.opt_step");
            entries.get(&key).ok_or_else(|| missing(&key))?.data[0] as u64
        } else {
            0
        };
        for name in names {
            let key = format!("{prefix}.param.{name}");
            let tensor = entries.get(&key).ok_or_else(|| missing(&key))?;
            store.set_data(&name, tensor.data.clone())?;
            if moments {
                let mk = format!("{prefix}.adam_m.{name}");
                let vk = format!("{prefix}.adam_v.{name}");
                let m = entries.get(&mk).ok_or_else(|| missing(&mk))?;
                let v = entries.get(&vk).ok_or_else(|| missing(&vk))?;
                store.restore_moments(&name, m.data.clone(), v.data.clone(), step)?;
            }
        }
        Ok(())
    }

    /// Full learning state as a named-tensor archive (replay buffer
    /// excluded: a resumed run refills it before updating again).
    pub fn to_archive(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        Self::store_to_entries("actor", &self.actor, true, &mut out);
        Self::store_to_entries("critic", &self.critic, true, &mut out);
        Self::store_to_entries("tgt_actor", &self.target_actor, false, &mut out);
        Self::store_to_entries("tgt_critic", &self.target_critic, false, &mut out);
        out.insert(
            "meta.episode".into(),
            Tensor::scalar(self.episodes_done as f64),
        );
        let pos: u128 = self.rng.get_word_pos();
        out.insert(
            "meta.rng_pos".into(),
            Tensor {
                shape: vec![2],
                data: vec![
                    f64::from_bits((pos >> 64) as u64),
                    f64::from_bits(pos as u64),
                ],
            },
        );
        out.insert(
            "meta.steps_since_update".into(),
            Tensor::scalar(self.steps_since_update as f64),
        );
        out
    }

    /// Restore from [`Trainer::to_archive`] output. The trainer must have
    /// been constructed with the same configuration and seed.
    pub fn restore_from_archive(
        &mut self,
        entries: &BTreeMap<String, Tensor>,
    ) -> Result<(), TrainError> {
        Self::store_from_entries("actor", &mut self.actor, true, entries)?;
        Self::store_from_entries("critic", &mut self.critic, true, entries)?;
        Self::store_from_entries("tgt_actor", &mut self.target_actor, false, entries)?;
        Self::store_from_entries("tgt_critic", &mut self.target_critic, false, entries)?;
        let scalar = |key: &str| -> Result<f64, TrainError> {
            entries
                .get(key)
                .map(|t| t.data[0])
                .ok_or_else(|| TrainError::Checkpoint(format!("missing entry {key}")))
        };
        self.episodes_done = scalar("meta.episode")? as u64;
        self.steps_since_update = scalar("meta.steps_since_update")? as usize;
        let pos_tensor = entries
            .get("meta.rng_pos")
            .ok_or_else(|| TrainError::Checkpoint("missing entry meta.rng_pos".into()))?;
        let pos = ((pos_tensor.data[0].to_bits() as u128) << 64)
            | pos_tensor.data[1].to_bits() as u128;
        self.rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_TRAIN, 0));
        self.rng.set_word_pos(pos);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trainer(mode: CommMode, bandwidth: usize) -> Trainer {
        let cfg = TrainerConfig {
            batch_segments: 4,
            segment_len: 4,
            warmup_transitions: 40,
            update_every_steps: 20,
            lstm_hidden: 8,
            head_hidden: 8,
            critic_hidden: 8,
            msg_len: 8,
            buffer_capacity: 2_000,
            ..TrainerConfig::default()
        };
        Trainer::new(
            Scenario::CoopNav,
            mode,
            bandwidth,
            cfg,
            EnvParams::default(),
            50,
            7,
        )
    }

    #[test]
    fn eval_is_deterministic() {
        let trainer = tiny_trainer(CommMode::Dsms, 38);
        let (a, dumps_a) = trainer.evaluate(2, true, 0).unwrap();
        let (b, dumps_b) = trainer.evaluate(2, true, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(dumps_a, dumps_b);
    }

    #[test]
    fn full_comm_reconstruction_is_lossless() {
        let trainer = tiny_trainer(CommMode::FullComm, 3 * full_budget(8));
        let (summary, dumps) = trainer.evaluate(2, true, 0).unwrap();
        assert!(summary.recon_err <= 1e-12, "recon {}", summary.recon_err);
        for d in &dumps {
            for b in &d.budgets {
                assert_eq!(*b, full_budget(8));
            }
        }
    }

    #[test]
    fn no_comm_sends_nothing() {
        let trainer = tiny_trainer(CommMode::NoComm, 0);
        let (summary, dumps) = trainer.evaluate(2, true, 0).unwrap();
        assert_eq!(summary.budget_total_mean, 0.0);
        assert_eq!(summary.recon_err, 0.0);
        for d in &dumps {
            assert!(d.budgets.iter().all(|b| *b == 0));
        }
        // Aggregated inputs stay zero: collect one episode and check.
        let spec = trainer.rollout_spec();
        let (record, _, _) = collect_episode(&spec, &trainer.actor, 3, None, None).unwrap();
        for step in &record.agg_msgs {
            for msg in step {
                assert!(msg.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn budgets_conserve_bandwidth_every_round() {
        let trainer = tiny_trainer(CommMode::Dsms, 38);
        let spec = trainer.rollout_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (record, _, _) =
            collect_episode(&spec, &trainer.actor, 11, Some((&mut rng, 0.1)), None).unwrap();
        for budgets in &record.budgets {
            let total: usize = budgets.iter().sum();
            assert!(total <= 38);
            assert!(budgets.iter().all(|b| b % 2 == 0 && *b >= 2));
        }
    }

    #[test]
    fn zero_critic_yields_zero_actor_gradient() {
        let mut trainer = tiny_trainer(CommMode::Dsms, 38);
        // Zero out the critic.
        let names: Vec<String> = trainer.critic.names().map(str::to_string).collect();
        for name in names {
            let len = trainer.critic.tensor(&name).len();
            trainer.critic.set_data(&name, vec![0.0; len]).unwrap();
        }
        let spec = trainer.rollout_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (record, _, _) =
            collect_episode(&spec, &trainer.actor, 5, Some((&mut rng, 0.1)), None).unwrap();
        trainer.buffer.push(record);
        let before: Vec<Vec<f64>> = trainer
            .actor
            .iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        let picks = vec![SegmentRef {
            episode: 0,
            segment: 0,
        }];
        let objective = trainer.actor_update(&picks).unwrap();
        assert_eq!(objective, 0.0);
        let after: Vec<Vec<f64>> = trainer
            .actor
            .iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        assert_eq!(before, after, "zero critic must not move the actor");
    }

    #[test]
    fn terminal_and_zero_gamma_targets_equal_rewards() {
        // With a zero critic, Q = 0 everywhere, so the TD loss equals the
        // mean of y^2; with gamma = 0 every target collapses to the reward.
        let mut trainer = tiny_trainer(CommMode::Dsms, 38);
        trainer.cfg.gamma = 0.0;
        let names: Vec<String> = trainer.critic.names().map(str::to_string).collect();
        for name in names {
            let len = trainer.critic.tensor(&name).len();
            trainer.critic.set_data(&name, vec![0.0; len]).unwrap();
        }
        let spec = trainer.rollout_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (record, _, _) =
            collect_episode(&spec, &trainer.actor, 9, Some((&mut rng, 0.1)), None).unwrap();
        let expected: f64 = {
            let (t0, t1) = record.segment_bounds(0);
            let mut acc = 0.0;
            let mut count = 0;
            for t in t0..t1 {
                for r in &record.rewards[t] {
                    acc += r * r;
                    count += 1;
                }
            }
            acc / count as f64
        };
        trainer.buffer.push(record);
        let picks = vec![SegmentRef {
            episode: 0,
            segment: 0,
        }];
        let loss = trainer.critic_update(&picks).unwrap();
        assert!(
            (loss - expected).abs() <= 1e-9 * expected.abs().max(1.0),
            "loss {loss} vs expected {expected}"
        );
    }

    #[test]
    fn updates_run_and_stay_finite() {
        let mut trainer = tiny_trainer(CommMode::Dsms, 38);
        for _ in 0..4 {
            let metrics = trainer.train_episode().unwrap();
            assert!(metrics.mean_return.is_finite());
        }
        assert!(trainer.buffer.transitions() >= 40);
        let picks = trainer.buffer.sample_segments(
            &mut ChaCha8Rng::seed_from_u64(4),
            trainer.cfg.batch_segments,
        );
        let loss = trainer.critic_update(&picks).unwrap();
        assert!(loss.is_finite());
        let objective = trainer.actor_update(&picks).unwrap();
        assert!(objective.is_finite());
        trainer.soft_update_targets().unwrap();
    }

    #[test]
    fn archive_round_trip_restores_state() {
        let mut trainer = tiny_trainer(CommMode::Dsms, 38);
        for _ in 0..3 {
            trainer.train_episode().unwrap();
        }
        let archive = trainer.to_archive();

        let mut restored = tiny_trainer(CommMode::Dsms, 38);
        restored.restore_from_archive(&archive).unwrap();
        assert_eq!(restored.episodes_done(), trainer.episodes_done());
        for (name, tensor) in trainer.actor.iter() {
            assert_eq!(restored.actor.tensor(name).data, tensor.data);
        }
        // Both rngs continue identically.
        assert_eq!(
            trainer.rng.gen::<u64>(),
            restored.rng.gen::<u64>()
        );
        // Evaluation agrees exactly.
        let (a, _) = trainer.evaluate(1, false, 0).unwrap();
        let (b, _) = restored.evaluate(1, false, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_and_sequential_updates_agree() {
        let build = || {
            let mut t = tiny_trainer(CommMode::Dsms, 38);
            let spec = t.rollout_spec();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for s in 0..3 {
                let (rec, _, _) =
                    collect_episode(&spec, &t.actor, 100 + s, Some((&mut rng, 0.1)), None)
                        .unwrap();
                t.buffer.push(rec);
            }
            t
        };
        let picks: Vec<SegmentRef> = (0..3)
            .flat_map(|e| {
                (0..2).map(move |s| SegmentRef {
                    episode: e,
                    segment: s,
                })
            })
            .collect();
        let mut par_trainer = build();
        let par_loss = par_trainer.critic_update(&picks).unwrap();
        let mut seq_trainer = build();
        let seq_loss =
            par::run_sequential(|| seq_trainer.critic_update(&picks)).unwrap();
        assert_eq!(par_loss, seq_loss);
        for (name, tensor) in par_trainer.critic.iter() {
            assert_eq!(seq_trainer.critic.tensor(name).data, tensor.data);
        }
    }
}
