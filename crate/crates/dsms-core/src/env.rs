//! Deterministic 2-D particle scenarios.
//!
//! Two scenarios on the world `[-1, 1]^2`:
//!
//! * **Predator-Prey** — four learning predators chase one scripted prey
//!   around a landmark obstacle and two concealing forests. The predators
//!   share a reward: +5 per collision with the prey minus the summed
//!   predator-prey distances.
//! * **Cooperative Navigation** — three learning agents (agent 0 is the
//!   leader with a wider view) cover three landmarks. Rewards are
//!   individual: closeness to the nearest landmark, global landmark
//!   coverage, and a -1 penalty per collision with another agent.
//!
//! Observability is an axis-aligned square window centered on the
//! observer (closed boundary: an entity exactly on the edge is visible).
//! Entities standing inside a forest are hidden from observers outside
//! that forest. Masked entries read as zero with a companion visibility
//! flag so "not visible" never collides with "at my position".
//!
//! Physics is a damped double integrator; identical seeds and action
//! sequences reproduce trajectories bitwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid action for agent {agent}: {reason}")]
    InvalidAction { agent: usize, reason: String },
    #[error("episode already finished at step {0}")]
    EpisodeFinished(u32),
    #[error("unknown agent id {0}")]
    UnknownAgent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    PredatorPrey,
    CoopNav,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::PredatorPrey => "predator_prey",
            Scenario::CoopNav => "coop_nav",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "predator_prey" | "pp" => Some(Scenario::PredatorPrey),
            "coop_nav" | "cn" => Some(Scenario::CoopNav),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Agent,
    Prey,
    Landmark,
    Forest,
}

/// Tunable world constants, kept inside the state so the step/observe
/// functions stay pure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub world_half: f64,
    pub dt: f64,
    pub damping: f64,
    pub accel: f64,
    pub agent_radius: f64,
    pub obstacle_radius: f64,
    pub landmark_radius: f64,
    pub forest_radius: f64,
    /// Window side for ordinary agents (their view is at most 25% of the
    /// world when centered).
    pub window_side: f64,
    /// Window side for the Cooperative Navigation leader (up to 50%).
    pub leader_window_side: f64,
    pub pp_episode_len: u32,
    pub cn_episode_len: u32,
    pub capture_reward: f64,
    pub collision_penalty: f64,
    /// Extra clearance at which the scripted prey starts deflecting
    /// around the obstacle.
    pub prey_avoid_margin: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            world_half: 1.0,
            dt: 0.1,
            damping: 0.25,
            accel: 5.0,
            agent_radius: 0.05,
            obstacle_radius: 0.2,
            landmark_radius: 0.05,
            forest_radius: 0.3,
            window_side: 1.0,
            leader_window_side: std::f64::consts::SQRT_2,
            pp_episode_len: 50,
            cn_episode_len: 20,
            capture_reward: 5.0,
            collision_penalty: 1.0,
            prey_avoid_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub scenario: Scenario,
    pub params: EnvParams,
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub kinds: Vec<EntityKind>,
    pub step: u32,
}

impl WorldState {
    pub fn num_agents(&self) -> usize {
        self.kinds.iter().filter(|k| **k == EntityKind::Agent).count()
    }

    pub fn episode_len(&self) -> u32 {
        match self.scenario {
            Scenario::PredatorPrey => self.params.pp_episode_len,
            Scenario::CoopNav => self.params.cn_episode_len,
        }
    }

    pub fn done(&self) -> bool {
        self.step >= self.episode_len()
    }

    fn is_mobile(&self, idx: usize) -> bool {
        matches!(self.kinds[idx], EntityKind::Agent | EntityKind::Prey)
    }

    fn radius(&self, idx: usize) -> f64 {
        match self.kinds[idx] {
            EntityKind::Agent | EntityKind::Prey => self.params.agent_radius,
            EntityKind::Landmark => {
                if self.scenario == Scenario::PredatorPrey {
                    self.params.obstacle_radius
                } else {
                    self.params.landmark_radius
                }
            }
            EntityKind::Forest => self.params.forest_radius,
        }
    }
}

/// Per-agent continuous force, componentwise inside `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction(pub Vec<[f64; 2]>);

/// What one agent sees of one other entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityView {
    pub kind: EntityKind,
    pub visible: bool,
    /// Relative position, zero sentinel when masked.
    pub rel_pos: [f64; 2],
    /// Relative velocity for mobile entities, zero sentinel when masked.
    pub rel_vel: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub own_pos: [f64; 2],
    pub own_vel: [f64; 2],
    pub others: Vec<EntityView>,
}

impl AgentObservation {
    /// Flatten to the encoder layout: own pose, then per entity
    /// `[rel_pos, rel_vel?, visible]` in fixed entity order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 + self.others.len() * 5);
        out.extend_from_slice(&self.own_pos);
        out.extend_from_slice(&self.own_vel);
        for view in &self.others {
            out.extend_from_slice(&view.rel_pos);
            if let Some(v) = view.rel_vel {
                out.extend_from_slice(&v);
            }
            out.push(if view.visible { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Flattened observation length for a scenario under the default entity
/// census.
pub fn observation_len(scenario: Scenario) -> usize {
    match scenario {
        // own(4) + 3 predators(5) + prey(5) + obstacle(3) + 2 forests(6)
        Scenario::PredatorPrey => 4 + 3 * 5 + 5 + 3 + 2 * 3,
        // own(4) + 2 agents(5) + 3 landmarks(9)
        Scenario::CoopNav => 4 + 2 * 5 + 3 * 3,
    }
}

pub fn num_agents(scenario: Scenario) -> usize {
    match scenario {
        Scenario::PredatorPrey => 4,
        Scenario::CoopNav => 3,
    }
}

/// Spawn a fresh world. Identical `(scenario, seed)` pairs produce
/// identical states.
pub fn reset(scenario: Scenario, seed: u64) -> WorldState {
    reset_with(scenario, seed, EnvParams::default())
}

pub fn reset_with(scenario: Scenario, seed: u64, params: EnvParams) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds: Vec<EntityKind> = match scenario {
        Scenario::PredatorPrey => {
            let mut k = vec![EntityKind::Agent; 4];
            k.push(EntityKind::Prey);
            k.push(EntityKind::Landmark);
            k.push(EntityKind::Forest);
            k.push(EntityKind::Forest);
            k
        }
        Scenario::CoopNav => {
            let mut k = vec![EntityKind::Agent; 3];
            k.extend([EntityKind::Landmark; 3]);
            k
        }
    };
    let half = params.world_half;
    let positions = kinds
        .iter()
        .map(|_| [rng.gen_range(-half..half), rng.gen_range(-half..half)])
        .collect();
    let velocities = vec![[0.0, 0.0]; kinds.len()];
    WorldState {
        scenario,
        params,
        positions,
        velocities,
        kinds,
        step: 0,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advance one step: apply forces (the scripted prey steers itself),
/// integrate, clamp to bounds, score rewards.
///
/// Returns the successor state, per-agent rewards and the done flag.
#[allow(clippy::needless_range_loop)] // entity arrays share the index
pub fn step(
    state: &WorldState,
    actions: &JointAction,
) -> Result<(WorldState, Vec<f64>, bool), EnvError> {
    if state.done() {
        return Err(EnvError::EpisodeFinished(state.step));
    }
    let n = state.num_agents();
    if actions.0.len() != n {
        return Err(EnvError::InvalidAction {
            agent: actions.0.len().min(n),
            reason: format!("{} actions for {n} agents", actions.0.len()),
        });
    }
    for (i, a) in actions.0.iter().enumerate() {
        if !a[0].is_finite() || !a[1].is_finite() {
            return Err(EnvError::InvalidAction {
                agent: i,
                reason: "non-finite force".into(),
            });
        }
    }

    let mut next = state.clone();
    let p = &state.params;
    let mut forces = vec![[0.0, 0.0]; state.kinds.len()];
    for (i, a) in actions.0.iter().enumerate() {
        forces[i] = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
    }
    if state.scenario == Scenario::PredatorPrey {
        forces[n] = prey_policy(state);
    }

    for idx in 0..state.kinds.len() {
        if !state.is_mobile(idx) {
            continue;
        }
        let v = &mut next.velocities[idx];
        v[0] = (1.0 - p.damping) * v[0] + forces[idx][0] * p.dt * p.accel;
        v[1] = (1.0 - p.damping) * v[1] + forces[idx][1] * p.dt * p.accel;
        let x = &mut next.positions[idx];
        x[0] = (x[0] + v[0] * p.dt).clamp(-p.world_half, p.world_half);
        x[1] = (x[1] + v[1] * p.dt).clamp(-p.world_half, p.world_half);
    }
    next.step += 1;

    let rewards = match state.scenario {
        Scenario::PredatorPrey => pp_rewards(&next),
        Scenario::CoopNav => cn_rewards(&next),
    };
    let done = next.done();
    Ok((next, rewards, done))
}

fn collides(state: &WorldState, a: usize, b: usize) -> bool {
    dist(state.positions[a], state.positions[b]) < state.radius(a) + state.radius(b)
}

fn pp_rewards(state: &WorldState) -> Vec<f64> {
    let n = state.num_agents();
    let prey = n;
    let captures = (0..n).filter(|&i| collides(state, i, prey)).count();
    let dist_sum: f64 = (0..n)
        .map(|i| dist(state.positions[i], state.positions[prey]))
        .sum();
    let shared = state.params.capture_reward * captures as f64 - dist_sum;
    vec![shared; n]
}

fn cn_rewards(state: &WorldState) -> Vec<f64> {
    let n = state.num_agents();
    let landmarks: Vec<usize> = (0..state.kinds.len())
        .filter(|&i| state.kinds[i] == EntityKind::Landmark)
        .collect();
    // Global coverage term: every landmark pulls its nearest agent in.
    let coverage: f64 = landmarks
        .iter()
        .map(|&l| {
            (0..n)
                .map(|a| dist(state.positions[a], state.positions[l]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    (0..n)
        .map(|a| {
            let nearest = landmarks
                .iter()
                .map(|&l| dist(state.positions[a], state.positions[l]))
                .fold(f64::INFINITY, f64::min);
            let collisions = (0..n).filter(|&b| b != a && collides(state, a, b)).count();
            -nearest - coverage - state.params.collision_penalty * collisions as f64
        })
        .collect()
}

/// Number of predators currently overlapping the prey.
pub fn pp_captures(state: &WorldState) -> usize {
    let n = state.num_agents();
    let prey = n;
    if state.kinds.get(prey) != Some(&EntityKind::Prey) {
        return 0;
    }
    (0..n).filter(|&i| collides(state, i, prey)).count()
}

/// Per-predator distance to the prey.
pub fn pp_distances(state: &WorldState) -> Vec<f64> {
    let n = state.num_agents();
    let prey = n;
    (0..n)
        .map(|i| dist(state.positions[i], state.positions[prey]))
        .collect()
}

/// Mean over landmarks of the distance to their nearest agent.
pub fn cn_landmark_coverage(state: &WorldState) -> f64 {
    let n = state.num_agents();
    let landmarks: Vec<usize> = (0..state.kinds.len())
        .filter(|&i| state.kinds[i] == EntityKind::Landmark)
        .collect();
    let total: f64 = landmarks
        .iter()
        .map(|&l| {
            (0..n)
                .map(|a| dist(state.positions[a], state.positions[l]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / landmarks.len().max(1) as f64
}

/// Number of agents involved in at least one agent-agent collision.
pub fn cn_agents_in_collision(state: &WorldState) -> usize {
    let n = state.num_agents();
    (0..n)
        .filter(|&a| (0..n).any(|b| b != a && collides(state, a, b)))
        .count()
}

/// What `agent_id` can see. The window is a closed axis-aligned square;
/// forest concealment applies on top of it.
pub fn observe(state: &WorldState, agent_id: usize) -> Result<AgentObservation, EnvError> {
    let n = state.num_agents();
    if agent_id >= n {
        return Err(EnvError::UnknownAgent(agent_id));
    }
    let own_pos = state.positions[agent_id];
    let half_side = window_side(state, agent_id) / 2.0;

    let forests: Vec<usize> = (0..state.kinds.len())
        .filter(|&i| state.kinds[i] == EntityKind::Forest)
        .collect();
    let in_forest = |idx: usize, f: usize| -> bool {
        dist(state.positions[idx], state.positions[f]) <= state.params.forest_radius
    };

    let mut others = Vec::with_capacity(state.kinds.len() - 1);
    for idx in 0..state.kinds.len() {
        if idx == agent_id {
            continue;
        }
        let rel = [
            state.positions[idx][0] - own_pos[0],
            state.positions[idx][1] - own_pos[1],
        ];
        let in_window = rel[0].abs() <= half_side && rel[1].abs() <= half_side;
        let concealed = forests
            .iter()
            .any(|&f| idx != f && in_forest(idx, f) && !in_forest(agent_id, f));
        let visible = in_window && !concealed;
        let mobile = state.is_mobile(idx);
        others.push(EntityView {
            kind: state.kinds[idx],
            visible,
            rel_pos: if visible { rel } else { [0.0, 0.0] },
            rel_vel: if mobile {
                Some(if visible {
                    [
                        state.velocities[idx][0] - state.velocities[agent_id][0],
                        state.velocities[idx][1] - state.velocities[agent_id][1],
                    ]
                } else {
                    [0.0, 0.0]
                })
            } else {
                None
            },
        });
    }
    Ok(AgentObservation {
        own_pos,
        own_vel: state.velocities[agent_id],
        others,
    })
}

fn window_side(state: &WorldState, agent_id: usize) -> f64 {
    if state.scenario == Scenario::CoopNav && agent_id == 0 {
        state.params.leader_window_side
    } else {
        state.params.window_side
    }
}

/// Scripted prey: unit-magnitude flight from the nearest predator, with a
/// mirror deflection when that heading runs into the obstacle.
///
/// When several predators tie for nearest (their flee directions cancel),
/// the prey picks the axis direction with the most free space that does
/// not approach any of the tied predators. Without predators it idles.
pub fn prey_policy(state: &WorldState) -> [f64; 2] {
    let predators: Vec<usize> = (0..state.kinds.len())
        .filter(|&i| state.kinds[i] == EntityKind::Agent)
        .collect();
    let prey = match state.kinds.iter().position(|k| *k == EntityKind::Prey) {
        Some(p) => p,
        None => return [0.0, 0.0],
    };
    if predators.is_empty() {
        return [0.0, 0.0];
    }
    let pos = state.positions[prey];
    let dists: Vec<f64> = predators
        .iter()
        .map(|&i| dist(pos, state.positions[i]))
        .collect();
    let d_min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = predators
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d - d_min <= 1e-9)
        .map(|(&i, _)| i)
        .collect();

    let mut away = [0.0, 0.0];
    for &i in &tied {
        let d = dist(pos, state.positions[i]).max(1e-12);
        away[0] += (pos[0] - state.positions[i][0]) / d;
        away[1] += (pos[1] - state.positions[i][1]) / d;
    }
    let norm = (away[0] * away[0] + away[1] * away[1]).sqrt();

    let mut dir = if norm > 1e-9 {
        [away[0] / norm, away[1] / norm]
    } else {
        // Flee directions cancel. Candidate axis moves that do not close
        // in on any tied predator, ranked by distance to the wall.
        let candidates: [([f64; 2], f64); 4] = [
            ([1.0, 0.0], state.params.world_half - pos[0]),
            ([-1.0, 0.0], state.params.world_half + pos[0]),
            ([0.0, 1.0], state.params.world_half - pos[1]),
            ([0.0, -1.0], state.params.world_half + pos[1]),
        ];
        let mut best: Option<([f64; 2], f64)> = None;
        for (cand, space) in candidates {
            let safe = tied.iter().all(|&i| {
                let d = dist(pos, state.positions[i]).max(1e-12);
                let toward = [
                    (state.positions[i][0] - pos[0]) / d,
                    (state.positions[i][1] - pos[1]) / d,
                ];
                cand[0] * toward[0] + cand[1] * toward[1] <= 1e-12
            });
            if safe && best.is_none_or(|(_, s)| space > s) {
                best = Some((cand, space));
            }
        }
        match best {
            Some((cand, _)) => cand,
            None => return [0.0, 0.0],
        }
    };

    // Obstacle deflection: mirror the inbound component when the flee
    // heading points into the nearby obstacle.
    if let Some(obstacle) = (0..state.kinds.len()).find(|&i| state.kinds[i] == EntityKind::Landmark)
    {
        let to_obs = [
            state.positions[obstacle][0] - pos[0],
            state.positions[obstacle][1] - pos[1],
        ];
        let d_obs = (to_obs[0] * to_obs[0] + to_obs[1] * to_obs[1]).sqrt();
        let trigger = state.radius(obstacle) + state.params.agent_radius
            + state.params.prey_avoid_margin;
        if d_obs > 1e-12 && d_obs <= trigger {
            let u = [to_obs[0] / d_obs, to_obs[1] / d_obs];
            let inward = dir[0] * u[0] + dir[1] * u[1];
            if inward > 0.0 {
                dir[0] -= 2.0 * inward * u[0];
                dir[1] -= 2.0 * inward * u[1];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-12);
                dir[0] /= norm;
                dir[1] /= norm;
            }
        }
    }
    dir
}
