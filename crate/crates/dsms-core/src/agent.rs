//! Per-agent networks: recurrent history encoder, utility / message /
//! policy heads and received-message aggregation.
//!
//! One parameter store is shared by every agent; behavior differs only
//! through the agent-ID one-hot appended to the history input. Heads are
//! two-layer relu MLPs; the policy output is squashed with tanh so
//! actions always land in `[-1, 1]^2`.

use rand::Rng;
use thiserror::Error;

use crate::codec::RealMessage;
use crate::nn::{
    dense, lstm_step, Activation, LstmParams, NnError, ParameterStore, Tape, Tensor, ValueId,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("aggregation protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Shapes of the whole per-agent pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub msg_len: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub critic_hidden: usize,
}

impl PipelineConfig {
    pub fn new(n_agents: usize, obs_dim: usize, msg_len: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            action_dim: 2,
            msg_len,
            lstm_hidden: 64,
            head_hidden: 64,
            critic_hidden: 64,
        }
    }

    /// Concatenated encoder input: observation, previous action, previous
    /// aggregated message, previous scheduler weight, agent one-hot.
    pub fn history_input_len(&self) -> usize {
        self.obs_dim + self.action_dim + self.msg_len + 1 + self.n_agents
    }

    /// Centralized critic input: every agent's encoded history and action,
    /// the scheduler weight vector and the agent one-hot. The `n_agents`
    /// weight slots are part of the contract.
    pub fn critic_input_len(&self) -> usize {
        self.n_agents * (self.lstm_hidden + self.action_dim) + self.n_agents + self.n_agents
    }

    pub fn one_hot(&self, agent_id: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_agents];
        v[agent_id] = 1.0;
        v
    }
}

/// One agent's raw inputs for a history step, as plain data.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryInput {
    pub observation: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_message: Vec<f64>,
    pub prev_weight: f64,
    pub agent_id: usize,
}

/// The same inputs already recorded on a tape, so parts of the history can
/// stay connected to the live computation graph during updates.
#[derive(Debug, Clone, Copy)]
pub struct HistoryInputIds {
    pub observation: ValueId,
    pub prev_action: ValueId,
    pub prev_message: ValueId,
    pub prev_weight: ValueId,
    pub agent_onehot: ValueId,
}

impl HistoryInput {
    pub fn to_ids(&self, tape: &mut Tape, cfg: &PipelineConfig) -> HistoryInputIds {
        HistoryInputIds {
            observation: tape.constant(self.observation.clone()),
            prev_action: tape.constant(self.prev_action.clone()),
            prev_message: tape.constant(self.prev_message.clone()),
            prev_weight: tape.constant_scalar(self.prev_weight),
            agent_onehot: tape.constant(cfg.one_hot(self.agent_id)),
        }
    }
}

fn mlp_shapes(in_dim: usize, hidden: usize, out_dim: usize) -> [(usize, usize); 3] {
    [(hidden, in_dim), (hidden, hidden), (out_dim, hidden)]
}

fn insert_mlp<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut R,
) {
    for (layer, (rows, cols)) in mlp_shapes(in_dim, hidden, out_dim).iter().enumerate() {
        store
            .insert(
                format!("{prefix}.w{}", layer + 1),
                Tensor::init_uniform(vec![*rows, *cols], *cols, rng),
            )
            .expect("fresh store");
        store
            .insert(
                format!("{prefix}.b{}", layer + 1),
                Tensor::init_uniform(vec![*rows], *cols, rng),
            )
            .expect("fresh store");
    }
}

/// Fresh shared actor parameters: encoder plus the three heads.
pub fn init_actor_params<R: Rng>(cfg: &PipelineConfig, rng: &mut R) -> ParameterStore {
    let mut store = ParameterStore::new();
    let h = cfg.lstm_hidden;
    let in_dim = cfg.history_input_len();
    store
        .insert(
            "enc.w_ih",
            Tensor::init_uniform(vec![4 * h, in_dim], in_dim, rng),
        )
        .expect("fresh store");
    store
        .insert("enc.w_hh", Tensor::init_uniform(vec![4 * h, h], h, rng))
        .expect("fresh store");
    store
        .insert("enc.b", Tensor::zeros(vec![4 * h]))
        .expect("fresh store");
    insert_mlp(&mut store, "util", h, cfg.head_hidden, 1, rng);
    insert_mlp(&mut store, "msg", h, cfg.head_hidden, cfg.msg_len, rng);
    insert_mlp(
        &mut store,
        "pol",
        h + cfg.msg_len,
        cfg.head_hidden,
        cfg.action_dim,
        rng,
    );
    store
}

/// Fresh centralized critic parameters.
pub fn init_critic_params<R: Rng>(cfg: &PipelineConfig, rng: &mut R) -> ParameterStore {
    let mut store = ParameterStore::new();
    insert_mlp(
        &mut store,
        "critic",
        cfg.critic_input_len(),
        cfg.critic_hidden,
        1,
        rng,
    );
    store
}

/// A parameter store bound onto a tape, trainably or frozen.
pub struct Bindings {
    ids: std::collections::BTreeMap<String, ValueId>,
}

impl Bindings {
    /// Record every tensor of `store` as tape leaves. With
    /// `trainable = true` they are `param` leaves whose adjoints come back
    /// from `backward`; otherwise plain constants (frozen nets, targets).
    pub fn bind(tape: &mut Tape, store: &ParameterStore, trainable: bool) -> Self {
        let mut ids = std::collections::BTreeMap::new();
        for (name, tensor) in store.iter() {
            let id = if trainable {
                tape.param(name, tensor.data.clone())
            } else {
                tape.constant(tensor.data.clone())
            };
            ids.insert(name.to_string(), id);
        }
        Self { ids }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("bindings: missing parameter {name}"))
    }
}

/// One encoder step over the concatenated history input.
pub fn encode_history(
    tape: &mut Tape,
    bind: &Bindings,
    cfg: &PipelineConfig,
    prev_hidden: ValueId,
    prev_cell: ValueId,
    input: &HistoryInputIds,
) -> Result<(ValueId, ValueId), AgentError> {
    let x = tape.concat(&[
        input.observation,
        input.prev_action,
        input.prev_message,
        input.prev_weight,
        input.agent_onehot,
    ]);
    let params = LstmParams {
        w_ih: bind.id("enc.w_ih"),
        w_hh: bind.id("enc.w_hh"),
        bias: bind.id("enc.b"),
        hidden: cfg.lstm_hidden,
        input: cfg.history_input_len(),
    };
    Ok(lstm_step(tape, x, prev_hidden, prev_cell, &params)?)
}

fn head_forward(
    tape: &mut Tape,
    bind: &Bindings,
    prefix: &str,
    x: ValueId,
    dims: [(usize, usize); 3],
    final_act: Activation,
) -> Result<ValueId, NnError> {
    let h1 = dense(
        tape,
        x,
        bind.id(&format!("{prefix}.w1")),
        bind.id(&format!("{prefix}.b1")),
        dims[0].0,
        dims[0].1,
        Activation::Relu,
    )?;
    let h2 = dense(
        tape,
        h1,
        bind.id(&format!("{prefix}.w2")),
        bind.id(&format!("{prefix}.b2")),
        dims[1].0,
        dims[1].1,
        Activation::Relu,
    )?;
    dense(
        tape,
        h2,
        bind.id(&format!("{prefix}.w3")),
        bind.id(&format!("{prefix}.b3")),
        dims[2].0,
        dims[2].1,
        final_act,
    )
}

/// Scalar message utility from the encoded history.
pub fn utility_head(
    tape: &mut Tape,
    bind: &Bindings,
    cfg: &PipelineConfig,
    h: ValueId,
) -> Result<ValueId, AgentError> {
    Ok(head_forward(
        tape,
        bind,
        "util",
        h,
        mlp_shapes(cfg.lstm_hidden, cfg.head_hidden, 1),
        Activation::Linear,
    )?)
}

/// Raw outgoing message of length `p`.
pub fn message_head(
    tape: &mut Tape,
    bind: &Bindings,
    cfg: &PipelineConfig,
    h: ValueId,
) -> Result<ValueId, AgentError> {
    Ok(head_forward(
        tape,
        bind,
        "msg",
        h,
        mlp_shapes(cfg.lstm_hidden, cfg.head_hidden, cfg.msg_len),
        Activation::Linear,
    )?)
}

/// Action from the history and the aggregated incoming message, tanh-bounded.
pub fn policy_head(
    tape: &mut Tape,
    bind: &Bindings,
    cfg: &PipelineConfig,
    h: ValueId,
    aggregated: ValueId,
) -> Result<ValueId, AgentError> {
    let x = tape.concat(&[h, aggregated]);
    Ok(head_forward(
        tape,
        bind,
        "pol",
        x,
        mlp_shapes(
            cfg.lstm_hidden + cfg.msg_len,
            cfg.head_hidden,
            cfg.action_dim,
        ),
        Activation::Tanh,
    )?)
}

/// Centralized action value for one agent: all encoded histories, all
/// actions, the scheduler weights and the agent one-hot.
pub fn critic_value(
    tape: &mut Tape,
    bind: &Bindings,
    cfg: &PipelineConfig,
    histories: &[ValueId],
    actions: &[ValueId],
    weights: ValueId,
    agent_id: usize,
) -> Result<ValueId, AgentError> {
    if histories.len() != cfg.n_agents || actions.len() != cfg.n_agents {
        return Err(AgentError::Nn(NnError::Shape(format!(
            "critic: {} histories / {} actions for {} agents",
            histories.len(),
            actions.len(),
            cfg.n_agents
        ))));
    }
    let mut parts = Vec::with_capacity(2 * cfg.n_agents + 2);
    parts.extend_from_slice(histories);
    parts.extend_from_slice(actions);
    parts.push(weights);
    let onehot = tape.constant(cfg.one_hot(agent_id));
    parts.push(onehot);
    let x = tape.concat(&parts);
    Ok(head_forward(
        tape,
        bind,
        "critic",
        x,
        mlp_shapes(cfg.critic_input_len(), cfg.critic_hidden, 1),
        Activation::Linear,
    )?)
}

/// Elementwise mean of the reconstructed messages from the other agents.
///
/// With a single agent in the system there is nothing to receive and the
/// aggregate is the zero message by convention.
pub fn aggregate(
    received: &[RealMessage],
    n_agents: usize,
    msg_len: usize,
) -> Result<RealMessage, AgentError> {
    if n_agents == 1 {
        return RealMessage::new(vec![0.0; msg_len])
            .map_err(|e| AgentError::Protocol(e.to_string()));
    }
    if received.is_empty() {
        return Err(AgentError::Protocol(format!(
            "no incoming messages for {n_agents} agents"
        )));
    }
    if received.len() != n_agents - 1 {
        return Err(AgentError::Protocol(format!(
            "{} incoming messages, expected {}",
            received.len(),
            n_agents - 1
        )));
    }
    let mut sum = vec![0.0; msg_len];
    for msg in received {
        if msg.len() != msg_len {
            return Err(AgentError::Protocol(format!(
                "incoming message of length {}, expected {msg_len}",
                msg.len()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(msg.values()) {
            *acc += v;
        }
    }
    let scale = 1.0 / (n_agents - 1) as f64;
    for v in sum.iter_mut() {
        *v *= scale;
    }
    RealMessage::new(sum).map_err(|e| AgentError::Protocol(e.to_string()))
}

/// Tape version of [`aggregate`] for the differentiable path.
pub fn aggregate_on_tape(tape: &mut Tape, received: &[ValueId]) -> ValueId {
    assert!(!received.is_empty(), "aggregate: no incoming messages");
    let mut acc = received[0];
    for &m in &received[1..] {
        acc = tape.add(acc, m);
    }
    tape.scale(acc, 1.0 / received.len() as f64)
}
