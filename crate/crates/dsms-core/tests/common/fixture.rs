//! End-to-end pipeline fixture shared by the gradient and acceptance
//! suites: one full communication round with random parameters, synthetic
//! observations and fixed Gumbel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsms_core::agent::{
    self, aggregate_on_tape, critic_value, encode_history, message_head, policy_head,
    utility_head, Bindings, HistoryInput, PipelineConfig,
};
use dsms_core::codec::one_sided_len;
use dsms_core::nn::{ParameterStore, Tape};

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Fixture for the end-to-end checks: one full communication round with
/// random parameters, synthetic observations and fixed Gumbel noise.
pub struct PipelineFixture {
    pub pipe: PipelineConfig,
    pub actor: ParameterStore,
    pub critic: ParameterStore,
    pub obs: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub bandwidth: usize,
    pub temperature: f64,
}

impl PipelineFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pipe = PipelineConfig {
            n_agents: 3,
            obs_dim: 5,
            action_dim: 2,
            msg_len: 8,
            lstm_hidden: 6,
            head_hidden: 5,
            critic_hidden: 5,
        };
        let actor = agent::init_actor_params(&pipe, &mut rng);
        let critic = agent::init_critic_params(&pipe, &mut rng);
        let obs = (0..pipe.n_agents)
            .map(|_| random_vec(&mut rng, pipe.obs_dim, 1.0))
            .collect();
        let noise = random_vec(&mut rng, pipe.n_agents, 1.0);
        Self {
            pipe,
            actor,
            critic,
            obs,
            noise,
            bandwidth: 20,
            temperature: 1.0,
        }
    }

    /// Run one round; `loss_kind` 0 is the policy-path squared norm,
    /// 1 is the mean critic value (the actor objective).
    pub fn forward(&self, actor: &ParameterStore, loss_kind: u8, check_margin: bool) -> f64 {
        let n = self.pipe.n_agents;
        let p = self.pipe.msg_len;
        let mult = (self.bandwidth / 2 - n) as f64;
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, actor, false);
        let critic_bind = Bindings::bind(&mut tape, &self.critic, false);

        let mut h_all = Vec::new();
        for i in 0..n {
            let h0 = tape.constant(vec![0.0; self.pipe.lstm_hidden]);
            let c0 = tape.constant(vec![0.0; self.pipe.lstm_hidden]);
            let input = HistoryInput {
                observation: self.obs[i].clone(),
                prev_action: vec![0.0; 2],
                prev_message: vec![0.0; p],
                prev_weight: 0.0,
                agent_id: i,
            }
            .to_ids(&mut tape, &self.pipe);
            let (h, _) = encode_history(&mut tape, &bind, &self.pipe, h0, c0, &input).unwrap();
            h_all.push(h);
        }
        let u_ids: Vec<_> = h_all
            .iter()
            .map(|&h| utility_head(&mut tape, &bind, &self.pipe, h).unwrap())
            .collect();
        let u_vec = tape.concat(&u_ids);
        let g_id = tape.constant(self.noise.clone());
        let shifted = tape.add(u_vec, g_id);
        let scaled = tape.scale(shifted, 1.0 / self.temperature);
        let w = tape.softmax(scaled);
        let pre = tape.scale(w, mult);
        let ceiled = tape.soft_ceil(pre);
        let b_vec = tape.scale(ceiled, 2.0);
        let budgets: Vec<usize> = tape.value(b_vec).iter().map(|v| *v as usize).collect();
        if check_margin {
            // The finite-difference window must not cross a ceiling
            // boundary, or the clip structure would change under it.
            for (i, &wv) in tape.value(w).iter().enumerate() {
                let product = mult * wv;
                let dist = (product - product.round()).abs().min(
                    (product.ceil() - product).abs().min((product - product.floor()).abs()),
                );
                assert!(
                    dist > 1e-3,
                    "fixture too close to a ceiling boundary at agent {i}: {product}"
                );
            }
        }
        let restored: Vec<_> = (0..n)
            .map(|j| {
                let m = message_head(&mut tape, &bind, &self.pipe, h_all[j]).unwrap();
                let spec = tape.dft_forward(m);
                let keep = (budgets[j] / 2).min(one_sided_len(p));
                let clipped = tape.clip_spectrum(spec, keep);
                tape.idft_reconstruct(clipped, p)
            })
            .collect();
        let actions: Vec<_> = (0..n)
            .map(|i| {
                let others: Vec<_> = (0..n).filter(|j| *j != i).map(|j| restored[j]).collect();
                let agg = aggregate_on_tape(&mut tape, &others);
                policy_head(&mut tape, &bind, &self.pipe, h_all[i], agg).unwrap()
            })
            .collect();
        let loss = match loss_kind {
            0 => {
                let sq: Vec<_> = actions
                    .iter()
                    .map(|&a| tape.dot(a, a))
                    .collect();
                let stacked = tape.concat(&sq);
                tape.sum(stacked)
            }
            _ => {
                let qs: Vec<_> = (0..n)
                    .map(|i| {
                        critic_value(
                            &mut tape,
                            &critic_bind,
                            &self.pipe,
                            &h_all,
                            &actions,
                            w,
                            i,
                        )
                        .unwrap()
                    })
                    .collect();
                let stacked = tape.concat(&qs);
                tape.mean(stacked)
            }
        };
        tape.scalar(loss)
    }

    /// Same computation with the actor bound trainably; returns the flat
    /// analytic gradient.
    pub fn analytic_grad(&self, loss_kind: u8) -> Vec<f64> {
        let n = self.pipe.n_agents;
        let p = self.pipe.msg_len;
        let mult = (self.bandwidth / 2 - n) as f64;
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, &self.actor, true);
        let critic_bind = Bindings::bind(&mut tape, &self.critic, false);

        let mut h_all = Vec::new();
        for i in 0..n {
            let h0 = tape.constant(vec![0.0; self.pipe.lstm_hidden]);
            let c0 = tape.constant(vec![0.0; self.pipe.lstm_hidden]);
            let input = HistoryInput {
                observation: self.obs[i].clone(),
                prev_action: vec![0.0; 2],
                prev_message: vec![0.0; p],
                prev_weight: 0.0,
                agent_id: i,
            }
            .to_ids(&mut tape, &self.pipe);
            let (h, _) = encode_history(&mut tape, &bind, &self.pipe, h0, c0, &input).unwrap();
            h_all.push(h);
        }
        let u_ids: Vec<_> = h_all
            .iter()
            .map(|&h| utility_head(&mut tape, &bind, &self.pipe, h).unwrap())
            .collect();
        let u_vec = tape.concat(&u_ids);
        let g_id = tape.constant(self.noise.clone());
        let shifted = tape.add(u_vec, g_id);
        let scaled = tape.scale(shifted, 1.0 / self.temperature);
        let w = tape.softmax(scaled);
        let pre = tape.scale(w, mult);
        let ceiled = tape.soft_ceil(pre);
        let b_vec = tape.scale(ceiled, 2.0);
        let budgets: Vec<usize> = tape.value(b_vec).iter().map(|v| *v as usize).collect();
        let restored: Vec<_> = (0..n)
            .map(|j| {
                let m = message_head(&mut tape, &bind, &self.pipe, h_all[j]).unwrap();
                let spec = tape.dft_forward(m);
                let keep = (budgets[j] / 2).min(one_sided_len(p));
                let clipped = tape.clip_spectrum(spec, keep);
                tape.idft_reconstruct(clipped, p)
            })
            .collect();
        let actions: Vec<_> = (0..n)
            .map(|i| {
                let others: Vec<_> = (0..n).filter(|j| *j != i).map(|j| restored[j]).collect();
                let agg = aggregate_on_tape(&mut tape, &others);
                policy_head(&mut tape, &bind, &self.pipe, h_all[i], agg).unwrap()
            })
            .collect();
        let loss = match loss_kind {
            0 => {
                let sq: Vec<_> = actions.iter().map(|&a| tape.dot(a, a)).collect();
                let stacked = tape.concat(&sq);
                tape.sum(stacked)
            }
            _ => {
                let qs: Vec<_> = (0..n)
                    .map(|i| {
                        critic_value(&mut tape, &critic_bind, &self.pipe, &h_all, &actions, w, i)
                            .unwrap()
                    })
                    .collect();
                let stacked = tape.concat(&qs);
                tape.mean(stacked)
            }
        };
        let grads = tape.backward(loss);
        super::grads_to_flat(&self.actor, &grads)
    }
}

