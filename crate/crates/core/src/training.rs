//! Advantage actor-critic training over parallel simulation cohorts.
//!
//! Each update alternates a rollout phase (every environment advances
//! `n_steps` ticks, recording per-agent trajectory segments with their
//! initial hidden states) and a single gradient step on the combined
//! policy / value / entropy loss. The buffer is on-policy and discarded
//! after every update.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{ActionChoice, EnvConfig, Environment, MarketState, StepOutcome};
use crate::error::{SimError, SimResult};
use crate::policy::{
    epsilon_schedule, sample_action, Checkpoint, HiddenState, OnlineScaler, PolicyGradients,
    PolicyParameters, CHECKPOINT_VERSION,
};
use crate::population::{CalibrationTables, PopulationSpec};
use crate::socialgraph::GraphSpec;

/// Default transition target per update.
pub const DEFAULT_BATCH_SIZE: usize = 14656;

fn default_normalize_rewards() -> bool {
    true
}

/// Entropy weight at `update`: constant at `start` over the first half of
/// training, then linear decay towards `end` over the second half.
pub fn entropy_weight_schedule(update: u64, total: u64, start: f64, end: f64) -> f64 {
    let half = (total / 2).max(1);
    if update < half || total <= half {
        start
    } else {
        let frac = ((update - half) as f64 / (total - half) as f64).min(1.0);
        start + (end - start) * frac
    }
}

/// Running mean/variance of raw per-step rewards (Welford's algorithm);
/// `std` is the scale used for reward normalization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RewardNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RewardNormalizer {
    pub fn observe(&mut self, reward: f64) {
        self.count += 1;
        let delta = reward - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (reward - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub value_loss_weight: f64,
    pub entropy_weight: f64,
    pub grad_clip_norm: f64,
    pub updates: u64,
    pub n_envs: usize,
    /// Trajectory segment length per rollout phase.
    pub n_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub normalize_advantages: bool,
    /// Divide rewards by a running standard deviation before computing
    /// returns. Compounding asset growth makes raw rewards span several
    /// orders of magnitude across an episode; without rescaling the critic
    /// cannot reach the return magnitudes within a desk-scale update budget
    /// and the advantages degenerate into raw-return rankings.
    #[serde(default = "default_normalize_rewards")]
    pub normalize_rewards: bool,
    /// Final entropy weight; the weight decays linearly from
    /// `entropy_weight` over the second half of training so the policy can
    /// explore broadly first and sharpen afterwards. `None` keeps the weight
    /// constant.
    #[serde(default)]
    pub entropy_weight_end: Option<f64>,
    pub encoder_widths: Vec<usize>,
    pub lstm_width: usize,
    /// Write an intermediate checkpoint every this many updates (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            learning_rate: 1e-3,
            value_loss_weight: 0.5,
            entropy_weight: 0.01,
            grad_clip_norm: 0.5,
            updates: 1000,
            n_envs: 32,
            n_steps: 16,
            epsilon_start: 0.3,
            epsilon_end: 0.02,
            normalize_advantages: true,
            normalize_rewards: true,
            entropy_weight_end: None,
            encoder_widths: vec![128, 128],
            lstm_width: 128,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> SimResult<()> {
        if !(0.0..=1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return Err(SimError::Config("gamma must be in (0,1]".into()));
        }
        if self.n_envs == 0 || self.n_steps == 0 {
            return Err(SimError::Config("need at least one environment and one step".into()));
        }
        if self.value_loss_weight < 0.0 || self.entropy_weight < 0.0 {
            return Err(SimError::Config("loss weights must be >= 0".into()));
        }
        if self.entropy_weight_end.is_some_and(|w| w < 0.0) {
            return Err(SimError::Config("final entropy weight must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(SimError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One contiguous on-policy trajectory segment for a single agent.
#[derive(Debug, Clone)]
pub struct Segment {
    pub env_id: usize,
    pub agent_idx: usize,
    pub initial_hidden: HiddenState,
    /// Scaled observations, one per step.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Critic value at the truncation point; zero at a true episode end.
    pub bootstrap: f64,
    pub terminal: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
}

impl RolloutBuffer {
    pub fn with_capacity(transitions: usize) -> Self {
        RolloutBuffer { segments: Vec::with_capacity(transitions / 8) }
    }

    pub fn transition_count(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }
}

/// Discounted return recursion G_t = r_t + gamma * G_{t+1}, seeded with the
/// bootstrap value past the final kept step.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    returns
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
}

/// Per-segment returns and critic values under the current parameters.
pub fn compute_returns_and_values(
    params: &PolicyParameters,
    buffer: &RolloutBuffer,
    gamma: f64,
) -> SimResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut all_returns = Vec::with_capacity(buffer.segments.len());
    let mut all_values = Vec::with_capacity(buffer.segments.len());
    for seg in &buffer.segments {
        let mut hidden = seg.initial_hidden.clone();
        let mut values = Vec::with_capacity(seg.len());
        for obs in &seg.observations {
            let (tape, next) = params.forward(obs, &hidden)?;
            values.push(tape.value);
            hidden = next;
        }
        all_returns.push(discounted_returns(&seg.rewards, gamma, seg.bootstrap));
        all_values.push(values);
    }
    Ok((all_returns, all_values))
}

/// Batch-normalize advantages to zero mean / unit variance. A positive
/// affine map, so per-state action ordering is preserved.
pub fn normalize_advantages(advantages: &mut [Vec<f64>]) {
    let n: usize = advantages.iter().map(Vec::len).sum();
    if n < 2 {
        return;
    }
    let mean = advantages.iter().flatten().sum::<f64>() / n as f64;
    let var = advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-8);
    for seg in advantages.iter_mut() {
        for a in seg.iter_mut() {
            *a = (*a - mean) / sd;
        }
    }
}

/// Mean A2C loss over the buffer with advantages and returns held fixed:
/// -A * log pi(a) + c_v * (G - V)^2 - c_e * entropy, averaged per transition.
/// Used by the finite-difference oracle; must stay a pure function of the
/// parameters.
pub fn a2c_loss(
    params: &PolicyParameters,
    buffer: &RolloutBuffer,
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    config: &TrainerConfig,
) -> SimResult<f64> {
    let n = buffer.transition_count().max(1) as f64;
    let mut total = 0.0;
    for (si, seg) in buffer.segments.iter().enumerate() {
        let mut hidden = seg.initial_hidden.clone();
        for (t, obs) in seg.observations.iter().enumerate() {
            let (tape, next) = params.forward(obs, &hidden)?;
            hidden = next;
            let logp = tape.probs[seg.actions[t]].max(1e-300).ln();
            let entropy: f64 =
                -tape.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            let value_err = returns[si][t] - tape.value;
            total += -advantages[si][t] * logp + config.value_loss_weight * value_err * value_err
                - config.entropy_weight * entropy;
        }
    }
    Ok(total / n)
}

/// Analytic gradients of [`a2c_loss`] plus the component metrics.
pub fn a2c_loss_and_grads(
    params: &PolicyParameters,
    buffer: &RolloutBuffer,
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    config: &TrainerConfig,
) -> SimResult<(LossMetrics, PolicyGradients)> {
    let n = buffer.transition_count().max(1) as f64;
    let mut grads = params.zero_gradients();
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy_sum = 0.0;
    for (si, seg) in buffer.segments.iter().enumerate() {
        let mut hidden = seg.initial_hidden.clone();
        let mut tapes = Vec::with_capacity(seg.len());
        for obs in &seg.observations {
            let (tape, next) = params.forward(obs, &hidden)?;
            hidden = next;
            tapes.push(tape);
        }
        let mut d_logits = Vec::with_capacity(seg.len());
        let mut d_value = Vec::with_capacity(seg.len());
        for (t, tape) in tapes.iter().enumerate() {
            let probs = &tape.probs;
            let action = seg.actions[t];
            let adv = advantages[si][t];
            let logp = probs[action].max(1e-300).ln();
            let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            let value_err = returns[si][t] - tape.value;
            policy_loss += -adv * logp;
            value_loss += value_err * value_err;
            entropy_sum += entropy;

            // d/dlogits of -adv*logp: -adv * (onehot - probs)
            let mut dl = probs * adv;
            dl[action] -= adv;
            // d/dlogits of -c_e * H: c_e * probs .* (log probs + H)
            let dent = probs.mapv(|p| {
                if p > 0.0 {
                    config.entropy_weight * p * (p.ln() + entropy)
                } else {
                    0.0
                }
            });
            dl += &dent;
            d_logits.push(dl / n);
            // d/dV of c_v*(G - V)^2
            d_value.push(-2.0 * config.value_loss_weight * value_err / n);
        }
        params.backward_segment(&tapes, &d_logits, &d_value, &mut grads);
    }
    let metrics = LossMetrics {
        policy_loss: policy_loss / n,
        value_loss: value_loss / n,
        entropy: entropy_sum / n,
        total_loss: (policy_loss + config.value_loss_weight * value_loss
            - config.entropy_weight * entropy_sum)
            / n,
    };
    if !metrics.total_loss.is_finite() {
        return Err(SimError::Numeric(format!(
            "non-finite loss over {} segments",
            buffer.segments.len()
        )));
    }
    Ok((metrics, grads))
}

/// Adam optimizer over the flattened parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParameters, grad: &[f64]) {
        self.t += 1;
        let mut flat = params.flatten();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..flat.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            flat[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.assign_flat(&flat);
    }
}

/// Scale the flat gradient to a maximum global L2 norm; returns the
/// pre-clip norm.
pub fn clip_gradients(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One gradient step on a full buffer. Returns the updated metrics.
pub fn a2c_update(
    params: &mut PolicyParameters,
    optimizer: &mut Adam,
    buffer: &RolloutBuffer,
    config: &TrainerConfig,
) -> SimResult<(LossMetrics, f64)> {
    let (returns, values) = compute_returns_and_values(params, buffer, config.gamma)?;
    let mut advantages: Vec<Vec<f64>> = returns
        .iter()
        .zip(&values)
        .map(|(rs, vs)| rs.iter().zip(vs).map(|(g, v)| g - v).collect())
        .collect();
    if config.normalize_advantages {
        normalize_advantages(&mut advantages);
    }
    let (metrics, grads) = a2c_loss_and_grads(params, buffer, &advantages, &returns, config)?;
    let mut flat = grads.flatten();
    let norm = clip_gradients(&mut flat, config.grad_clip_norm);
    optimizer.step(params, &flat);
    Ok((metrics, norm))
}

// --- trainer -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct UpdateMetrics {
    pub update: u64,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub crisis_rate: f64,
}

struct EnvSlot {
    env: Environment,
    rng: ChaCha8Rng,
    hidden: Vec<HiddenState>,
}

/// The result of one env's rollout phase.
struct PhaseResult {
    segments: Vec<Segment>,
    scaler: OnlineScaler,
    reward_sum: f64,
    crisis_count: u64,
    outcome_count: u64,
}

pub struct Trainer {
    tables: Arc<CalibrationTables>,
    pop_spec: PopulationSpec,
    graph_spec: GraphSpec,
    market: MarketState,
    env_config: EnvConfig,
    pub config: TrainerConfig,
    pub params: PolicyParameters,
    pub scaler: OnlineScaler,
    optimizer: Adam,
    slots: Vec<EnvSlot>,
    reward_norm: RewardNormalizer,
    env_steps: u64,
    update: u64,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tables: Arc<CalibrationTables>,
        pop_spec: PopulationSpec,
        graph_spec: GraphSpec,
        market: MarketState,
        env_config: EnvConfig,
        config: TrainerConfig,
        seed: u64,
    ) -> SimResult<Self> {
        config.validate()?;
        let obs_dim = crate::environment::observation_width(tables.occupations.len());
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParameters::new(
            obs_dim,
            &config.encoder_widths,
            config.lstm_width,
            crate::environment::ACTION_COUNT,
            &mut init_rng,
        );
        let mut slots = Vec::with_capacity(config.n_envs);
        for env_id in 0..config.n_envs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(env_id as u64 + 1)));
            let env = Environment::new(
                tables.clone(),
                &pop_spec,
                &graph_spec,
                market,
                env_config,
                &mut rng,
            )?;
            let hidden = (0..env.agents().len()).map(|_| params.hidden_state()).collect();
            slots.push(EnvSlot { env, rng, hidden });
        }
        let optimizer = Adam::new(config.learning_rate, params.n_params());
        Ok(Trainer {
            tables,
            pop_spec,
            graph_spec,
            market,
            env_config,
            config,
            scaler: OnlineScaler::new(obs_dim),
            optimizer,
            slots,
            reward_norm: RewardNormalizer::default(),
            env_steps: 0,
            update: 0,
            params,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            train_updates: self.update,
            env_steps: self.env_steps,
            params: self.params.clone(),
            scaler: self.scaler.clone(),
        }
    }

    /// Roll every environment forward `n_steps` ticks under the current
    /// policy and shared scaler snapshot.
    fn collect_rollout(&mut self, epsilon: f64) -> SimResult<(RolloutBuffer, f64, f64)> {
        let params = &self.params;
        let base_scaler = &self.scaler;
        let n_steps = self.config.n_steps;
        let tables = &self.tables;
        let pop_spec = &self.pop_spec;
        let graph_spec = &self.graph_spec;
        let market = self.market;
        let env_config = self.env_config;

        let results: Vec<SimResult<PhaseResult>> = self
            .slots
            .par_iter_mut()
            .enumerate()
            .map(|(env_id, slot)| {
                let mut scaler = base_scaler.clone();
                // only this phase's observations may be merged back; the
                // clone above already contains the shared history
                let mut scaler_delta = OnlineScaler::new(scaler.dim());
                let mut segments: Vec<Segment> = Vec::new();
                // open segments indexed by agent
                let mut open: Vec<Option<Segment>> = vec![None; slot.env.agents().len()];
                let mut reward_sum = 0.0;
                let mut crisis_count = 0u64;
                let mut outcome_count = 0u64;

                for _ in 0..n_steps {
                    let observations = slot.env.observations()?;
                    let mut actions: Vec<Option<ActionChoice>> =
                        vec![None; slot.env.agents().len()];
                    for (idx, obs) in observations.iter().enumerate() {
                        let Some(raw) = obs else { continue };
                        let scaled = scaler.update_transform(raw)?;
                        scaler_delta.update_transform(raw)?;
                        let (tape, next_hidden) = params.forward(&scaled, &slot.hidden[idx])?;
                        let action = sample_action(&tape.probs, epsilon, &mut slot.rng)?;
                        let seg = open[idx].get_or_insert_with(|| Segment {
                            env_id,
                            agent_idx: idx,
                            initial_hidden: slot.hidden[idx].clone(),
                            observations: Vec::new(),
                            actions: Vec::new(),
                            rewards: Vec::new(),
                            bootstrap: 0.0,
                            terminal: false,
                        });
                        seg.observations.push(scaled);
                        seg.actions.push(action.joint_id());
                        seg.rewards.push(0.0); // filled from the outcome below
                        slot.hidden[idx] = next_hidden;
                        actions[idx] = Some(action);
                    }

                    let outcomes = slot.env.step(&actions, &mut slot.rng)?;
                    let mut outcome_by_agent: Vec<Option<&StepOutcome>> =
                        vec![None; slot.env.agents().len()];
                    for out in &outcomes {
                        let idx = slot
                            .env
                            .agents()
                            .iter()
                            .position(|a| a.id == out.agent_id)
                            .expect("outcome for unknown agent");
                        outcome_by_agent[idx] = Some(out);
                        outcome_count += 1;
                        if out.crisis {
                            crisis_count += 1;
                        }
                    }
                    for idx in 0..open.len() {
                        let Some(seg) = open[idx].as_mut() else { continue };
                        if actions[idx].is_none() {
                            continue;
                        }
                        let out = outcome_by_agent[idx].expect("acting agent has an outcome");
                        *seg.rewards.last_mut().unwrap() = out.reward;
                        reward_sum += out.reward;
                        // death or retirement ends the trajectory
                        if out.died || out.retired {
                            let mut finished = open[idx].take().unwrap();
                            finished.terminal = true;
                            segments.push(finished);
                            slot.hidden[idx] = params.hidden_state();
                        }
                    }

                    if slot.env.episode_done() {
                        for seg in open.iter_mut().filter_map(Option::take) {
                            let mut seg = seg;
                            seg.terminal = true;
                            segments.push(seg);
                        }
                        slot.env = Environment::new(
                            tables.clone(),
                            pop_spec,
                            graph_spec,
                            market,
                            env_config,
                            &mut slot.rng,
                        )?;
                        slot.hidden =
                            (0..slot.env.agents().len()).map(|_| params.hidden_state()).collect();
                        open = vec![None; slot.env.agents().len()];
                    }
                }

                // bootstrap truncated segments with the critic at the next state
                let observations = slot.env.observations()?;
                for (idx, seg) in open.iter_mut().enumerate() {
                    let Some(mut seg) = seg.take() else { continue };
                    if let Some(raw) = &observations[idx] {
                        let scaled = scaler.transform(raw)?;
                        let (tape, _) = params.forward(&scaled, &slot.hidden[idx])?;
                        seg.bootstrap = tape.value;
                    } else {
                        seg.terminal = true;
                    }
                    segments.push(seg);
                }

                Ok(PhaseResult {
                    segments,
                    scaler: scaler_delta,
                    reward_sum,
                    crisis_count,
                    outcome_count,
                })
            })
            .collect();

        let mut buffer = RolloutBuffer::with_capacity(DEFAULT_BATCH_SIZE);
        let mut reward_sum = 0.0;
        let mut crisis = 0u64;
        let mut outcomes = 0u64;
        for res in results {
            let phase = res?;
            self.scaler.merge(&phase.scaler);
            reward_sum += phase.reward_sum;
            crisis += phase.crisis_count;
            outcomes += phase.outcome_count;
            buffer.segments.extend(phase.segments);
        }
        let transitions = buffer.transition_count();
        self.env_steps += transitions as u64;
        let mean_reward = if transitions > 0 { reward_sum / transitions as f64 } else { 0.0 };
        let crisis_rate = if outcomes > 0 { crisis as f64 / outcomes as f64 } else { 0.0 };
        Ok((buffer, mean_reward, crisis_rate))
    }

    /// Run the configured number of updates. Metrics are returned per update;
    /// checkpoints are written into `out_dir` when provided.
    pub fn run(&mut self, out_dir: Option<&Path>) -> SimResult<Vec<UpdateMetrics>> {
        let mut metrics = Vec::with_capacity(self.config.updates as usize);
        while self.update < self.config.updates {
            let epsilon = epsilon_schedule(
                self.update,
                self.config.updates,
                self.config.epsilon_start,
                self.config.epsilon_end,
            );
            let (mut buffer, mean_reward, crisis_rate) = self.collect_rollout(epsilon)?;
            if buffer.transition_count() == 0 {
                return Err(SimError::Protocol(
                    "rollout produced no transitions; all agents dead or retired".into(),
                ));
            }
            if self.config.normalize_rewards {
                for seg in &buffer.segments {
                    for &r in &seg.rewards {
                        self.reward_norm.observe(r);
                    }
                }
                let scale = self.reward_norm.std().max(1e-8);
                for seg in &mut buffer.segments {
                    for r in &mut seg.rewards {
                        *r /= scale;
                    }
                }
            }
            let mut update_config = self.config.clone();
            if let Some(end) = self.config.entropy_weight_end {
                update_config.entropy_weight = entropy_weight_schedule(
                    self.update,
                    self.config.updates,
                    self.config.entropy_weight,
                    end,
                );
            }
            let (loss, grad_norm) = match a2c_update(
                &mut self.params,
                &mut self.optimizer,
                &buffer,
                &update_config,
            ) {
                Ok(v) => v,
                Err(e) => {
                    // checkpoint-and-halt with diagnostic
                    if let Some(dir) = out_dir {
                        let _ = self.checkpoint().save(&dir.join("checkpoint_fault.json"));
                    }
                    return Err(e);
                }
            };
            self.update += 1;
            metrics.push(UpdateMetrics {
                update: self.update,
                env_steps: self.env_steps,
                mean_reward,
                policy_loss: loss.policy_loss,
                value_loss: loss.value_loss,
                entropy: loss.entropy,
                grad_norm,
                crisis_rate,
            });
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && self.update % self.config.checkpoint_every == 0
                {
                    self.checkpoint().save(&dir.join(format!("checkpoint_{}.json", self.update)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("checkpoint.json"))?;
        }
        Ok(metrics)
    }
}

/// Mean action distribution of a (frozen) policy over states visited by a
/// greedy rollout; used for policy inspection and sanity gates.
pub fn mean_policy_distribution(
    checkpoint: &Checkpoint,
    env: &mut Environment,
    ticks: u32,
    rng: &mut ChaCha8Rng,
) -> SimResult<Array1<f64>> {
    let params = &checkpoint.params;
    let mut scaler = checkpoint.scaler.clone();
    let mut hidden: Vec<HiddenState> =
        (0..env.agents().len()).map(|_| params.hidden_state()).collect();
    let mut sum = Array1::zeros(params.action_count);
    let mut count = 0.0;
    for _ in 0..ticks {
        let observations = env.observations()?;
        let mut actions: Vec<Option<ActionChoice>> = vec![None; env.agents().len()];
        for (idx, obs) in observations.iter().enumerate() {
            let Some(raw) = obs else { continue };
            let scaled = scaler.update_transform(raw)?;
            let (tape, next) = params.forward(&scaled, &hidden[idx])?;
            sum += &tape.probs;
            count += 1.0;
            actions[idx] = Some(sample_action(&tape.probs, 0.0, rng)?);
            hidden[idx] = next;
        }
        env.step(&actions, rng)?;
        if env.episode_done() {
            break;
        }
    }
    if count == 0.0 {
        return Err(SimError::Protocol("no visited states".into()));
    }
    Ok(sum / count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn entropy_weight_schedule_holds_then_decays() {
        assert_eq!(entropy_weight_schedule(0, 100, 0.05, 0.002), 0.05);
        assert_eq!(entropy_weight_schedule(49, 100, 0.05, 0.002), 0.05);
        assert_relative_eq!(entropy_weight_schedule(100, 100, 0.05, 0.002), 0.002);
        let mid = entropy_weight_schedule(75, 100, 0.05, 0.002);
        assert!(mid < 0.05 && mid > 0.002);
    }

    #[test]
    fn reward_normalizer_matches_direct_std() {
        let samples = [3.0, -7.5, 120.0, 0.25, -33.0, 8.0, 8.0];
        let mut norm = RewardNormalizer::default();
        for &s in &samples {
            norm.observe(s);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        assert_relative_eq!(norm.std(), var.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn reward_normalizer_scale_equivariance() {
        let samples = [1.0, 4.0, -2.0, 9.0];
        let (mut a, mut b) = (RewardNormalizer::default(), RewardNormalizer::default());
        for &s in &samples {
            a.observe(s);
            b.observe(s * 1e6);
        }
        assert_relative_eq!(b.std(), a.std() * 1e6, max_relative = 1e-12);
    }

    #[test]
    fn reward_normalizer_degenerate_history_uses_unit_scale() {
        let mut norm = RewardNormalizer::default();
        assert_eq!(norm.std(), 1.0);
        norm.observe(5.0);
        assert_eq!(norm.std(), 1.0);
    }

    #[test]
    fn discounted_returns_hand_recursion() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5, 0.0), vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn gamma_zero_returns_equal_rewards() {
        let rewards = [3.0, -1.0, 2.5];
        assert_eq!(discounted_returns(&rewards, 0.0, 9.0), rewards.to_vec());
    }

    #[test]
    fn gamma_one_zero_rewards_propagates_bootstrap() {
        assert_eq!(discounted_returns(&[0.0, 0.0, 0.0], 1.0, 7.0), vec![7.0, 7.0, 7.0]);
    }

    proptest! {
        #[test]
        fn returns_match_direct_summation(
            rewards in proptest::collection::vec(-100.0f64..100.0, 1..20),
            gamma in 0.01f64..1.0,
            bootstrap in -50.0f64..50.0,
        ) {
            let fast = discounted_returns(&rewards, gamma, bootstrap);
            for t in 0..rewards.len() {
                let mut direct = 0.0;
                for (k, &r) in rewards[t..].iter().enumerate() {
                    direct += gamma.powi(k as i32) * r;
                }
                direct += gamma.powi((rewards.len() - t) as i32) * bootstrap;
                prop_assert!((fast[t] - direct).abs() < 1e-9 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn advantage_normalization_preserves_ordering() {
        let mut advs = vec![vec![3.0, -1.0, 5.0], vec![0.5, 2.0]];
        let flat_before: Vec<f64> = advs.iter().flatten().copied().collect();
        normalize_advantages(&mut advs);
        let flat_after: Vec<f64> = advs.iter().flatten().copied().collect();
        for i in 0..flat_before.len() {
            for j in 0..flat_before.len() {
                prop_assert_ordering(flat_before[i] < flat_before[j], flat_after[i] < flat_after[j]);
            }
        }
        let mean: f64 = flat_after.iter().sum::<f64>() / flat_after.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    fn prop_assert_ordering(a: bool, b: bool) {
        assert_eq!(a, b);
    }

    fn tiny_buffer(seed: u64, obs_dim: usize, steps: usize) -> RolloutBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = Segment {
            env_id: 0,
            agent_idx: 0,
            initial_hidden: HiddenState::zeros(4),
            observations: (0..steps)
                .map(|_| (0..obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect(),
            actions: (0..steps).map(|_| rng.gen_range(0..25)).collect(),
            rewards: (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bootstrap: 0.3,
            terminal: false,
        };
        RolloutBuffer { segments: vec![seg] }
    }

    #[test]
    fn zero_advantages_leave_policy_term_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = PolicyParameters::new(5, &[6], 4, 25, &mut rng);
        let buffer = tiny_buffer(1, 5, 4);
        let advantages = vec![vec![0.0; 4]];
        let (returns, _) = compute_returns_and_values(&params, &buffer, 0.9).unwrap();
        let config = TrainerConfig::default();
        let (metrics, _) = a2c_loss_and_grads(&params, &buffer, &advantages, &returns, &config).unwrap();
        assert_eq!(metrics.policy_loss, 0.0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_single_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = PolicyParameters::new(4, &[5], 4, 25, &mut rng);
        let buffer = tiny_buffer(2, 4, 1);
        let config = TrainerConfig {
            value_loss_weight: 0.5,
            entropy_weight: 0.01,
            ..Default::default()
        };
        let (returns, values) = compute_returns_and_values(&params, &buffer, 0.95).unwrap();
        let advantages: Vec<Vec<f64>> = returns
            .iter()
            .zip(&values)
            .map(|(rs, vs)| rs.iter().zip(vs).map(|(g, v)| g - v).collect())
            .collect();
        let (_, grads) =
            a2c_loss_and_grads(&params, &buffer, &advantages, &returns, &config).unwrap();
        let analytic = grads.flatten();
        let flat = params.flatten();
        let h = 1e-5;
        for i in (0..flat.len()).step_by(3) {
            let mut p = params.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            p.assign_flat(&fp);
            let lp = a2c_loss(&p, &buffer, &advantages, &returns, &config).unwrap();
            let mut fm = flat.clone();
            fm[i] -= h;
            p.assign_flat(&fm);
            let lm = a2c_loss(&p, &buffer, &advantages, &returns, &config).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "param {i}: numeric {numeric}, analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn adam_step_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = PolicyParameters::new(3, &[2], 2, 4, &mut rng);
        let before = params.flatten();
        let grad: Vec<f64> = (0..before.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut adam = Adam::new(0.01, before.len());
        adam.step(&mut params, &grad);
        let after = params.flatten();
        for i in 0..before.len() {
            // first step: m_hat = g, v_hat = g^2 -> delta = lr * g / (|g| + eps)
            let expected = before[i] - 0.01 * grad[i] / (grad[i].abs() + 1e-8);
            assert_relative_eq!(after[i], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_clipping_caps_global_norm() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_gradients(&mut g, 0.5);
        assert_relative_eq!(norm, 5.0);
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert_relative_eq!(clipped, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn entropy_pressure_drives_distribution_toward_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = PolicyParameters::new(4, &[6], 4, 25, &mut rng);
        // zero the critic so advantages vanish and only entropy acts
        let mut flat = params.flatten();
        let n = flat.len();
        let critic_len = params.critic.w.len() + params.critic.b.len();
        for v in flat[n - critic_len..].iter_mut() {
            *v = 0.0;
        }
        params.assign_flat(&flat);
        let buffer = {
            let mut b = tiny_buffer(3, 4, 8);
            for r in b.segments[0].rewards.iter_mut() {
                *r = 0.0;
            }
            b.segments[0].bootstrap = 0.0;
            b
        };
        let config = TrainerConfig {
            gamma: 0.9,
            value_loss_weight: 0.0,
            entropy_weight: 10.0,
            learning_rate: 0.01,
            grad_clip_norm: 0.0,
            normalize_advantages: false,
            ..Default::default()
        };
        let mut adam = Adam::new(config.learning_rate, params.n_params());
        let mut first_entropy = 0.0;
        let mut last_entropy = 0.0;
        for it in 0..300 {
            let (metrics, _) = a2c_update(&mut params, &mut adam, &buffer, &config).unwrap();
            if it == 0 {
                first_entropy = metrics.entropy;
            }
            last_entropy = metrics.entropy;
        }
        let max_entropy = 25f64.ln();
        assert!(last_entropy > first_entropy || first_entropy > max_entropy - 0.01);
        assert!(last_entropy > max_entropy - 0.05, "entropy {last_entropy} vs {max_entropy}");
    }

    #[test]
    fn trainer_zero_updates_keeps_initialization() {
        let tables = Arc::new(CalibrationTables::synthetic_flat(2, 2000.0, 0.01, 3.0, 0.0));
        let config = TrainerConfig {
            updates: 0,
            n_envs: 1,
            encoder_widths: vec![8],
            lstm_width: 4,
            ..Default::default()
        };
        let pop = PopulationSpec { count: 10, ..Default::default() };
        let mut trainer = Trainer::new(
            tables,
            pop,
            GraphSpec { p_intra: 0.5, p_inter: 0.2, ..Default::default() },
            MarketState::default(),
            EnvConfig::default(),
            config,
            7,
        )
        .unwrap();
        let before = trainer.params.flatten();
        let metrics = trainer.run(None).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(trainer.params.flatten(), before);
    }

    #[test]
    fn trainer_is_deterministic_under_seed() {
        let run = || {
            let tables = Arc::new(CalibrationTables::synthetic_flat(2, 2000.0, 0.02, 3.0, 0.0));
            let config = TrainerConfig {
                updates: 3,
                n_envs: 2,
                n_steps: 4,
                encoder_widths: vec![8],
                lstm_width: 4,
                ..Default::default()
            };
            let pop = PopulationSpec { count: 8, ..Default::default() };
            let mut trainer = Trainer::new(
                tables,
                pop,
                GraphSpec { p_intra: 0.5, p_inter: 0.2, ..Default::default() },
                MarketState::default(),
                EnvConfig::default(),
                config,
                11,
            )
            .unwrap();
            let metrics = trainer.run(None).unwrap();
            (trainer.params.flatten(), metrics.iter().map(|m| m.mean_reward.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
