//! Q-function policies and a from-scratch DQN trainer.
//!
//! Policies are consumed everywhere else purely through their Q vectors
//! ([`QPolicy`]); the trained [`QFunction`] is a 10-256-5 rectifier network
//! over observations standardized by fixed per-feature scales.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::env::{self, Action, EnvParams, MergingEnv, RewardWeights, NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{td_loss_grads, Adam, Layer, Mlp, TdBatch};
use crate::seeds;
use crate::wire::{self, Reader, Writer};

/// Hidden width of the Q network.
pub const HIDDEN_WIDTH: usize = 256;

/// Oracle access to a policy: a Q vector per observation. The greedy argmax
/// of that vector is the policy's decision rule.
pub trait QPolicy: Sync {
    fn q_values(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; NUM_ACTIONS]>;
    fn label(&self) -> &str;
}

/// Argmax with ties broken toward the lowest action index.
pub fn greedy_action(q: &[f64; NUM_ACTIONS]) -> Action {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::from_index(best).expect("index in range")
}

/// The greedy action of a policy at an observation.
pub fn act_greedy<P: QPolicy + ?Sized>(policy: &P, obs: &[f64; OBS_DIM]) -> Result<Action> {
    Ok(greedy_action(&policy.q_values(obs)?))
}

/// Training provenance carried by a policy file.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMeta {
    pub label: String,
    pub theta: [f64; 5],
    pub seed: u64,
    pub train_steps: u64,
}

/// A trained (or freshly initialized) Q network plus its observation scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    net: Mlp,
    obs_scales: [f64; OBS_DIM],
    meta: PolicyMeta,
}

/// Fixed standardization constants derived from the environment geometry:
/// positions by road width / nominal episode length, velocities by `v_max`,
/// steering by `steer_max`; headings are already order one.
pub fn obs_scales(params: &EnvParams) -> [f64; OBS_DIM] {
    let y_scale = params.v_max * params.dt * params.max_steps as f64;
    let per_vehicle = [
        params.road_width(),
        y_scale,
        1.0,
        params.v_max,
        params.steer_max,
    ];
    let mut scales = [1.0; OBS_DIM];
    scales[..5].copy_from_slice(&per_vehicle);
    scales[5..].copy_from_slice(&per_vehicle);
    scales
}

fn scale_obs(obs: &[f64; OBS_DIM], scales: &[f64; OBS_DIM]) -> Vec<f64> {
    obs.iter().zip(scales).map(|(o, s)| o / s).collect()
}

impl QFunction {
    pub fn new(net: Mlp, obs_scales: [f64; OBS_DIM], meta: PolicyMeta) -> Self {
        Self {
            net,
            obs_scales,
            meta,
        }
    }

    pub fn meta(&self) -> &PolicyMeta {
        &self.meta
    }

    fn q_unchecked(&self, obs: &[f64; OBS_DIM]) -> [f64; NUM_ACTIONS] {
        let out = self.net.forward(&scale_obs(obs, &self.obs_scales));
        let mut q = [0.0; NUM_ACTIONS];
        q.copy_from_slice(&out);
        q
    }

    const MAGIC: &'static [u8; 4] = b"QPOL";
    const VERSION: u32 = 1;

    /// Versioned binary policy file: header, metadata, layer shapes, then the
    /// raw little-endian f64 parameter block.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = Writer::new();
        w.put_bytes(Self::MAGIC);
        w.put_u32(Self::VERSION);
        w.put_str(&self.meta.label);
        for t in self.meta.theta {
            w.put_f64(t);
        }
        w.put_u64(self.meta.seed);
        w.put_u64(self.meta.train_steps);
        for s in self.obs_scales {
            w.put_f64(s);
        }
        w.put_u32(self.net.layers.len() as u32);
        for layer in &self.net.layers {
            w.put_u32(layer.n_in as u32);
            w.put_u32(layer.n_out as u32);
        }
        for layer in &self.net.layers {
            for &v in layer.w.iter().chain(&layer.b) {
                w.put_f64(v);
            }
        }
        std::fs::write(path, w.into_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        wire::expect_header(&mut r, Self::MAGIC, Self::VERSION)?;
        let label = r.get_str()?;
        let mut theta = [0.0; 5];
        for t in theta.iter_mut() {
            *t = r.get_f64()?;
        }
        let seed = r.get_u64()?;
        let train_steps = r.get_u64()?;
        let mut obs_scales = [0.0; OBS_DIM];
        for s in obs_scales.iter_mut() {
            *s = r.get_f64()?;
        }
        let n_layers = r.get_u32()? as usize;
        if n_layers == 0 || n_layers > 16 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let n_in = r.get_u32()? as usize;
            let n_out = r.get_u32()? as usize;
            if n_in == 0 || n_out == 0 {
                return Err(Error::Format("zero-sized layer".into()));
            }
            shapes.push((n_in, n_out));
        }
        if shapes.first().map(|s| s.0) != Some(OBS_DIM)
            || shapes.last().map(|s| s.1) != Some(NUM_ACTIONS)
        {
            return Err(Error::Format(format!(
                "network shape mismatch: expected {OBS_DIM} inputs and {NUM_ACTIONS} outputs"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(n_in, n_out) in &shapes {
            let mut w = vec![0.0; n_in * n_out];
            for v in w.iter_mut() {
                *v = r.get_f64()?;
            }
            let mut b = vec![0.0; n_out];
            for v in b.iter_mut() {
                *v = r.get_f64()?;
            }
            layers.push(Layer { w, b, n_in, n_out });
        }
        r.finish()?;
        let net = Mlp { layers };
        if !net.is_finite() {
            return Err(Error::Format("non-finite parameters in policy file".into()));
        }
        Ok(Self {
            net,
            obs_scales,
            meta: PolicyMeta {
                label,
                theta,
                seed,
                train_steps,
            },
        })
    }
}

impl QPolicy for QFunction {
    fn q_values(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; NUM_ACTIONS]> {
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Policy(format!(
                "non-finite observation passed to policy `{}`",
                self.meta.label
            )));
        }
        Ok(self.q_unchecked(obs))
    }

    fn label(&self) -> &str {
        &self.meta.label
    }
}

/// One stored environment transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: u8,
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
}

/// Fixed-capacity ring buffer; oldest transitions are evicted first.
#[derive(Debug)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.data[idx]
    }

    /// Uniform sample of distinct indices.
    pub fn sample_indices<R: Rng>(&self, amount: usize, rng: &mut R) -> Vec<usize> {
        rand::seq::index::sample(rng, self.data.len(), amount).into_vec()
    }
}

/// DQN hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub exploration_fraction: f64,
    pub final_epsilon: f64,
    pub discount: f64,
    pub target_update_interval: u64,
    pub learning_starts: u64,
    pub updates_per_step: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            learning_rate: 6.3e-4,
            batch_size: 128,
            buffer_size: 50_000,
            exploration_fraction: 0.1,
            final_epsilon: 0.01,
            discount: 0.99,
            target_update_interval: 1000,
            learning_starts: 1000,
            updates_per_step: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_size == 0 {
            return Err(Error::Config("batch and buffer sizes must be positive".into()));
        }
        if self.batch_size > self.buffer_size {
            return Err(Error::Config("batch size exceeds buffer capacity".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction)
            || !(0.0..=1.0).contains(&self.final_epsilon)
        {
            return Err(Error::Config("exploration settings must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.target_update_interval == 0 || self.updates_per_step == 0 {
            return Err(Error::Config("update intervals must be positive".into()));
        }
        Ok(())
    }

    /// Linear decay from 1.0 to `final_epsilon` over the exploration
    /// fraction of training, constant afterwards.
    pub fn epsilon(&self, step: u64) -> f64 {
        let span = self.exploration_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return self.final_epsilon;
        }
        (1.0 - step as f64 * (1.0 - self.final_epsilon) / span).max(self.final_epsilon)
    }
}

/// One completed training episode, as written to the trace CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub steps: u64,
    pub ret: f64,
    pub epsilon: f64,
}

/// A trained policy plus its episode trace.
#[derive(Debug)]
pub struct TrainOutcome {
    pub policy: QFunction,
    pub trace: Vec<EpisodeRecord>,
}

/// Trains a Q network with DQN: epsilon-greedy exploration, uniform replay,
/// Adam on the mean-squared TD error, and a periodically synchronized target
/// copy. Fully deterministic for a given config and environment parameters.
pub fn train_dqn(
    params: &EnvParams,
    weights: &RewardWeights,
    cfg: &TrainConfig,
    label: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(&[OBS_DIM, HIDDEN_WIDTH, NUM_ACTIONS], &mut rng);
    let mut target = net.clone();
    let mut adam = Adam::new(&net, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let scales = obs_scales(params);

    let mut env = MergingEnv::new(
        params.clone(),
        *weights,
        seeds::derive(cfg.seed, "train-env"),
    );
    let mut state = env.reset();
    let mut trace = Vec::new();
    let mut ep_return = 0.0;
    let mut ep_steps = 0u64;

    let warmup = cfg.learning_starts.max(cfg.batch_size as u64);

    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut actions: Vec<usize> = Vec::with_capacity(cfg.batch_size);
    let mut targets: Vec<f64> = Vec::with_capacity(cfg.batch_size);

    for step in 0..cfg.total_steps {
        let eps = cfg.epsilon(step);
        let obs = env::observe(&state);
        let action = if rng.gen::<f64>() < eps {
            Action::from_index(rng.gen_range(0..NUM_ACTIONS)).expect("index in range")
        } else {
            let out = net.forward(&scale_obs(&obs, &scales));
            let mut q = [0.0; NUM_ACTIONS];
            q.copy_from_slice(&out);
            greedy_action(&q)
        };

        let result = env.step(action)?;
        buffer.push(Transition {
            obs,
            action: action.index() as u8,
            reward: result.reward,
            next_obs: env::observe(&result.next),
            done: result.terminal(),
        });
        ep_return += result.reward;
        ep_steps += 1;
        if result.terminal() {
            trace.push(EpisodeRecord {
                episode: trace.len() as u64,
                steps: ep_steps,
                ret: ep_return,
                epsilon: eps,
            });
            ep_return = 0.0;
            ep_steps = 0;
            state = env.reset();
        } else {
            state = result.next;
        }

        if (buffer.len() as u64) >= warmup {
            for _ in 0..cfg.updates_per_step {
                let idx = buffer.sample_indices(cfg.batch_size, &mut rng);
                inputs.clear();
                actions.clear();
                targets.clear();
                for &i in &idx {
                    let t = buffer.get(i);
                    inputs.push(scale_obs(&t.obs, &scales));
                    actions.push(t.action as usize);
                    let bootstrap = if t.done {
                        0.0
                    } else {
                        let q_next = target.forward(&scale_obs(&t.next_obs, &scales));
                        q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    };
                    targets.push(t.reward + cfg.discount * bootstrap);
                }
                let batch = TdBatch {
                    inputs: &inputs,
                    actions: &actions,
                    targets: &targets,
                };
                let (loss, grads) = td_loss_grads(&net, &batch);
                if !loss.is_finite() {
                    return Err(Error::Divergence { step, loss });
                }
                adam.step(&mut net, &grads);
            }
        }

        if (step + 1) % cfg.target_update_interval == 0 {
            target.clone_from(&net);
        }
    }

    if !net.is_finite() {
        return Err(Error::Divergence {
            step: cfg.total_steps,
            loss: f64::NAN,
        });
    }

    Ok(TrainOutcome {
        policy: QFunction::new(
            net,
            scales,
            PolicyMeta {
                label: label.to_string(),
                theta: weights.0,
                seed: cfg.seed,
                train_steps: cfg.total_steps,
            },
        ),
        trace,
    })
}

/// Writes the episode trace as CSV (`episode,steps,return,epsilon`).
pub fn save_trace(trace: &[EpisodeRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("episode,steps,return,epsilon\n");
    for rec in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.episode, rec.steps, rec.ret, rec.epsilon
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: 400,
            buffer_size: 300,
            batch_size: 16,
            learning_starts: 32,
            target_update_interval: 50,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epsilon_schedule_matches_closed_form() {
        let cfg = TrainConfig {
            total_steps: 100_000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        for step in [0u64, 1, 500, 5000, 9999, 10_000, 50_000, 100_000] {
            let expected = (1.0 - step as f64 * (0.99 / (0.1 * 100_000.0))).max(0.01);
            approx::assert_relative_eq!(cfg.epsilon(step), expected, max_relative = 1e-12);
        }
        approx::assert_relative_eq!(cfg.epsilon(10_000), 0.01, max_relative = 1e-9);
        assert_eq!(cfg.epsilon(99_999), 0.01);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_index() {
        assert_eq!(greedy_action(&[1.0; 5]), Action::Accelerate);
        assert_eq!(greedy_action(&[0.0, 3.0, 2.0, 1.0, 0.0]), Action::Decelerate);
    }

    #[test]
    fn greedy_matches_brute_force_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let mut q = [0.0; NUM_ACTIONS];
            for v in q.iter_mut() {
                *v = rng.gen_range(-10.0..=10.0);
            }
            let picked = greedy_action(&q).index();
            let mut best = 0;
            for i in 1..NUM_ACTIONS {
                if q[i] > q[best] {
                    best = i;
                }
            }
            assert_eq!(picked, best);
        }
    }

    #[test]
    fn replay_buffer_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition {
                obs: [i as f64; OBS_DIM],
                action: 0,
                reward: i as f64,
                next_obs: [0.0; OBS_DIM],
                done: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| buf.get(i).reward).collect();
        // slots hold 3, 4, 2 after wrapping; oldest (0, 1) are gone
        assert!(rewards.contains(&2.0) && rewards.contains(&3.0) && rewards.contains(&4.0));
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(Transition {
                obs: [i as f64; OBS_DIM],
                action: 0,
                reward: 0.0,
                next_obs: [0.0; OBS_DIM],
                done: false,
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut idx = buf.sample_indices(6, &mut rng);
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 6);
        }
    }

    #[test]
    fn zero_steps_returns_untrained_network() {
        let params = EnvParams::default();
        let cfg = TrainConfig {
            total_steps: 0,
            seed: 21,
            ..TrainConfig::default()
        };
        let out = train_dqn(&params, &RewardWeights::safe(), &cfg, "init").unwrap();
        assert!(out.trace.is_empty());
        // identical to a fresh initialization from the same seed
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let fresh = Mlp::new(&[OBS_DIM, HIDDEN_WIDTH, NUM_ACTIONS], &mut rng);
        let fresh_q = QFunction::new(
            fresh,
            obs_scales(&params),
            out.policy.meta().clone(),
        );
        let obs = [15.0, 0.0, 0.0, 15.0, 0.0, 25.0, 10.0, 0.0, 15.0, 0.0];
        assert_eq!(out.policy.q_values(&obs).unwrap(), fresh_q.q_values(&obs).unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let params = EnvParams::default();
        let a = train_dqn(&params, &RewardWeights::safe(), &tiny_cfg(11), "a").unwrap();
        let b = train_dqn(&params, &RewardWeights::safe(), &tiny_cfg(11), "a").unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.trace, b.trace);
        let c = train_dqn(&params, &RewardWeights::safe(), &tiny_cfg(12), "a").unwrap();
        assert_ne!(a.policy, c.policy);
    }

    #[test]
    fn non_finite_observation_is_rejected() {
        let params = EnvParams::default();
        let cfg = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        let out = train_dqn(&params, &RewardWeights::safe(), &cfg, "x").unwrap();
        let mut obs = [0.0; OBS_DIM];
        obs[3] = f64::NAN;
        assert!(out.policy.q_values(&obs).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qpol");
        let params = EnvParams::default();
        let out = train_dqn(&params, &RewardWeights::with_progress(3.0), &tiny_cfg(5), "pi_test")
            .unwrap();
        out.policy.save(&path).unwrap();
        let loaded = QFunction::load(&path).unwrap();
        assert_eq!(loaded.meta(), out.policy.meta());

        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..100 {
            let mut obs = [0.0; OBS_DIM];
            for v in obs.iter_mut() {
                *v = rng.gen_range(-50.0..=50.0);
            }
            let a = out.policy.q_values(&obs).unwrap();
            let b = loaded.q_values(&obs).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_policy_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qpol");
        let params = EnvParams::default();
        let cfg = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        let out = train_dqn(&params, &RewardWeights::safe(), &cfg, "t").unwrap();
        out.policy.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(QFunction::load(&path).is_err());
        // wrong magic
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(QFunction::load(&path).is_err());
    }
}
