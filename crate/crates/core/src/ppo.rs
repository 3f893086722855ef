//! Clipped-surrogate PPO on the navigation state vector.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use edgenav_autodiff::optim::clip_grad_norm;
use edgenav_autodiff::{Adam, Binding, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::navsim::{Action, EnvConfig, NavEnv, Observer, NUM_ACTIONS, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub horizon: usize,
    pub lr: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: Option<f64>,
    /// Stop an update once the policy drifts past this approximate KL.
    pub target_kl: Option<f64>,
    pub hidden: usize,
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 128,
            horizon: 1024,
            lr: 3e-4,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: Some(0.5),
            target_kl: None,
            hidden: 64,
            total_steps: 500_000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.minibatch == 0 || self.epochs == 0 || self.hidden == 0 {
            return Err(Error::config("horizon, minibatch, epochs and hidden must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("gamma and gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip > 0.0 && self.lr > 0.0) {
            return Err(Error::config("clip and lr must be positive"));
        }
        Ok(())
    }
}

/// Uniform-init gains giving weight std of sqrt(2), sqrt(2), 0.01 and 1
/// over sqrt(fan_in) for the trunk, actor and critic.
const INIT_GAINS: [f64; 4] = [2.449_489_742_783_178, 2.449_489_742_783_178, 0.017_320_508_075_688_77, 1.732_050_807_568_877_2];

/// Two tanh layers feeding a categorical actor and a scalar critic.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub hidden: usize,
    pub store: ParamStore,
    layers: [Linear; 4],
}

impl PolicyNet {
    fn layers(hidden: usize) -> [Linear; 4] {
        [
            Linear::new("trunk.0", STATE_DIM, hidden),
            Linear::new("trunk.1", hidden, hidden),
            Linear::new("actor", hidden, NUM_ACTIONS),
            Linear::new("critic", hidden, 1),
        ]
    }

    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let layers = Self::layers(hidden);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, gain) in layers.iter().zip(INIT_GAINS) {
            l.init_scaled(&mut store, &mut rng, gain)?;
        }
        Ok(PolicyNet { hidden, store, layers })
    }

    /// Wraps loaded parameters; names and shapes are checked on first use.
    pub fn from_store(hidden: usize, store: ParamStore) -> Result<Self> {
        let net = PolicyNet {
            hidden,
            store,
            layers: Self::layers(hidden),
        };
        for l in &net.layers {
            let w = net.store.get(&format!("{}.weight", l.name));
            if w.map(|p| p.shape.as_slice()) != Some(&[l.fout, l.fin][..]) {
                return Err(Error::config(format!("policy parameters do not match hidden width {hidden}")));
            }
        }
        Ok(net)
    }

    /// Logits `[B, a]` and values `[B, 1]` for observations `[B, STATE_DIM]`.
    pub fn forward(&self, p: &Binding<f64>, obs: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let h = self.layers[0].forward(p, obs)?.tanh();
        let h = self.layers[1].forward(p, &h)?.tanh();
        Ok((self.layers[2].forward(p, &h)?, self.layers[3].forward(p, &h)?))
    }

    /// Action probabilities and value of one observation.
    pub fn evaluate(&self, state: &[f64]) -> Result<(Vec<f64>, f64)> {
        let obs = Tensor::new(state.to_vec(), &[1, STATE_DIM])?;
        let (logits, value) = self.forward(&self.store.bind(false), &obs)?;
        Ok((logits.softmax().to_vec(), value.item()))
    }

    /// Sampled (or most likely, with `greedy`) action, its log-probability and the value.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R, greedy: bool) -> Result<(usize, f64, f64)> {
        let (probs, value) = self.evaluate(state)?;
        let a = if greedy {
            argmax(&probs)
        } else {
            sample_categorical(&probs, rng.gen::<f64>())
        };
        Ok((a, probs[a].ln(), value))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `probs` with `u` in `[0, 1)`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Episode ended after this transition.
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, action: usize, reward: f64, done: bool, log_prob: f64, value: f64) {
        self.obs.push(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.dones.push(done);
        self.log_probs.push(log_prob);
        self.values.push(value);
    }

    /// Fills advantages and returns; `last_value` bootstraps a cut episode.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        let (adv, ret) = gae(&self.rewards, &self.values, &self.dones, last_value, gamma, lambda);
        self.advantages = adv;
        self.returns = ret;
    }

    /// Rescales advantages to zero mean and unit variance.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n < 2.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt() + 1e-8;
        self.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

/// Generalized advantage estimates and value targets.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss tensors of one minibatch.
pub struct PpoLoss {
    pub total: Tensor<f64>,
    pub policy: Tensor<f64>,
    pub value: Tensor<f64>,
    pub entropy: Tensor<f64>,
    pub ratio: Vec<f64>,
}

/// Clipped surrogate, value error and entropy on `idx` of `buf`.
pub fn ppo_loss(net: &PolicyNet, p: &Binding<f64>, buf: &RolloutBuffer, idx: &[usize], cfg: &PpoConfig) -> Result<PpoLoss> {
    let b = idx.len();
    let obs: Vec<f64> = idx.iter().flat_map(|&i| buf.obs[i].iter().copied()).collect();
    let obs = Tensor::new(obs, &[b, STATE_DIM])?;
    let (logits, values) = net.forward(p, &obs)?;
    let logp_all = logits.log_softmax();
    let picks: Vec<usize> = idx.iter().enumerate().map(|(r, &i)| r * NUM_ACTIONS + buf.actions[i]).collect();
    let logp = logp_all.gather(Arc::new(picks), &[b])?;
    let old = Tensor::new(idx.iter().map(|&i| buf.log_probs[i]).collect(), &[b])?;
    let adv = Tensor::new(idx.iter().map(|&i| buf.advantages[i]).collect(), &[b])?;
    let ret = Tensor::new(idx.iter().map(|&i| buf.returns[i]).collect(), &[b, 1])?;
    let ratio = logp.sub(&old)?.exp();
    let surr1 = ratio.mul(&adv)?;
    let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip).mul(&adv)?;
    let policy = surr1.minimum(&surr2)?.mean().neg();
    let value = values.sub(&ret)?.sqr().mean();
    let probs = logp_all.exp();
    let entropy = probs.mul(&logp_all)?.sum().scale(-1.0 / b as f64);
    let total = policy.add(&value.scale(cfg.vf_coef))?.sub(&entropy.scale(cfg.ent_coef))?;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
        ratio: ratio.to_vec(),
    })
}

fn buffer_kl(net: &PolicyNet, buf: &RolloutBuffer) -> Result<f64> {
    let all: Vec<usize> = (0..buf.len()).collect();
    let p = net.store.bind(false);
    let l = ppo_loss(net, &p, buf, &all, &PpoConfig::default())?;
    Ok(l.ratio.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / all.len() as f64)
}

/// `cfg.epochs` passes of shuffled minibatches over `buf`.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buf.advantages.len() != buf.len() {
        return Err(Error::contract("ppo_update", "advantages not computed; call finish first"));
    }
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    let mut sums = [0.0f64; 5];
    let mut batches = 0usize;
    'outer: for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for mb in idx.chunks(cfg.minibatch) {
            let p = net.store.bind::<f64>(true);
            let l = ppo_loss(net, &p, buf, mb, cfg)?;
            if !l.total.item().is_finite() {
                return Err(Error::contract("ppo_update", format!("non-finite loss {}", l.total.item())));
            }
            l.total.backward()?;
            let mut grads = p.grads();
            if let Some(m) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, m);
            }
            let before = cfg.target_kl.map(|_| net.store.clone());
            adam.step(&mut net.store, &grads)?;
            if let (Some(bound), Some(prev)) = (cfg.target_kl, before) {
                if buffer_kl(net, buf)? > bound {
                    net.store = prev;
                    break 'outer;
                }
            }
            let n = l.ratio.len() as f64;
            sums[0] += l.policy.item();
            sums[1] += l.value.item();
            sums[2] += l.entropy.item();
            sums[3] += l.ratio.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / n;
            sums[4] += l.ratio.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
            batches += 1;
        }
    }
    let k = batches.max(1) as f64;
    let mut stats = UpdateStats {
        policy_loss: sums[0] / k,
        value_loss: sums[1] / k,
        entropy: sums[2] / k,
        clip_fraction: sums[3] / k,
        approx_kl: sums[4] / k,
    };
    if cfg.target_kl.is_some() {
        stats.approx_kl = buffer_kl(net, buf)?;
    }
    Ok(stats)
}

/// Episode bookkeeping carried across rollouts.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTracker {
    current_return: f64,
    /// (return, success) of the most recent episodes, newest last.
    pub recent: VecDeque<(f64, bool)>,
    pub episodes: usize,
}

impl EpisodeTracker {
    const WINDOW: usize = 100;

    fn record(&mut self, reward: f64, done: bool, success: bool) {
        self.current_return += reward;
        if done {
            if self.recent.len() == Self::WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back((self.current_return, success));
            self.current_return = 0.0;
            self.episodes += 1;
        }
    }

    /// Mean return over the window; 0 before any episode ends.
    pub fn mean_return(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        self.recent.iter().map(|r| r.0).sum::<f64>() / self.recent.len() as f64
    }

    /// Success rate over the window; 0 before any episode ends.
    pub fn success_rate(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        self.recent.iter().filter(|r| r.1).count() as f64 / self.recent.len() as f64
    }
}

/// Runs `horizon` steps from the env's current state.
pub fn collect_rollout<R: Rng + ?Sized>(
    env: &mut NavEnv,
    obs: &mut Vec<f64>,
    net: &PolicyNet,
    observer: &Observer,
    cfg: &PpoConfig,
    rng: &mut R,
    tracker: &mut EpisodeTracker,
) -> Result<RolloutBuffer> {
    let mut buf = RolloutBuffer::default();
    for _ in 0..cfg.horizon {
        let (a, logp, v) = net.act(obs, rng, false)?;
        let res = env.step(Action::from_index(a)?, observer)?;
        tracker.record(res.reward, res.done, res.success);
        buf.push(std::mem::take(obs), a, res.reward, res.done, logp, v);
        *obs = if res.done {
            env.reset(observer)?.state_vector
        } else {
            res.observation.state_vector
        };
    }
    let last_value = if buf.dones.last() == Some(&true) { 0.0 } else { net.evaluate(obs)?.1 };
    buf.finish(last_value, cfg.gamma, cfg.gae_lambda);
    Ok(buf)
}

/// One row of the policy-training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub success_rate_100: f64,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

pub struct PolicyOutcome {
    pub policy: PolicyNet,
    pub history: Vec<IterRecord>,
    /// Success over the last 100 training episodes.
    pub final_success_rate: f64,
}

/// Alternates rollouts and updates for `total_steps / horizon` iterations.
pub fn train_policy(
    env_cfg: &EnvConfig,
    observer: &Observer,
    cfg: &PpoConfig,
    log_csv: Option<&PathBuf>,
    verbose: bool,
) -> Result<PolicyOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = NavEnv::new(env_cfg.clone(), rng.gen())?;
    let mut net = PolicyNet::new(cfg.hidden, rng.gen())?;
    let mut adam = Adam::new(cfg.lr);
    let mut tracker = EpisodeTracker::default();
    let mut obs = env.reset(observer)?.state_vector;
    let mut log = match log_csv {
        Some(path) => Some(csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?),
        None => None,
    };
    let iterations = cfg.total_steps / cfg.horizon;
    let mut history = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let mut buf = collect_rollout(&mut env, &mut obs, &net, observer, cfg, &mut rng, &mut tracker)?;
        buf.normalize_advantages();
        let stats = ppo_update(&mut net, &mut adam, &buf, cfg, &mut rng)?;
        let rec = IterRecord {
            iteration: it,
            steps: it * cfg.horizon,
            mean_return: tracker.mean_return(),
            success_rate_100: tracker.success_rate(),
            episodes: tracker.episodes,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
        };
        if verbose {
            eprintln!(
                "iter {it:4}  steps {:7}  return {:8.3}  success {:.2}  episodes {}  entropy {:.3}",
                rec.steps, rec.mean_return, rec.success_rate_100, rec.episodes, rec.entropy
            );
        }
        if let (Some(w), Some(path)) = (log.as_mut(), log_csv) {
            w.serialize(rec).and_then(|_| Ok(w.flush()?)).map_err(|e| Error::data(path, e.to_string()))?;
        }
        history.push(rec);
    }
    Ok(PolicyOutcome {
        policy: net,
        history,
        final_success_rate: tracker.success_rate(),
    })
}

/// Fraction of `episodes` greedy rollouts that end at the correct goal.
/// Episode `k` starts from a layout seeded by `seed + k`.
pub fn eval_success_rate(
    env_cfg: &EnvConfig,
    policy: &PolicyNet,
    episodes: usize,
    seed: u64,
    observer: &Observer,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    eval_controller(env_cfg, episodes, seed, observer, |s| Ok(policy.act(s, &mut rng, true)?.0))
}

/// [`eval_success_rate`] for any controller mapping a state vector to an
/// action index.
pub fn eval_controller<F>(env_cfg: &EnvConfig, episodes: usize, seed: u64, observer: &Observer, mut choose: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<usize>,
{
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut wins = 0usize;
    for k in 0..episodes {
        let mut env = NavEnv::new(env_cfg.clone(), seed.wrapping_add(k as u64))?;
        let st = env.state.clone();
        let mut obs = env.reset_to(st, observer)?.state_vector;
        loop {
            let res = env.step(Action::from_index(choose(&obs)?)?, observer)?;
            if res.done {
                wins += res.success as usize;
                break;
            }
            obs = res.observation.state_vector;
        }
    }
    Ok(wins as f64 / episodes as f64)
}
