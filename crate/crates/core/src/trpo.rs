//! Trust-region policy optimization: rollouts, GAE, natural-gradient steps, training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use deskpick_nn::checkpoint::{read_tensors, write_tensors};
use deskpick_nn::{Activation, Adam, LayerSpec, Network, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumSpec, CurriculumState};
use crate::env::{Env, EpisodeConfig, RewardMode, SimSettings, Task};
use crate::perception::FrozenEncoder;
use crate::policy::{gaussian_log_prob, kl_var, log_prob_var, GaussianPolicy, PolicyConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrpoConfig {
    /// Trust-region radius on the mean KL.
    pub max_kl: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub normalize_advantages: bool,
    pub value_hidden: [usize; 2],
    pub value_lr: f64,
    pub value_epochs: usize,
    pub value_batch: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            max_kl: 1e-2,
            gamma: 0.99,
            gae_lambda: 0.97,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            batch_size: 20_000,
            workers: 1,
            normalize_advantages: true,
            value_hidden: [64, 64],
            value_lr: 1e-3,
            value_epochs: 5,
            value_batch: 256,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.max_kl > 0.0) {
            return bad("trpo.max_kl must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("trpo.gamma and trpo.gae_lambda must lie in [0, 1]");
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad("trpo.backtrack_ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.workers == 0 || self.max_backtracks == 0 {
            return bad("trpo.batch_size, trpo.workers and trpo.max_backtracks must be >= 1");
        }
        if !(self.cg_damping >= 0.0) {
            return bad("trpo.cg_damping must be >= 0");
        }
        Ok(())
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` given as a product.
pub fn conjugate_gradient<F>(mut avp: F, b: &[f64], iters: usize, residual_tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr <= residual_tol * residual_tol {
            break;
        }
        let ap = avp(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generalized advantage estimates and value targets.
///
/// `ends[t]` marks the last step of an episode; episodes never bootstrap.
pub fn gae(rewards: &[f64], values: &[f64], ends: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let (mut next_v, mut next_a) = (0.0, 0.0);
    for t in (0..n).rev() {
        if ends[t] {
            next_v = 0.0;
            next_a = 0.0;
        }
        let delta = rewards[t] + gamma * next_v - values[t];
        next_a = delta + gamma * lambda * next_a;
        adv[t] = next_a;
        next_v = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Shifts and scales to zero mean and unit variance; returns `false` and
/// leaves the input untouched when the variance is degenerate.
pub fn normalize_advantages(adv: &mut [f64]) -> bool {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return false;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    if var.sqrt() < 1e-10 {
        return false;
    }
    let sd = var.sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    true
}

/// State-value regression network.
#[derive(Clone, Debug)]
pub struct ValueBaseline {
    net: Network,
    pub store: ParamStore,
}

impl ValueBaseline {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: [usize; 2], rng: &mut R) -> Result<Self> {
        let specs = [
            LayerSpec::dense(obs_dim, hidden[0], Activation::Relu),
            LayerSpec::dense(hidden[0], hidden[1], Activation::Relu),
            LayerSpec::dense(hidden[1], 1, Activation::Identity),
        ];
        let mut store = ParamStore::new();
        let net = Network::build("value", &[obs_dim], &specs, &mut store, rng)?;
        Ok(Self { net, store })
    }

    pub fn predict(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.infer(&self.store, obs)?.into_data())
    }

    /// Adam regression onto `targets`; returns the final-epoch mean loss.
    pub fn fit<R: Rng + ?Sized>(&mut self, obs: &Tensor, targets: &[f64], cfg: &TrpoConfig, rng: &mut R) -> Result<f64> {
        let d = obs.shape()[1];
        let adam = Adam::with_lr(cfg.value_lr);
        let mut order: Vec<usize> = (0..targets.len()).collect();
        let mut last = 0.0;
        for _ in 0..cfg.value_epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.value_batch.max(1)) {
                let mut x = Vec::with_capacity(chunk.len() * d);
                for &i in chunk {
                    x.extend_from_slice(&obs.data()[i * d..(i + 1) * d]);
                }
                let y: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let tape = Tape::new();
                let xv = tape.constant(Tensor::new(vec![chunk.len(), d], x));
                let pred = self.net.forward(&tape, &self.store, xv)?;
                let yv = tape.constant(Tensor::new(vec![chunk.len(), 1], y));
                let loss = tape.mean(tape.square(tape.sub(pred, yv)));
                sum += tape.value(loss).item() * chunk.len() as f64;
                self.store.zero_grad();
                tape.backward_into(loss, &mut self.store)?;
                adam.step_all(&mut self.store)?;
            }
            last = sum / targets.len().max(1) as f64;
        }
        Ok(last)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub stage: usize,
    pub ret: f64,
    pub length: usize,
    pub success: bool,
}

/// Concatenated complete episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    /// Pre-clamp samples the log-probabilities refer to.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub ends: Vec<bool>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.obs_dim], self.obs.clone())
    }

    pub fn action_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.act_dim], self.actions.clone())
    }

    fn append(&mut self, other: RolloutBatch) {
        self.obs_dim = other.obs_dim;
        self.act_dim = other.act_dim;
        self.obs.extend(other.obs);
        self.actions.extend(other.actions);
        self.log_probs.extend(other.log_probs);
        self.rewards.extend(other.rewards);
        self.ends.extend(other.ends);
        self.episodes.extend(other.episodes);
    }
}

/// Per-worker random streams for scenes and action noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerStreams {
    pub scene: ChaCha8Rng,
    pub policy: ChaCha8Rng,
}

impl WorkerStreams {
    pub fn new(seed: u64, worker: usize) -> Self {
        let stream = |kind: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(kind + 16 * worker as u64);
            r
        };
        Self {
            scene: stream(1),
            policy: stream(2),
        }
    }
}

fn collect_worker(
    policy: &GaussianPolicy,
    env: &mut Env,
    streams: &mut WorkerStreams,
    cfg: &EpisodeConfig,
    stage: usize,
    quota: usize,
) -> Result<RolloutBatch> {
    let mut b = RolloutBatch {
        obs_dim: env.obs_dim(),
        act_dim: policy.act_dim(),
        ..Default::default()
    };
    while b.len() < quota {
        let mut obs = env.reset(*cfg, streams.scene.random());
        let mut summary = EpisodeSummary {
            stage,
            ret: 0.0,
            length: 0,
            success: false,
        };
        loop {
            let s = policy.sample(&obs, &mut streams.policy)?;
            let tr = env.step(&s.action)?;
            b.obs.extend_from_slice(&obs);
            b.actions.extend_from_slice(&s.raw);
            b.log_probs.push(s.log_prob);
            b.rewards.push(tr.info.reward);
            b.ends.push(tr.info.terminal);
            summary.ret += tr.info.reward;
            summary.length += 1;
            obs = tr.observation;
            if tr.info.terminal {
                summary.success = tr.info.success;
                break;
            }
        }
        b.episodes.push(summary);
    }
    Ok(b)
}

/// Runs complete episodes until at least `batch_size` steps are gathered,
/// split across `envs.len()` workers and merged in worker order.
pub fn collect(
    policy: &GaussianPolicy,
    envs: &mut [Env],
    streams: &mut [WorkerStreams],
    cfg: &EpisodeConfig,
    stage: usize,
    batch_size: usize,
) -> Result<RolloutBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n = envs.len();
    assert_eq!(n, streams.len(), "one stream set per worker");
    let quota = |w: usize| batch_size / n + usize::from(w < batch_size % n);
    let parts: Vec<Result<RolloutBatch>> = if n == 1 {
        vec![collect_worker(policy, &mut envs[0], &mut streams[0], cfg, stage, batch_size)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = envs
                .iter_mut()
                .zip(streams.iter_mut())
                .enumerate()
                .map(|(w, (env, st))| s.spawn(move || collect_worker(policy, env, st, cfg, stage, quota(w))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
        })
    };
    let mut out = RolloutBatch::default();
    for p in parts {
        out.append(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub accepted: bool,
    pub kl_after: f64,
    pub surrogate_improvement: f64,
    pub backtracks: usize,
    pub grad_norm: f64,
}

/// Scales the CG solution of `(F + damping·I) x = g` to the trust-region boundary.
pub fn trust_region_step<F>(g: &[f64], mut fvp: F, cfg: &TrpoConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let x = conjugate_gradient(&mut fvp, g, cfg.cg_iters, 1e-10)?;
    let shs = dot(&x, &fvp(&x)?);
    if !(shs > 0.0) || !shs.is_finite() {
        return Err(Error::NonFinite(format!("curvature xᵀFx = {shs}")));
    }
    let scale = (2.0 * cfg.max_kl / shs).sqrt();
    Ok(x.into_iter().map(|v| v * scale).collect())
}

/// Mean-KL Hessian products around the current policy over an observation batch.
pub struct FisherOperator<'p> {
    policy: &'p GaussianPolicy,
    tape: Tape,
    params: Vec<Var>,
    grads: Vec<Var>,
    damping: f64,
}

impl<'p> FisherOperator<'p> {
    pub fn new(policy: &'p GaussianPolicy, obs: &Tensor, damping: f64) -> Result<Self> {
        let old_mean = policy.mean_batch(obs)?;
        let old_ls = policy.log_std().to_vec();
        let tape = Tape::new();
        let params = policy.param_vars(&tape);
        let (m, ls) = policy.dist_with(&tape, &params, tape.constant(obs.clone()))?;
        let kl = kl_var(&tape, &old_mean, &old_ls, m, ls);
        let grads = tape.grad_graph(kl, &params)?;
        Ok(Self {
            policy,
            tape,
            params,
            grads,
            damping,
        })
    }

    /// `(F + damping·I) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let t = &self.tape;
        let mut offset = 0;
        let mut total = None;
        for &g in &self.grads {
            let shape = t.shape(g);
            let len: usize = shape.iter().product();
            let vv = t.constant(Tensor::new(shape, v[offset..offset + len].to_vec()));
            offset += len;
            let term = t.sum(t.mul(g, vv));
            total = Some(match total {
                None => term,
                Some(acc) => t.add(acc, term),
            });
        }
        let total = total.ok_or(Error::Config("policy has no parameters".into()))?;
        let hv = t.backward(total)?;
        let mut out = Vec::with_capacity(v.len());
        for &p in &self.params {
            match hv.get(p) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.value(p).len())),
            }
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        Ok(out)
    }

    pub fn policy(&self) -> &GaussianPolicy {
        self.policy
    }
}

/// `mean(exp(logπ − logπ_old) · A)` evaluated without a tape.
pub fn surrogate(policy: &GaussianPolicy, obs: &Tensor, actions: &Tensor, old_logp: &[f64], adv: &[f64]) -> Result<f64> {
    let means = policy.mean_batch(obs)?;
    let d = policy.act_dim();
    let ls = policy.log_std();
    let total: f64 = means
        .data()
        .chunks(d)
        .zip(actions.data().chunks(d))
        .zip(old_logp.iter().zip(adv))
        .map(|((m, a), (lo, ad))| (gaussian_log_prob(m, ls, a) - lo).exp() * ad)
        .sum();
    Ok(total / adv.len() as f64)
}

/// Surrogate value and its gradient with respect to the flat parameters.
pub fn surrogate_gradient(
    policy: &GaussianPolicy,
    obs: &Tensor,
    actions: &Tensor,
    old_logp: &[f64],
    adv: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = adv.len();
    let tape = Tape::new();
    let params = policy.param_vars(&tape);
    let (m, ls) = policy.dist_with(&tape, &params, tape.constant(obs.clone()))?;
    let lp = log_prob_var(&tape, m, ls, tape.constant(actions.clone()));
    let ratio = tape.exp(tape.sub(lp, tape.constant(Tensor::new(vec![n], old_logp.to_vec()))));
    let obj = tape.mean(tape.mul(ratio, tape.constant(Tensor::new(vec![n], adv.to_vec()))));
    let value = tape.value(obj).item();
    let grads = tape.backward(obj)?;
    let mut flat = Vec::new();
    for &p in &params {
        match grads.get(p) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(0.0, tape.value(p).len())),
        }
    }
    Ok((value, flat))
}

/// One KL-constrained natural-gradient update. Parameters are untouched
/// unless a line-search candidate is accepted.
pub fn natural_step(
    policy: &mut GaussianPolicy,
    batch: &RolloutBatch,
    adv: &[f64],
    cfg: &TrpoConfig,
) -> Result<UpdateReport> {
    let obs = batch.obs_tensor();
    let actions = batch.action_tensor();
    let (l_old, g) = surrogate_gradient(policy, &obs, &actions, &batch.log_probs, adv)?;
    let grad_norm = dot(&g, &g).sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    let mut report = UpdateReport {
        grad_norm,
        ..Default::default()
    };
    if grad_norm == 0.0 {
        return Ok(report);
    }
    let step = {
        let fisher = FisherOperator::new(policy, &obs, cfg.cg_damping)?;
        trust_region_step(&g, |v| fisher.apply(v), cfg)?
    };
    let theta_old = policy.flat_params();
    let old = policy.clone();
    let mut frac = 1.0;
    for k in 0..cfg.max_backtracks {
        let cand: Vec<f64> = theta_old.iter().zip(&step).map(|(t, s)| t + frac * s).collect();
        policy.set_flat_params(&cand);
        let kl = old.kl(policy, &obs)?;
        let improvement = surrogate(policy, &obs, &actions, &batch.log_probs, adv)? - l_old;
        report.backtracks = k;
        report.kl_after = kl;
        report.surrogate_improvement = improvement;
        if kl.is_finite() && kl <= cfg.max_kl && improvement > 0.0 {
            report.accepted = true;
            return Ok(report);
        }
        frac *= cfg.backtrack_ratio;
    }
    policy.set_flat_params(&theta_old);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub reward_mode: RewardMode,
    pub curriculum: CurriculumSpec,
    pub trpo: TrpoConfig,
    pub policy: PolicyConfig,
    pub sim: SimSettings,
    pub max_env_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Full,
            reward_mode: RewardMode::Sparse,
            curriculum: CurriculumSpec::default(),
            trpo: TrpoConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimSettings::default(),
            max_env_steps: 300_000,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub env_steps: u64,
    /// Window rate after this batch, or the rate that triggered an advancement.
    pub success_rate_window: f64,
    /// Curriculum step used for this batch.
    pub lambda: f64,
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    pub mean_return: f64,
    pub stage: usize,
    pub episodes: usize,
    pub batch_success_rate: f64,
    pub accepted: bool,
    pub backtracks: usize,
    pub advanced: bool,
    pub entropy: f64,
    pub value_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub stage: usize,
    pub rate: f64,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    format: u32,
    config: TrainConfig,
    iteration: usize,
    env_steps: u64,
    curriculum: CurriculumState,
    streams: Vec<WorkerStreams>,
    value_rng: ChaCha8Rng,
    log: Vec<IterationLog>,
    best: Option<BestSnapshot>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub policy: GaussianPolicy,
    pub value: ValueBaseline,
    pub curriculum: CurriculumState,
    pub iteration: usize,
    pub env_steps: u64,
    pub log: Vec<IterationLog>,
    pub best: Option<BestSnapshot>,
    streams: Vec<WorkerStreams>,
    value_rng: ChaCha8Rng,
    envs: Vec<Env>,
}

impl Trainer {
    /// Fresh run; `init` warm-starts the policy.
    pub fn new(config: TrainConfig, encoder: Arc<FrozenEncoder>, init: Option<GaussianPolicy>) -> Result<Self> {
        config.trpo.validate()?;
        config.curriculum.validate()?;
        let obs_dim = encoder.latent_dim() + 1;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(3);
        let policy = match init {
            Some(p) => {
                if p.task != config.task || p.obs_dim() != obs_dim {
                    return Err(Error::Config("initial policy does not match task or observation size".into()));
                }
                p
            }
            None => GaussianPolicy::new(obs_dim, config.task, config.policy.clone(), &mut init_rng)?,
        };
        let value = ValueBaseline::new(obs_dim, config.trpo.value_hidden, &mut init_rng)?;
        let mut value_rng = ChaCha8Rng::seed_from_u64(config.seed);
        value_rng.set_stream(4);
        let curriculum = CurriculumState::new(config.curriculum);
        let streams = (0..config.trpo.workers).map(|w| WorkerStreams::new(config.seed, w)).collect();
        let envs = Self::make_envs(&config, &curriculum, encoder)?;
        Ok(Self {
            config,
            policy,
            value,
            curriculum,
            iteration: 0,
            env_steps: 0,
            log: Vec::new(),
            best: None,
            streams,
            value_rng,
            envs,
        })
    }

    fn make_envs(config: &TrainConfig, cur: &CurriculumState, encoder: Arc<FrozenEncoder>) -> Result<Vec<Env>> {
        let cfg = EpisodeConfig::new(cur.params(), config.reward_mode, config.task);
        (0..config.trpo.workers)
            .map(|_| {
                Env::builder()
                    .config(cfg)
                    .settings(config.sim)
                    .encoder(encoder.clone())
                    .build()
            })
            .collect()
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig::new(self.curriculum.params(), self.config.reward_mode, self.config.task)
    }

    pub fn finished(&self) -> bool {
        self.env_steps >= self.config.max_env_steps
    }

    /// collect → advantages → natural step, plus curriculum bookkeeping.
    pub fn iterate(&mut self) -> Result<IterationLog> {
        let stage = self.curriculum.k;
        let lambda = self.curriculum.lambda();
        let ep_cfg = self.episode_config();
        let batch = collect(
            &self.policy,
            &mut self.envs,
            &mut self.streams,
            &ep_cfg,
            stage,
            self.config.trpo.batch_size,
        )?;
        let obs = batch.obs_tensor();
        let values = self.value.predict(&obs)?;
        let (mut adv, targets) = gae(
            &batch.rewards,
            &values,
            &batch.ends,
            self.config.trpo.gamma,
            self.config.trpo.gae_lambda,
        );
        if self.config.trpo.normalize_advantages {
            normalize_advantages(&mut adv);
        }
        let theta_before = self.policy.flat_params();
        let report = match natural_step(&mut self.policy, &batch, &adv, &self.config.trpo) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => UpdateReport::default(),
            Err(e) => return Err(e),
        };
        let value_loss = self.value.fit(&obs, &targets, &self.config.trpo, &mut self.value_rng)?;

        let mut advanced = false;
        for ep in &batch.episodes {
            advanced |= self.curriculum.record(ep.stage, ep.success);
        }
        let window_rate = if advanced {
            self.curriculum.last_trigger_rate.unwrap_or(0.0)
        } else {
            self.curriculum.window_rate().unwrap_or(0.0)
        };
        self.env_steps += batch.len() as u64;
        let n_ep = batch.episodes.len();
        let successes = batch.episodes.iter().filter(|e| e.success).count();
        let row = IterationLog {
            iteration: self.iteration,
            env_steps: self.env_steps,
            success_rate_window: window_rate,
            lambda,
            mean_kl: report.kl_after,
            surrogate_improvement: report.surrogate_improvement,
            mean_return: batch.episodes.iter().map(|e| e.ret).sum::<f64>() / n_ep as f64,
            stage,
            episodes: n_ep,
            batch_success_rate: successes as f64 / n_ep as f64,
            accepted: report.accepted,
            backtracks: report.backtracks,
            advanced,
            entropy: self.policy.entropy(),
            value_loss,
        };
        // The snapshot is the policy that produced this batch's window.
        let enough = self.curriculum.window_len() * 2 >= self.config.curriculum.window || advanced;
        if enough {
            let better = self
                .best
                .as_ref()
                .is_none_or(|b| (stage, window_rate) > (b.stage, b.rate));
            if better {
                self.best = Some(BestSnapshot {
                    iteration: self.iteration,
                    stage,
                    rate: window_rate,
                    params: theta_before,
                });
            }
        }
        self.iteration += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    pub fn run<F: FnMut(&IterationLog)>(&mut self, mut on_iteration: F) -> Result<()> {
        while !self.finished() {
            let row = self.iterate()?;
            on_iteration(&row);
        }
        Ok(())
    }

    /// Best policy by (curriculum stage, windowed success), or the current one.
    pub fn best_policy(&self) -> GaussianPolicy {
        let mut p = self.policy.clone();
        if let Some(b) = &self.best {
            p.set_flat_params(&b.params);
        }
        p
    }

    pub fn log_csv(&self) -> Result<String> {
        log_to_csv(&self.log)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.policy.save(&dir.join("policy"))?;
        let mut w = BufWriter::new(File::create(dir.join("value.bin"))?);
        write_tensors(&mut w, &self.value.store.to_entries_with_optimizer())?;
        w.flush()?;
        let state = TrainerState {
            format: 1,
            config: self.config.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            curriculum: self.curriculum.clone(),
            streams: self.streams.clone(),
            value_rng: self.value_rng.clone(),
            log: self.log.clone(),
            best: self.best.clone(),
        };
        std::fs::write(dir.join("state.json"), serde_json::to_string(&state)?)?;
        Ok(())
    }

    pub fn resume(dir: &Path, encoder: Arc<FrozenEncoder>) -> Result<Self> {
        let state: TrainerState = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
        if state.format != 1 {
            return Err(Error::Format(format!("unsupported trainer state {}", state.format)));
        }
        let policy = GaussianPolicy::load(&dir.join("policy"))?;
        let mut t = Self::new(state.config, encoder, Some(policy))?;
        t.value
            .store
            .load_entries_with_optimizer(&read_tensors(BufReader::new(File::open(dir.join("value.bin"))?))?)?;
        t.iteration = state.iteration;
        t.env_steps = state.env_steps;
        t.curriculum = state.curriculum;
        t.streams = state.streams;
        t.value_rng = state.value_rng;
        t.log = state.log;
        t.best = state.best;
        Ok(t)
    }
}

pub fn log_to_csv(rows: &[IterationLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_diag() {
        let x = conjugate_gradient(|v| Ok(vec![2.0 * v[0], 4.0 * v[1]]), &[2.0, 4.0], 2, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_fisher_step_scaling() {
        let cfg = TrpoConfig { cg_damping: 0.0, ..Default::default() };
        let g = [0.3, -0.4, 1.2];
        let s = trust_region_step(&g, |v| Ok(v.to_vec()), &cfg).unwrap();
        let k = (2.0 * cfg.max_kl / dot(&g, &g)).sqrt();
        for (a, b) in s.iter().zip(g) {
            assert!((a - k * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_examples() {
        let (a, _) = gae(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 1.0, 1.0);
        assert_eq!(a, vec![2.0, 1.0]);
        let r = [1.0, 2.0, 3.0];
        let (a, t) = gae(&r, &[6.0, 5.0, 3.0], &[false, false, true], 1.0, 0.5);
        assert!(a.iter().all(|x| x.abs() < 1e-15));
        assert_eq!(t, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn degenerate_normalization_is_skipped() {
        let mut a = vec![0.5; 4];
        assert!(!normalize_advantages(&mut a));
        assert_eq!(a, vec![0.5; 4]);
        let mut b = vec![1.0, 2.0, 3.0];
        assert!(normalize_advantages(&mut b));
        assert!(b.iter().sum::<f64>().abs() < 1e-12);
    }
}
