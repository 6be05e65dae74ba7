//! Diagonal Gaussian control policy, simplified-task teacher and behavioral cloning.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use deskpick_nn::checkpoint::DType;
use deskpick_nn::{Activation, Adam, LayerSpec, Network, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Env, Task};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: [usize; 2],
    pub init_log_std: f64,
    /// Exploration level restored after cloning.
    pub bc_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 64],
            init_log_std: 0.35f64.ln(),
            bc_log_std: 0.6f64.ln(),
        }
    }
}

/// `tanh`-bounded mean network plus a global log standard deviation.
#[derive(Clone, Debug)]
pub struct GaussianPolicy {
    pub config: PolicyConfig,
    pub task: Task,
    obs_dim: usize,
    act_dim: usize,
    /// Outputs the pre-`tanh` mean.
    net: Network,
    log_std: ParamId,
    pub store: ParamStore,
}

/// Log-density of `x` under a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), v)| {
            let z = (v - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `KL(old ‖ new)` between diagonal Gaussians.
pub fn gaussian_kl(mean_old: &[f64], ls_old: &[f64], mean_new: &[f64], ls_new: &[f64]) -> f64 {
    (0..mean_old.len())
        .map(|i| {
            let d = mean_old[i] - mean_new[i];
            ls_new[i] - ls_old[i] + ((2.0 * ls_old[i]).exp() + d * d) / (2.0 * (2.0 * ls_new[i]).exp()) - 0.5
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln())).sum()
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: {v:?}")))
    }
}

/// Policy output for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Clamped to `[-1, 1]`.
    pub action: Vec<f64>,
    /// Pre-clamp draw.
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyManifest {
    format: u32,
    task: Task,
    obs_dim: usize,
    act_dim: usize,
    config: PolicyConfig,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, task: Task, config: PolicyConfig, rng: &mut R) -> Result<Self> {
        let act_dim = task.action_dim();
        let [h0, h1] = config.hidden;
        let specs = [
            LayerSpec::dense(obs_dim, h0, Activation::Relu),
            LayerSpec::dense(h0, h1, Activation::Relu),
            LayerSpec::dense(h1, act_dim, Activation::Identity),
        ];
        let mut store = ParamStore::new();
        let net = Network::build("policy", &[obs_dim], &specs, &mut store, rng)?;
        // Small output weights so the initial means sit near zero.
        let out_w = net.param_ids()[4];
        for w in store.value_mut(out_w).data_mut() {
            *w *= 0.01;
        }
        let log_std = store.add("policy.log_std", Tensor::full(&[act_dim], config.init_log_std));
        Ok(Self {
            config,
            task,
            obs_dim,
            act_dim,
            net,
            log_std,
            store,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Trainable parameters: mean network then log_std.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.net.param_ids();
        ids.push(self.log_std);
        ids
    }

    pub fn mean_param_ids(&self) -> Vec<ParamId> {
        self.net.param_ids()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.store.flat_values(&self.param_ids())
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let ids = self.param_ids();
        self.store.set_flat_values(&ids, flat);
    }

    pub fn log_std(&self) -> &[f64] {
        self.store.value(self.log_std).data()
    }

    pub fn set_log_std(&mut self, value: f64) {
        self.store.value_mut(self.log_std).data_mut().fill(value);
    }

    fn check_obs(&self, n: usize) -> Result<()> {
        if n != self.obs_dim {
            return Err(Error::Config(format!(
                "observation has {n} features, policy expects {}",
                self.obs_dim
            )));
        }
        Ok(())
    }

    /// `tanh` means for a `[n, obs_dim]` batch.
    pub fn mean_batch(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(self.net.infer(&self.store, obs)?.map(f64::tanh))
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs.len())?;
        let m = self.mean_batch(&Tensor::new(vec![1, self.obs_dim], obs.to_vec()))?.into_data();
        check_finite("policy mean", &m)?;
        Ok(m)
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Sample> {
        let mean = self.mean(obs)?;
        let ls = self.log_std();
        check_finite("policy log_std", ls)?;
        let raw: Vec<f64> = mean
            .iter()
            .zip(ls)
            .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_prob = gaussian_log_prob(&mean, ls, &raw);
        Ok(Sample {
            action: raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            raw,
            log_prob,
        })
    }

    /// Mean action, clamped (a no-op for `tanh` means).
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean(obs)
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(self.log_std())
    }

    /// Parameter leaves on `tape`, ordered as [`GaussianPolicy::param_ids`].
    pub fn param_vars(&self, tape: &Tape) -> Vec<Var> {
        self.param_ids().into_iter().map(|id| tape.param(&self.store, id)).collect()
    }

    /// `(tanh mean [n, d], log_std [d])` recorded with the given parameter leaves.
    pub fn dist_with(&self, tape: &Tape, params: &[Var], obs: Var) -> Result<(Var, Var)> {
        let (net_params, ls) = params.split_at(params.len() - 1);
        let pre = self.net.forward_with(tape, net_params, obs)?;
        Ok((tape.tanh(pre), ls[0]))
    }

    /// Pre-`tanh` means recorded with the given parameter leaves.
    pub fn pre_mean_with(&self, tape: &Tape, params: &[Var], obs: Var) -> Result<Var> {
        Ok(self.net.forward_with(tape, &params[..params.len() - 1], obs)?)
    }

    /// Mean KL between `self` and `other` over an observation batch.
    pub fn kl(&self, other: &GaussianPolicy, obs: &Tensor) -> Result<f64> {
        let (ma, mb) = (self.mean_batch(obs)?, other.mean_batch(obs)?);
        let d = self.act_dim;
        let n = obs.shape()[0];
        let total: f64 = ma
            .data()
            .chunks(d)
            .zip(mb.data().chunks(d))
            .map(|(a, b)| gaussian_kl(a, self.log_std(), b, other.log_std()))
            .sum();
        Ok(total / n as f64)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let manifest = PolicyManifest {
            format: 1,
            task: self.task,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            config: self.config.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
        self.store.save(&mut w, DType::F64)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let m: PolicyManifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if m.format != 1 {
            return Err(Error::Format(format!("unsupported policy manifest {}", m.format)));
        }
        let mut p = Self::new(m.obs_dim, m.task, m.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if p.act_dim != m.act_dim {
            return Err(Error::Format("policy manifest action dim disagrees with task".into()));
        }
        p.store.load(BufReader::new(File::open(stem.with_extension("bin"))?))?;
        Ok(p)
    }
}

/// Records `log π(a|s)` per row, `[n]`.
pub fn log_prob_var(tape: &Tape, mean: Var, log_std: Var, actions: Var) -> Var {
    let shape = tape.shape(mean);
    let (n, d) = (shape[0], shape[1]);
    let ls = tape.broadcast_rows(log_std, n);
    let z = tape.mul(tape.sub(actions, mean), tape.exp(tape.neg(ls)));
    let quad = tape.scale(tape.sum_cols(tape.square(z)), -0.5);
    let norm = tape.add_scalar(tape.sum(log_std), 0.5 * d as f64 * (2.0 * PI).ln());
    tape.sub(quad, tape.expand(norm, &[n]))
}

/// Records the batch-mean `KL(old ‖ new)` with `old` held constant.
pub fn kl_var(tape: &Tape, old_mean: &Tensor, old_log_std: &[f64], mean: Var, log_std: Var) -> Var {
    let (n, d) = (old_mean.shape()[0], old_mean.shape()[1]);
    let var_old: Vec<f64> = old_log_std.iter().map(|l| (2.0 * l).exp()).collect();
    let var_old = tape.constant(Tensor::new(vec![n, d], var_old.repeat(n)));
    let diff = tape.sub(tape.constant(old_mean.clone()), mean);
    let inv_var = tape.broadcast_rows(tape.exp(tape.scale(log_std, -2.0)), n);
    let quad = tape.mul(tape.add(tape.square(diff), var_old), inv_var);
    let quad = tape.scale(tape.sum(quad), 0.5 / n as f64);
    let old_sum: f64 = old_log_std.iter().sum();
    tape.add_scalar(tape.add(quad, tape.sum(log_std)), -old_sum - 0.5 * d as f64)
}

/// One teacher rollout in 5-D action space.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 5]>,
    pub success: bool,
}

/// Runs a 3-DoF policy on a simplified-task env from its current state,
/// recording the expanded 5-D actions the env applied.
pub fn run_teacher<R: Rng + ?Sized>(
    teacher: &GaussianPolicy,
    env: &mut Env,
    deterministic: bool,
    rng: &mut R,
) -> Result<TeacherTrajectory> {
    if env.episode().cfg.task != Task::Simplified || teacher.task != Task::Simplified {
        return Err(Error::Config("teacher rollouts need the simplified task".into()));
    }
    let mut traj = TeacherTrajectory {
        observations: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    let mut obs = env.observe();
    while !env.episode().done {
        let a = if deterministic {
            teacher.act_deterministic(&obs)?
        } else {
            teacher.sample(&obs, rng)?.action
        };
        let tr = env.step(&a)?;
        traj.observations.push(std::mem::replace(&mut obs, tr.observation));
        traj.actions.push(tr.info.action);
        traj.success = tr.info.success;
    }
    Ok(traj)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BcDataset {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 5]>,
}

impl BcDataset {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn extend(&mut self, t: TeacherTrajectory) {
        self.observations.extend(t.observations);
        self.actions.extend(t.actions);
    }

    fn obs_batch(&self, idx: &[usize]) -> Tensor {
        let d = self.observations[0].len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.observations[i]);
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// `atanh` of the actions clamped to `±(1 − 1e-6)`.
    fn target_batch(&self, idx: &[usize]) -> Tensor {
        let lim = 1.0 - 1e-6;
        let data = idx
            .iter()
            .flat_map(|&i| self.actions[i].map(|a| a.clamp(-lim, lim).atanh()))
            .collect();
        Tensor::new(vec![idx.len(), 5], data)
    }

    /// Mean squared error between the policy's `tanh` means and the actions.
    pub fn action_mse(&self, policy: &GaussianPolicy, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let m = policy.mean_batch(&self.obs_batch(idx))?;
        let err: f64 = m
            .data()
            .chunks(5)
            .zip(idx)
            .map(|(row, &i)| row.iter().zip(&self.actions[i]).map(|(p, a)| (p - a) * (p - a)).sum::<f64>())
            .sum();
        Ok(err / (idx.len() * 5) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub epoch_loss: Vec<f64>,
    pub train_action_mse: f64,
}

/// Fits a fresh 5-D policy's pre-`tanh` means to the teacher actions, then
/// resets its log_std to the configured exploration level.
pub fn behavioral_clone(
    data: &BcDataset,
    train: &[usize],
    policy_cfg: PolicyConfig,
    cfg: &BcConfig,
) -> Result<(GaussianPolicy, BcReport)> {
    if train.is_empty() {
        return Err(Error::Config("behavioral cloning needs a non-empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let obs_dim = data.observations[train[0]].len();
    let mut policy = GaussianPolicy::new(obs_dim, Task::Full, policy_cfg, &mut rng)?;
    let ids = policy.mean_param_ids();
    let adam = Adam::with_lr(cfg.lr);
    let mut order = train.to_vec();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let params = policy.param_vars(&tape);
            let x = tape.constant(data.obs_batch(chunk));
            let pre = policy.pre_mean_with(&tape, &params, x)?;
            let y = tape.constant(data.target_batch(chunk));
            let loss = tape.mean(tape.square(tape.sub(pre, y)));
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Diverged(format!("cloning loss {l} at epoch {epoch}")));
            }
            policy.store.zero_grad();
            tape.backward_into(loss, &mut policy.store)?;
            adam.step(&mut policy.store, &ids)?;
            sum += l * chunk.len() as f64;
        }
        epoch_loss.push(sum / order.len() as f64);
    }
    let bc_log_std = policy.config.bc_log_std;
    policy.set_log_std(bc_log_std);
    let train_action_mse = data.action_mse(&policy, train)?;
    Ok((
        policy,
        BcReport {
            epoch_loss,
            train_action_mse,
        },
    ))
}
