//! Run configuration, training drivers, evaluation protocols, ablations and replay.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{CurriculumParam, CurriculumSpec, Ramp};
use crate::env::{Env, Episode, EpisodeConfig, RewardMode, SimSettings, Task, HORIZON};
use crate::perception::{
    collect_dataset, train_autoencoder, AeReport, AeTrainConfig, Autoencoder, DepthNorm, EncoderConfig, FrozenEncoder,
    ImageDataset,
};
use crate::policy::{behavioral_clone, run_teacher, BcConfig, BcDataset, GaussianPolicy, PolicyConfig};
use crate::sim::Scene;
use crate::trpo::{IterationLog, TrainConfig, Trainer, TrpoConfig};
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            o => Err(Error::Config(format!("unknown profile {o:?} (paper or desk)"))),
        }
    }
}

/// The agent variants that can be trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Shaped,
    ShapedCurriculum,
    Sparse,
    SparseCurriculum,
    SparseBc,
    SparseWarmStart,
    Simplified,
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown model {s:?}")))
    }
}

impl Model {
    pub fn task(self) -> Task {
        match self {
            Model::Simplified => Task::Simplified,
            _ => Task::Full,
        }
    }

    pub fn reward_mode(self) -> RewardMode {
        match self {
            Model::Shaped | Model::ShapedCurriculum => RewardMode::Shaped,
            _ => RewardMode::Sparse,
        }
    }

    pub fn uses_curriculum(self) -> bool {
        matches!(self, Model::ShapedCurriculum | Model::SparseCurriculum)
    }

    pub fn name(self) -> String {
        serde_json::to_value(self).unwrap().as_str().unwrap().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionSettings {
    /// Stem of a trained encoder (`<stem>.json` + `<stem>.bin`).
    pub encoder: Option<PathBuf>,
    pub images: usize,
    pub dataset_seed: u64,
    pub train: AeTrainConfig,
    pub model: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcSettings {
    /// Curriculum step of the workspace used for teacher, cloning and fine-tuning.
    pub lambda: f64,
    pub teacher_steps: u64,
    pub teacher_episodes: usize,
    pub deterministic_teacher: bool,
    pub finetune_steps: u64,
    pub clone: BcConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub sequences: usize,
    pub deterministic: bool,
    /// Curriculum step of the evaluation workspace.
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: Model,
    pub seed: u64,
    /// Number of seeds for multi-seed drivers.
    pub seeds: usize,
    pub max_env_steps: u64,
    pub batch_full: usize,
    pub batch_simplified: usize,
    pub curriculum: CurriculumSpec,
    pub trpo: TrpoConfig,
    pub policy: PolicyConfig,
    pub sim: SimSettings,
    pub perception: PerceptionSettings,
    pub bc: BcSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let paper = profile == Profile::Paper;
        let curriculum = CurriculumSpec {
            window: if paper { 1000 } else { 200 },
            ..CurriculumSpec::default()
        };
        Self {
            profile,
            model: Model::SparseCurriculum,
            seed: 0,
            seeds: if paper { 5 } else { 3 },
            max_env_steps: if paper { 10_000_000 } else { 300_000 },
            batch_full: if paper { 20_000 } else { 4_000 },
            batch_simplified: if paper { 10_000 } else { 4_000 },
            curriculum,
            trpo: TrpoConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimSettings::default(),
            perception: PerceptionSettings {
                encoder: None,
                images: if paper { 50_000 } else { 5_000 },
                dataset_seed: 1,
                train: AeTrainConfig {
                    epochs: if paper { 120 } else { 20 },
                    ..AeTrainConfig::default()
                },
                model: EncoderConfig::default(),
            },
            bc: BcSettings {
                lambda: 1.0,
                teacher_steps: if paper { 3_000_000 } else { 200_000 },
                teacher_episodes: if paper { 5_000 } else { 2_000 },
                deterministic_teacher: true,
                finetune_steps: if paper { 3_000_000 } else { 100_000 },
                clone: BcConfig::default(),
            },
            eval: EvalSettings {
                episodes: 200,
                sequences: 40,
                deterministic: false,
                lambda: 1.0,
                seed: 1_000_003,
            },
        }
    }

    /// Profile defaults, then a TOML document, then `key.path=value` overrides.
    pub fn resolve(profile: Profile, toml_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = Self::profile(profile);
        let mut tree: toml::Value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = toml_text {
            let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            if let Some(p) = file.get("profile").and_then(|v| v.as_str()) {
                if p.parse::<Profile>()? != profile {
                    let other = Self::profile(p.parse()?);
                    tree = toml::Value::try_from(&other).map_err(|e| Error::Config(e.to_string()))?;
                }
            }
            merge(&mut tree, toml::Value::Table(file));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut tree, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.trpo.validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        for (k, l) in [("bc.lambda", self.bc.lambda), ("eval.lambda", self.eval.lambda)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{k} must lie in [0, 1]")));
            }
        }
        if let Some(stem) = &self.perception.encoder {
            for ext in ["json", "bin"] {
                let p = stem.with_extension(ext);
                if !p.exists() {
                    return Err(Error::Config(format!("encoder file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn batch_for(&self, task: Task) -> usize {
        match task {
            Task::Full => self.batch_full,
            Task::Simplified => self.batch_simplified,
        }
    }

    /// Trainer settings for `model` with an explicit curriculum.
    pub fn train_config(&self, model: Model, curriculum: CurriculumSpec, seed: u64, max_env_steps: u64) -> TrainConfig {
        TrainConfig {
            task: model.task(),
            reward_mode: model.reward_mode(),
            curriculum,
            trpo: TrpoConfig {
                batch_size: self.batch_for(model.task()),
                ..self.trpo.clone()
            },
            policy: self.policy.clone(),
            sim: self.sim,
            max_env_steps,
            seed,
        }
    }

    /// The curriculum a model trains under: the configured ramp, or a single
    /// stage pinned at the maximum.
    pub fn curriculum_for(&self, model: Model) -> CurriculumSpec {
        if model.uses_curriculum() {
            self.curriculum
        } else {
            self.curriculum.none()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

/// Single-stage spec with every ramp collapsed to its value at `lambda`.
pub fn pinned_curriculum(spec: &CurriculumSpec, lambda: f64) -> CurriculumSpec {
    let pin = |r: Ramp| {
        let v = r.at(lambda);
        Ramp::new(v, v)
    };
    CurriculumSpec {
        extent: pin(spec.extent),
        h_robot: pin(spec.h_robot),
        h_lift: pin(spec.h_lift),
        n_max: pin(spec.n_max),
        n_steps: 1,
        ..*spec
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            // Integer literals may target float fields.
            let value = match (table.get(*part), value) {
                (Some(toml::Value::Float(_)), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// Random-policy depth images for autoencoder training.
pub fn collect_images(cfg: &RunConfig) -> Result<ImageDataset> {
    let p = &cfg.perception;
    collect_dataset(p.images, p.dataset_seed, &cfg.sim, &cfg.curriculum, DepthNorm::default())
}

/// Trains the autoencoder on `data` and freezes its encoder.
pub fn train_encoder_on(cfg: &RunConfig, data: &ImageDataset) -> Result<(FrozenEncoder, AeReport)> {
    let p = &cfg.perception;
    let (train, held) = data.split(p.dataset_seed);
    let mut ae = Autoencoder::new(p.model.clone(), &mut ChaCha8Rng::seed_from_u64(p.train.seed))?;
    let report = train_autoencoder(&mut ae, data, &train, &held, &p.train)?;
    Ok((ae.freeze(data, &train)?, report))
}

/// Collects a dataset, trains the autoencoder and freezes its encoder.
pub fn build_encoder(cfg: &RunConfig) -> Result<(FrozenEncoder, AeReport, ImageDataset)> {
    let data = collect_images(cfg)?;
    let (enc, report) = train_encoder_on(cfg, &data)?;
    Ok((enc, report, data))
}

/// Loads the configured encoder.
pub fn load_encoder(cfg: &RunConfig) -> Result<FrozenEncoder> {
    let stem = cfg.perception.encoder.as_ref().ok_or(Error::EncoderNotLoaded)?;
    FrozenEncoder::load(stem)
}

/// Completed training run.
pub struct TrainOutcome {
    pub seed: u64,
    pub log: Vec<IterationLog>,
    pub policy: GaussianPolicy,
    pub best: GaussianPolicy,
    pub final_stage: usize,
}

pub fn train_once(
    cfg: &RunConfig,
    train: TrainConfig,
    encoder: Arc<FrozenEncoder>,
    init: Option<GaussianPolicy>,
) -> Result<TrainOutcome> {
    let seed = train.seed;
    let mut t = Trainer::new(train, encoder, init)?;
    let _ = cfg;
    t.run(|_| {})?;
    Ok(TrainOutcome {
        seed,
        best: t.best_policy(),
        final_stage: t.curriculum.k,
        policy: t.policy,
        log: t.log,
    })
}

/// Runs `jobs` on up to `available_parallelism` threads, keeping input order.
pub fn parallel_map<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    if threads <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>().into_iter());
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let next = queue.lock().unwrap().next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains `model` under `curriculum` for every configured seed.
pub fn train_seeds(
    cfg: &RunConfig,
    model: Model,
    curriculum: CurriculumSpec,
    encoder: Arc<FrozenEncoder>,
    init: Option<&GaussianPolicy>,
    max_env_steps: u64,
) -> Result<Vec<TrainOutcome>> {
    let jobs: Vec<u64> = cfg.seed_list();
    parallel_map(jobs, |seed| {
        let tc = cfg.train_config(model, curriculum, seed, max_env_steps);
        train_once(cfg, tc, encoder.clone(), init.cloned())
    })
    .into_iter()
    .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianPoint {
    pub iteration: usize,
    pub runs: usize,
    pub env_steps: f64,
    pub success_rate_window: f64,
    pub lambda: f64,
}

/// Per-iteration-index median over runs that reached that index.
pub fn median_curve(logs: &[Vec<IterationLog>]) -> Vec<MedianPoint> {
    let len = logs.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rows: Vec<&IterationLog> = logs.iter().filter_map(|l| l.get(i)).collect();
            let col = |f: &dyn Fn(&IterationLog) -> f64| median(&mut rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            MedianPoint {
                iteration: i,
                runs: rows.len(),
                env_steps: col(&|r| r.env_steps as f64),
                success_rate_window: col(&|r| r.success_rate_window),
                lambda: col(&|r| r.lambda),
            }
        })
        .collect()
}

/// Final windowed success of a run.
pub fn final_success(log: &[IterationLog]) -> f64 {
    log.last().map_or(0.0, |r| r.success_rate_window)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub reward_mode: RewardMode,
    pub seeds: Vec<u64>,
    pub final_success: Vec<f64>,
    pub median_final_success: f64,
    pub median: Vec<MedianPoint>,
}

/// Holds `param` at its maximum and trains both reward modes over the configured seeds.
pub fn run_ablation(
    cfg: &RunConfig,
    param: CurriculumParam,
    encoder: Arc<FrozenEncoder>,
    modes: &[RewardMode],
) -> Result<Vec<(AblationArm, Vec<Vec<IterationLog>>)>> {
    let spec = cfg.curriculum.freeze(param);
    modes
        .iter()
        .map(|&mode| {
            let model = match mode {
                RewardMode::Sparse => Model::SparseCurriculum,
                RewardMode::Shaped => Model::ShapedCurriculum,
            };
            let runs = train_seeds(cfg, model, spec, encoder.clone(), None, cfg.max_env_steps)?;
            let logs: Vec<Vec<IterationLog>> = runs.into_iter().map(|r| r.log).collect();
            let mut finals: Vec<f64> = logs.iter().map(|l| final_success(l)).collect();
            let arm = AblationArm {
                reward_mode: mode,
                seeds: cfg.seed_list(),
                final_success: finals.clone(),
                median_final_success: median(&mut finals),
                median: median_curve(&logs),
            };
            Ok((arm, logs))
        })
        .collect()
}

pub fn median_csv(points: &[MedianPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).unwrap())
}

/// Named random streams for evaluation.
fn eval_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut scene = ChaCha8Rng::seed_from_u64(seed);
    scene.set_stream(5);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(6);
    (scene, noise)
}

fn act(policy: &GaussianPolicy, obs: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if deterministic {
        policy.act_deterministic(obs)
    } else {
        Ok(policy.sample(obs, rng)?.action)
    }
}

/// Runs the current env episode to its end; returns success.
fn run_episode(env: &mut Env, policy: &GaussianPolicy, deterministic: bool, rng: &mut ChaCha8Rng) -> Result<bool> {
    let mut obs = env.observe();
    loop {
        let a = act(policy, &obs, deterministic, rng)?;
        let tr = env.step(&a)?;
        if tr.info.terminal {
            return Ok(tr.info.success);
        }
        obs = tr.observation;
    }
}

fn make_env(encoder: Arc<FrozenEncoder>, sim: SimSettings, cfg: EpisodeConfig) -> Result<Env> {
    Env::builder().config(cfg).settings(sim).encoder(encoder).build()
}

/// Success rate over `n` episodes with scenes of exactly `objects` objects
/// (or `U{1..n_max}` when `None`).
pub fn success_rate(
    policy: &GaussianPolicy,
    encoder: Arc<FrozenEncoder>,
    sim: SimSettings,
    cfg: EpisodeConfig,
    objects: Option<u32>,
    n: usize,
    seed: u64,
    deterministic: bool,
) -> Result<f64> {
    let mut env = make_env(encoder, sim, cfg)?;
    let (mut scenes, mut noise) = eval_streams(seed);
    let mut wins = 0;
    for _ in 0..n {
        let s = scenes.random::<u64>();
        match objects {
            Some(k) => {
                let scene = Scene::spawn_n(&mut ChaCha8Rng::seed_from_u64(s), k, cfg.extent, cfg.h_robot, &sim.objects);
                env.reset_with_scene(cfg, scene, s);
            }
            None => {
                env.reset(cfg, s);
            }
        }
        wins += usize::from(run_episode(&mut env, policy, deterministic, &mut noise)?);
    }
    Ok(if n == 0 { 0.0 } else { wins as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub objects: u32,
    pub sequences: usize,
    pub episodes: usize,
    pub success_pct: f64,
    pub cleared_pct: f64,
}

/// Sequential picking until the table is empty or two failures in a row.
pub fn eval_table_clearing(
    policy: &GaussianPolicy,
    encoder: Arc<FrozenEncoder>,
    sim: SimSettings,
    cfg: EpisodeConfig,
    n_sequences: usize,
    n_objects: u32,
    seed: u64,
    deterministic: bool,
) -> Result<ClearingResult> {
    let mut env = make_env(encoder, sim, cfg)?;
    let (mut scenes, mut noise) = eval_streams(seed ^ u64::from(n_objects));
    let (mut episodes, mut picks, mut cleared_sum) = (0usize, 0usize, 0.0);
    for _ in 0..n_sequences {
        let s: u64 = scenes.random();
        let mut scene = Scene::spawn_n(&mut ChaCha8Rng::seed_from_u64(s), n_objects, cfg.extent, cfg.h_robot, &sim.objects);
        let initial = scene.objects.len();
        let mut fails = 0;
        while !scene.objects.is_empty() && fails < 2 {
            env.reset_with_scene(cfg, scene.clone(), s.wrapping_add(episodes as u64));
            let ok = run_episode(&mut env, policy, deterministic, &mut noise)?;
            episodes += 1;
            scene = env.episode().scene.clone();
            if ok {
                picks += 1;
                fails = 0;
                let held = scene.attachment.map(|a| a.object).expect("success implies a held object");
                scene.remove_object(held);
            } else {
                fails += 1;
            }
            scene.reset_gripper(cfg.h_robot);
        }
        if initial > 0 {
            cleared_sum += (initial - scene.objects.len()) as f64 / initial as f64;
        }
    }
    let pct = |x: f64| 100.0 * x;
    Ok(ClearingResult {
        objects: n_objects,
        sequences: n_sequences,
        episodes,
        success_pct: if episodes == 0 { 0.0 } else { pct(picks as f64 / episodes as f64) },
        cleared_pct: if n_sequences == 0 { 0.0 } else { pct(cleared_sum / n_sequences as f64) },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub policy_fingerprint: String,
    pub encoder_fingerprint: String,
    pub deterministic_actions: bool,
    pub lambda: f64,
    pub episodes: usize,
    pub single_success_pct: f64,
    pub clutter_success_pct: f64,
    pub clearing: Vec<ClearingResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn policy_fingerprint(p: &GaussianPolicy) -> String {
    let mut h = Sha256::new();
    for v in p.flat_params() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Single-object, clutter (5 objects) and table-clearing (5 and 10) protocols.
pub fn evaluate(cfg: &RunConfig, policy: &GaussianPolicy, encoder: Arc<FrozenEncoder>) -> Result<EvalReport> {
    let e = &cfg.eval;
    let ws = cfg.curriculum.params_at(e.lambda)?;
    let ep = EpisodeConfig::new(ws, RewardMode::Sparse, policy.task);
    let rate = |objects| {
        success_rate(policy, encoder.clone(), cfg.sim, ep, Some(objects), e.episodes, e.seed, e.deterministic)
    };
    let single = rate(1)?;
    let clutter = rate(5)?;
    let clearing = [5, 10]
        .into_iter()
        .map(|n| eval_table_clearing(policy, encoder.clone(), cfg.sim, ep, e.sequences, n, e.seed, e.deterministic))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        code_version: CODE_VERSION.into(),
        config_hash: cfg.hash(),
        seed: e.seed,
        policy_fingerprint: policy_fingerprint(policy),
        encoder_fingerprint: encoder.fingerprint(),
        deterministic_actions: e.deterministic,
        lambda: e.lambda,
        episodes: e.episodes,
        single_success_pct: 100.0 * single,
        clutter_success_pct: 100.0 * clutter,
        clearing,
    })
}

/// Teacher rollouts, cloning and warm-started fine-tuning for one seed.
pub struct BcOutcome {
    pub teacher: TrainOutcome,
    pub dataset: BcDataset,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
    pub cloned: GaussianPolicy,
    pub heldout_mse: f64,
}

/// Trains a simplified-task teacher, harvests its 5-D actions and clones them.
pub fn bc_pipeline(cfg: &RunConfig, encoder: Arc<FrozenEncoder>, seed: u64) -> Result<BcOutcome> {
    let spec = pinned_curriculum(&cfg.curriculum, cfg.bc.lambda);
    let tc = cfg.train_config(Model::Simplified, spec, seed, cfg.bc.teacher_steps);
    let teacher = train_once(cfg, tc, encoder.clone(), None)?;
    let dataset = teacher_dataset(cfg, &teacher.best, encoder, seed)?;
    let (train_idx, heldout_idx) = split_indices(dataset.len(), seed);
    let clone_cfg = BcConfig {
        seed,
        ..cfg.bc.clone.clone()
    };
    let (cloned, _) = behavioral_clone(&dataset, &train_idx, cfg.policy.clone(), &clone_cfg)?;
    let heldout_mse = dataset.action_mse(&cloned, &heldout_idx)?;
    Ok(BcOutcome {
        teacher,
        dataset,
        train_idx,
        heldout_idx,
        cloned,
        heldout_mse,
    })
}

/// Teacher rollouts on the simplified task at the BC workspace.
pub fn teacher_dataset(cfg: &RunConfig, teacher: &GaussianPolicy, encoder: Arc<FrozenEncoder>, seed: u64) -> Result<BcDataset> {
    let ws = cfg.curriculum.params_at(cfg.bc.lambda)?;
    let ep = EpisodeConfig::new(ws, RewardMode::Sparse, Task::Simplified);
    let mut env = make_env(encoder, cfg.sim, ep)?;
    let (mut scenes, mut noise) = eval_streams(seed ^ 0x7eac);
    let mut data = BcDataset::default();
    for _ in 0..cfg.bc.teacher_episodes {
        env.reset(ep, scenes.random());
        data.extend(run_teacher(teacher, &mut env, cfg.bc.deterministic_teacher, &mut noise)?);
    }
    Ok(data)
}

/// Seeded 90/10 split by position.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = n / 10;
    let train = idx.split_off(held);
    (train, idx)
}

/// Success of a full-task policy on the BC workspace.
pub fn bc_task_success(cfg: &RunConfig, policy: &GaussianPolicy, encoder: Arc<FrozenEncoder>, seed: u64) -> Result<f64> {
    let ws = cfg.curriculum.params_at(cfg.bc.lambda)?;
    let ep = EpisodeConfig::new(ws, RewardMode::Sparse, Task::Full);
    success_rate(policy, encoder, cfg.sim, ep, None, cfg.eval.episodes, seed, cfg.eval.deterministic)
}

/// Fine-tunes a cloned policy with sparse-reward TRPO on the BC workspace.
pub fn warm_start(cfg: &RunConfig, cloned: &GaussianPolicy, encoder: Arc<FrozenEncoder>, seed: u64) -> Result<TrainOutcome> {
    let spec = pinned_curriculum(&cfg.curriculum, cfg.bc.lambda);
    let tc = cfg.train_config(Model::SparseWarmStart, spec, seed, cfg.bc.finetune_steps);
    train_once(cfg, tc, encoder, Some(cloned.clone()))
}

// ---------------------------------------------------------------- replay

pub const REPLAY_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub format: u32,
    pub code_version: String,
    pub seed: u64,
    pub config: EpisodeConfig,
    pub settings: SimSettings,
    pub initial_scene_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub t: usize,
    /// Action as given to the env (3-D for the simplified task).
    pub action: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
    pub grasp_detected: bool,
    pub collision_stall: bool,
    pub scene_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ReplayVerdict {
    Match { steps: usize },
    Mismatch { step: usize, field: String },
    Rejected { reason: String },
}

/// Plays one episode and returns its JSON-lines log.
pub fn record_episode(
    policy: &GaussianPolicy,
    encoder: Arc<FrozenEncoder>,
    sim: SimSettings,
    cfg: EpisodeConfig,
    seed: u64,
    deterministic: bool,
) -> Result<String> {
    let mut env = make_env(encoder, sim, cfg)?;
    let mut obs = env.reset(cfg, seed);
    let (_, mut noise) = eval_streams(seed);
    let header = ReplayHeader {
        format: REPLAY_FORMAT,
        code_version: CODE_VERSION.into(),
        seed,
        config: cfg,
        settings: sim,
        initial_scene_digest: env.episode().scene_digest(),
    };
    let mut out = serde_json::to_string(&header)? + "\n";
    loop {
        let a = act(policy, &obs, deterministic, &mut noise)?;
        let tr = env.step(&a)?;
        let step = ReplayStep {
            t: env.episode().t,
            action: a,
            reward: tr.info.reward,
            terminal: tr.info.terminal,
            success: tr.info.success,
            grasp_detected: tr.info.grasp_detected,
            collision_stall: tr.info.collision_stall,
            scene_digest: env.episode().scene_digest(),
        };
        out += &(serde_json::to_string(&step)? + "\n");
        if tr.info.terminal {
            break;
        }
        obs = tr.observation;
    }
    Ok(out)
}

/// Re-executes a log's actions on a re-spawned scene and compares every field.
pub fn replay(log: &str, expected_seed: Option<u64>) -> ReplayVerdict {
    let reject = |reason: String| ReplayVerdict::Rejected { reason };
    let mut lines = log.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return reject("empty log".into());
    };
    let header: ReplayHeader = match serde_json::from_str(first) {
        Ok(h) => h,
        Err(e) => return reject(format!("bad header: {e}")),
    };
    if header.format != REPLAY_FORMAT || header.code_version != CODE_VERSION {
        return reject(format!(
            "log written by format {} / version {}, this is format {REPLAY_FORMAT} / version {CODE_VERSION}",
            header.format, header.code_version
        ));
    }
    if let Some(s) = expected_seed {
        if s != header.seed {
            return reject(format!("seed mismatch: log has {}, expected {s}", header.seed));
        }
    }
    let mut ep = Episode::new(header.config, header.settings, header.seed);
    if ep.scene_digest() != header.initial_scene_digest {
        return reject("seed mismatch: re-spawned scene differs from the logged one".into());
    }
    let mut steps = 0;
    for (i, line) in lines.enumerate() {
        let rec: ReplayStep = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return reject(format!("bad step {i}: {e}")),
        };
        let info = match ep.step(&rec.action) {
            Ok(info) => info,
            Err(e) => return ReplayVerdict::Mismatch { step: i, field: format!("step failed: {e}") },
        };
        let checks = [
            ("t", rec.t == ep.t),
            ("reward", rec.reward.to_bits() == info.reward.to_bits()),
            ("terminal", rec.terminal == info.terminal),
            ("success", rec.success == info.success),
            ("grasp_detected", rec.grasp_detected == info.grasp_detected),
            ("collision_stall", rec.collision_stall == info.collision_stall),
            ("scene_digest", rec.scene_digest == ep.scene_digest()),
        ];
        if let Some((field, _)) = checks.iter().find(|(_, ok)| !ok) {
            return ReplayVerdict::Mismatch { step: i, field: field.to_string() };
        }
        steps += 1;
    }
    if !ep.done {
        return ReplayVerdict::Mismatch { step: steps, field: "log ends before the episode".into() };
    }
    debug_assert!(steps <= HORIZON);
    ReplayVerdict::Match { steps }
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_profiles() {
        let cfg = RunConfig::resolve(Profile::Desk, None, &[]).unwrap();
        assert_eq!(cfg.curriculum.window, 200);
        assert_eq!(cfg.batch_full, 4000);
        assert_eq!(cfg.seeds, 3);
        let paper = RunConfig::resolve(Profile::Paper, None, &[]).unwrap();
        assert_eq!((paper.batch_simplified, paper.batch_full), (10_000, 20_000));
        assert_eq!(paper.curriculum.window, 1000);
        let o = RunConfig::resolve(
            Profile::Desk,
            Some("model = \"shaped\"\n[trpo]\ngamma = 0.95\n"),
            &["trpo.max_kl=0.02".into(), "curriculum.epsilon=0.8".into(), "model=simplified".into(), "curriculum.h_lift.min=0".into()],
        )
        .unwrap();
        assert_eq!(o.trpo.gamma, 0.95);
        assert_eq!(o.trpo.max_kl, 0.02);
        assert_eq!(o.model, Model::Simplified);
        assert_eq!(o.curriculum.h_lift.min, 0.0);
        assert!(RunConfig::resolve(Profile::Desk, None, &["curriculum.epsilon=1".into()]).is_err());
        assert!(RunConfig::resolve(Profile::Desk, None, &["nonsense=3".into()]).is_err());
        assert!(RunConfig::resolve(Profile::Desk, None, &["perception.encoder=\"/nope\"".into()]).is_err());
        assert_ne!(cfg.hash(), o.hash());
        assert_eq!(cfg.hash(), RunConfig::resolve(Profile::Desk, None, &[]).unwrap().hash());
    }

    #[test]
    fn median_curve_per_index() {
        let row = |i, r| IterationLog {
            iteration: i,
            env_steps: 10 * (i as u64 + 1),
            success_rate_window: r,
            lambda: 0.0,
            mean_kl: 0.0,
            surrogate_improvement: 0.0,
            mean_return: 0.0,
            stage: 0,
            episodes: 1,
            batch_success_rate: r,
            accepted: true,
            backtracks: 0,
            advanced: false,
            entropy: 0.0,
            value_loss: 0.0,
        };
        let logs = vec![
            vec![row(0, 0.1), row(1, 0.5)],
            vec![row(0, 0.3), row(1, 0.2)],
            vec![row(0, 0.2)],
        ];
        let m = median_curve(&logs);
        assert_eq!(m[0].success_rate_window, 0.2);
        assert_eq!(m[1].runs, 2);
        assert!((m[1].success_rate_window - 0.35).abs() < 1e-15);
    }

    #[test]
    fn pinned_curriculum_is_single_stage() {
        let s = pinned_curriculum(&CurriculumSpec::default(), 0.5);
        assert_eq!(s.n_steps, 1);
        assert_eq!(s.params_at(1.0).unwrap(), CurriculumSpec::default().params_at(0.5).unwrap());
    }

    #[test]
    fn model_names_round_trip() {
        for m in [Model::Shaped, Model::SparseWarmStart, Model::Simplified] {
            assert_eq!(m.name().parse::<Model>().unwrap(), m);
        }
    }
}
