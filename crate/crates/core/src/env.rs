//! Episodic picking MDP on top of [`crate::sim`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::WorkspaceParams;
use crate::perception::{filter_depth, FrozenEncoder};
use crate::sim::{Camera, GripperCommand, ObjectRanges, Scene, WorldAction, W_MAX};
use crate::{Error, Result};

/// Translation budget per step.
pub const TRANSLATION_MAX: f64 = 0.01;
/// Yaw change per step at |ψ| = 1.
pub const YAW_MAX: f64 = 0.1;
/// Horizon used throughout.
pub const HORIZON: usize = 150;
pub const R_TERMINAL: f64 = 10.0;
pub const R_GRASP: f64 = 1.0;
pub const C_HEIGHT: f64 = 1000.0;
pub const DH_MAX: f64 = 0.01;
pub const TIME_PENALTY: f64 = 0.1;
/// Fixed lift height of the simplified task.
pub const SIMPLIFIED_LIFT: f64 = 0.05;
/// Fingertip height at which the simplified-task heuristic closes the jaw.
pub const H_TRIGGER: f64 = 0.015;
/// Slack on the lift check so that k exact 1 cm steps reach k cm despite rounding.
pub const LIFT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sparse,
    Shaped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Full,
    Simplified,
}

impl Task {
    /// Dimension of the policy's action.
    pub fn action_dim(self) -> usize {
        match self {
            Task::Full => 5,
            Task::Simplified => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub extent: f64,
    pub h_robot: f64,
    pub h_lift: f64,
    pub n_max: u32,
    pub horizon: usize,
    pub reward_mode: RewardMode,
    pub task: Task,
}

impl EpisodeConfig {
    pub fn new(ws: WorkspaceParams, reward_mode: RewardMode, task: Task) -> Self {
        Self {
            extent: ws.extent,
            h_robot: ws.h_robot,
            h_lift: match task {
                Task::Full => ws.h_lift,
                Task::Simplified => SIMPLIFIED_LIFT,
            },
            n_max: ws.n_max,
            horizon: HORIZON,
            reward_mode,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be >= 1".into()));
        }
        if !(self.extent > 0.0 && self.h_robot >= 0.0 && self.h_lift > 0.0) {
            return Err(Error::Config("workspace dimensions must be positive".into()));
        }
        // Individual stages may lift above the start height when h_lift is
        // frozen for an ablation; only reachability under the ceiling matters.
        if self.h_lift >= crate::sim::Z_MAX {
            return Err(Error::Config("h_lift must lie below the gripper ceiling".into()));
        }
        Ok(())
    }
}

/// Static simulation settings shared by every episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub objects: ObjectRanges,
    pub camera: Camera,
    pub h_trigger: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            objects: ObjectRanges::default(),
            camera: Camera::default(),
            h_trigger: H_TRIGGER,
        }
    }
}

fn clamp_unit(a: &[f64]) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (o, &v) in out.iter_mut().zip(a) {
        *o = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    }
    out
}

/// Maps a normalized action to a gripper-frame motion command.
pub fn decode_action(a: &[f64; 5]) -> WorldAction {
    let a = clamp_unit(a);
    let mut t = [a[0] * TRANSLATION_MAX, a[1] * TRANSLATION_MAX, a[2] * TRANSLATION_MAX];
    let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    if n > TRANSLATION_MAX {
        let s = TRANSLATION_MAX / n;
        t = [t[0] * s, t[1] * s, t[2] * s];
    }
    WorldAction {
        dx: t[0],
        dy: t[1],
        dz: t[2],
        dyaw: a[3] * YAW_MAX,
        command: if a[4] >= 0.0 { GripperCommand::Open } else { GripperCommand::Close },
    }
}

/// Inputs of the per-step reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardInputs {
    pub grasp_detected: bool,
    /// Change in gripper height over the step.
    pub dh: f64,
    pub success: bool,
    pub terminal: bool,
}

pub fn reward(task: Task, mode: RewardMode, r: &RewardInputs) -> f64 {
    let bonus = if r.success { R_TERMINAL } else { 0.0 };
    match (task, mode) {
        (Task::Simplified, _) => bonus,
        (Task::Full, RewardMode::Sparse) => {
            if r.success {
                R_TERMINAL
            } else if r.terminal {
                0.0
            } else {
                -TIME_PENALTY
            }
        }
        (Task::Full, RewardMode::Shaped) => {
            let g = if r.grasp_detected { 1.0 } else { 0.0 };
            g * (R_GRASP + C_HEIGHT * r.dh) - (R_GRASP + C_HEIGHT * DH_MAX) + bonus
        }
    }
}

/// Heuristic phase of the simplified task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Descend,
    /// Jaw closed with the fingertips at height `from`.
    Lift { from: f64 },
}

/// Result of one state-level step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Full 5-D action actually applied (after any overlay and clamping).
    pub action: [f64; 5],
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
    pub grasp_detected: bool,
    pub collision_stall: bool,
    pub contact: bool,
    pub dh: f64,
}

/// Episode state without observation rendering.
#[derive(Clone, Debug)]
pub struct Episode {
    pub cfg: EpisodeConfig,
    pub settings: SimSettings,
    pub scene: Scene,
    pub seed: u64,
    pub t: usize,
    pub done: bool,
    pub phase: Phase,
}

impl Episode {
    pub fn new(cfg: EpisodeConfig, settings: SimSettings, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = Scene::spawn(&mut rng, cfg.n_max, cfg.extent, cfg.h_robot, &settings.objects);
        Self::from_scene(cfg, settings, scene, seed)
    }

    pub fn from_scene(cfg: EpisodeConfig, settings: SimSettings, scene: Scene, seed: u64) -> Self {
        Self {
            cfg,
            settings,
            scene,
            seed,
            t: 0,
            done: false,
            phase: Phase::Descend,
        }
    }

    /// Expands a 3-D simplified action with the heuristic `t_z` and `g`.
    pub fn overlay(&self, a3: &[f64]) -> [f64; 5] {
        let a = clamp_unit(a3);
        let (tz, g) = match self.phase {
            Phase::Descend if self.scene.gripper.z <= self.settings.h_trigger => (0.0, -1.0),
            Phase::Descend => (-1.0, 1.0),
            Phase::Lift { .. } => (1.0, -1.0),
        };
        [a[0], a[1], tz, a[2], g]
    }

    fn lifted(&self) -> bool {
        self.scene
            .attached_object()
            .is_some_and(|o| o.z >= self.cfg.h_lift - LIFT_TOL)
    }

    /// Applies a policy action (3-D for the simplified task, 5-D otherwise).
    pub fn step(&mut self, a: &[f64]) -> Result<StepInfo> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        let want = self.cfg.task.action_dim();
        if a.len() != want {
            return Err(Error::ActionDim { expected: want, got: a.len() });
        }
        let action = match self.cfg.task {
            Task::Full => clamp_unit(a),
            Task::Simplified => self.overlay(a),
        };
        let cmd = decode_action(&action);
        let z0 = self.scene.gripper.z;
        let out = self.scene.step(&cmd);
        let dh = self.scene.gripper.z - z0;
        self.t += 1;

        let success = self.lifted();
        let mut failed = false;
        if self.cfg.task == Task::Simplified {
            match self.phase {
                Phase::Descend => {
                    if cmd.command == GripperCommand::Close {
                        self.phase = Phase::Lift { from: z0 };
                    } else if out.stalled_down && self.scene.gripper.z > self.settings.h_trigger {
                        failed = true;
                    }
                }
                Phase::Lift { from } => {
                    if !success && self.scene.gripper.z >= from + SIMPLIFIED_LIFT - LIFT_TOL {
                        failed = true;
                    }
                }
            }
        }
        let terminal = success || failed || self.t >= self.cfg.horizon;
        let grasp_detected = cmd.command == GripperCommand::Close && self.scene.gripper.fingers_stalled;
        let inputs = RewardInputs {
            grasp_detected,
            dh,
            success,
            terminal,
        };
        self.done = terminal;
        Ok(StepInfo {
            action,
            reward: reward(self.cfg.task, self.cfg.reward_mode, &inputs),
            terminal,
            success,
            grasp_detected,
            collision_stall: out.stalled_down,
            contact: out.contact,
            dh,
        })
    }

    /// SHA-256 of the scene snapshot, hex encoded.
    pub fn scene_digest(&self) -> String {
        hex::encode(Sha256::digest(self.scene.to_json().as_bytes()))
    }
}

/// Observation-producing environment around an [`Episode`].
#[derive(Clone)]
pub struct Env {
    episode: Episode,
    encoder: Arc<FrozenEncoder>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub info: StepInfo,
}

/// Builder enforcing that an encoder is supplied.
#[derive(Default)]
pub struct EnvBuilder {
    cfg: Option<EpisodeConfig>,
    settings: SimSettings,
    encoder: Option<Arc<FrozenEncoder>>,
    seed: u64,
}

impl EnvBuilder {
    pub fn config(mut self, cfg: EpisodeConfig) -> Self {
        self.cfg = Some(cfg);
        self
    }

    pub fn settings(mut self, settings: SimSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn encoder(mut self, encoder: Arc<FrozenEncoder>) -> Self {
        self.encoder = Some(encoder);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(self) -> Result<Env> {
        let encoder = self.encoder.ok_or(Error::EncoderNotLoaded)?;
        let cfg = self.cfg.ok_or_else(|| Error::Config("episode config missing".into()))?;
        cfg.validate()?;
        Ok(Env {
            episode: Episode::new(cfg, self.settings, self.seed),
            encoder,
        })
    }
}

impl Env {
    pub fn builder() -> EnvBuilder {
        EnvBuilder::default()
    }

    /// Starts a new episode with `cfg` and scene seed `seed`.
    pub fn reset(&mut self, cfg: EpisodeConfig, seed: u64) -> Vec<f64> {
        self.episode = Episode::new(cfg, self.episode.settings, seed);
        self.observe()
    }

    pub fn reset_with_scene(&mut self, cfg: EpisodeConfig, scene: Scene, seed: u64) -> Vec<f64> {
        self.episode = Episode::from_scene(cfg, self.episode.settings, scene, seed);
        self.observe()
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    /// Filtered, normalized depth image of the current scene.
    pub fn filtered_image(&self) -> Vec<f64> {
        let img = self.episode.settings.camera.render(&self.episode.scene);
        filter_depth(&img, &self.encoder.norm)
    }

    /// Latent code of the current view followed by the normalized jaw width.
    pub fn observe(&self) -> Vec<f64> {
        let mut obs = self.encoder.encode(&self.filtered_image());
        obs.push(self.episode.scene.gripper.width / W_MAX);
        obs
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.latent_dim() + 1
    }

    pub fn step(&mut self, a: &[f64]) -> Result<Transition> {
        let info = self.episode.step(a)?;
        Ok(Transition {
            observation: self.observe(),
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Footprint, RigidObject};

    fn cfg(task: Task, mode: RewardMode) -> EpisodeConfig {
        EpisodeConfig {
            extent: 0.2,
            h_robot: 0.16,
            h_lift: 0.10,
            n_max: 1,
            horizon: HORIZON,
            reward_mode: mode,
            task,
        }
    }

    #[test]
    fn decode_examples() {
        let w = decode_action(&[1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!((w.dx, w.dy, w.dz), (0.01, 0.0, 0.0));
        assert_eq!(w.command, GripperCommand::Open);
        let w = decode_action(&[1.0, 1.0, 1.0, 0.0, -1.0]);
        let n = (w.dx * w.dx + w.dy * w.dy + w.dz * w.dz).sqrt();
        assert!((n - 0.01).abs() < 1e-17);
        assert_eq!(w.dx, w.dy);
        assert_eq!(w.command, GripperCommand::Close);
        let w = decode_action(&[0.0; 5]);
        assert_eq!((w.dx, w.dy, w.dz, w.dyaw), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(w.command, GripperCommand::Open);
    }

    #[test]
    fn reward_examples() {
        let base = RewardInputs { grasp_detected: false, dh: 0.0, success: false, terminal: false };
        assert_eq!(reward(Task::Full, RewardMode::Sparse, &base), -0.1);
        assert_eq!(reward(Task::Full, RewardMode::Shaped, &base), -11.0);
        let lift = RewardInputs { grasp_detected: true, dh: 0.01, ..base };
        assert_eq!(reward(Task::Full, RewardMode::Shaped, &lift), 0.0);
    }

    fn lift_scene(h_robot: f64) -> Scene {
        let mut s = Scene::empty(0.2, h_robot);
        s.objects.push(RigidObject {
            id: 0,
            footprint: Footprint::Disc { radius: 0.01 },
            height: 0.03,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            yaw: 0.0,
            attached: false,
        });
        s
    }

    #[test]
    fn sparse_success_return() {
        let mut ep = Episode::from_scene(cfg(Task::Full, RewardMode::Sparse), SimSettings::default(), lift_scene(0.02), 0);
        let mut ret = 0.0;
        let mut k = 0;
        let close = [0.0, 0.0, 0.0, 0.0, -1.0];
        let up = [0.0, 0.0, 1.0, 0.0, -1.0];
        let mut info = ep.step(&close).unwrap();
        ret += info.reward;
        k += 1;
        while !info.terminal {
            info = ep.step(&up).unwrap();
            ret += info.reward;
            k += 1;
        }
        assert!(info.success);
        assert!((ret - (10.0 - 0.1 * (k - 1) as f64)).abs() < 1e-12);
        assert!(matches!(ep.step(&up), Err(Error::EpisodeOver)));
    }

    #[test]
    fn horizon_ends_episode() {
        let mut c = cfg(Task::Full, RewardMode::Sparse);
        c.horizon = 3;
        let mut ep = Episode::from_scene(c, SimSettings::default(), Scene::empty(0.2, 0.1), 0);
        for i in 0..3 {
            let info = ep.step(&[0.0; 5]).unwrap();
            assert_eq!(info.terminal, i == 2);
            assert!(!info.success);
        }
    }

    #[test]
    fn simplified_overlay_sequence() {
        let c = EpisodeConfig { h_lift: SIMPLIFIED_LIFT, ..cfg(Task::Simplified, RewardMode::Sparse) };
        let mut ep = Episode::from_scene(c, SimSettings::default(), lift_scene(0.08), 0);
        assert_eq!(ep.overlay(&[0.0; 3])[2..], [-1.0, 0.0, 1.0]);
        let mut closed_at = None;
        loop {
            let info = ep.step(&[0.0; 3]).unwrap();
            if info.action[4] < 0.0 && closed_at.is_none() {
                closed_at = Some(ep.t);
                assert_eq!(info.action[2], 0.0);
                assert!(info.grasp_detected);
            } else if closed_at.is_some() {
                assert_eq!(info.action[2], 1.0);
            } else {
                assert_eq!(info.action[2], -1.0);
            }
            if info.terminal {
                assert!(info.success);
                assert_eq!(info.reward, 10.0);
                break;
            }
            assert_eq!(info.reward, 0.0);
        }
    }

    #[test]
    fn simplified_collision_stall_fails() {
        let c = cfg(Task::Simplified, RewardMode::Sparse);
        let mut s = lift_scene(0.06);
        // Object under a finger.
        s.objects[0].x = W_MAX / 2.0 + 0.0025;
        s.objects[0].footprint = Footprint::Disc { radius: 0.004 };
        let mut ep = Episode::from_scene(c, SimSettings::default(), s, 0);
        let mut last = None;
        while !ep.done {
            last = Some(ep.step(&[0.0; 3]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.collision_stall && !last.success);
        assert!(ep.t < 10);
    }
}
