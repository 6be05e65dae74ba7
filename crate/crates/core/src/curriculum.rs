//! Workspace curriculum: linear parameter ramps and windowed advancement.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub min: f64,
    pub max: f64,
}

impl Ramp {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn at(&self, lambda: f64) -> f64 {
        self.min + lambda * (self.max - self.min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub extent: Ramp,
    pub h_robot: Ramp,
    pub h_lift: Ramp,
    pub n_max: Ramp,
    pub n_steps: usize,
    pub epsilon: f64,
    pub window: usize,
}

impl Default for CurriculumSpec {
    fn default() -> Self {
        Self {
            extent: Ramp::new(0.02, 0.20),
            h_robot: Ramp::new(0.04, 0.16),
            h_lift: Ramp::new(0.01, 0.10),
            n_max: Ramp::new(3.0, 5.0),
            n_steps: 8,
            epsilon: 0.7,
            window: 1000,
        }
    }
}

/// Workspace parameters of one curriculum stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceParams {
    pub extent: f64,
    pub h_robot: f64,
    pub h_lift: f64,
    pub n_max: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumParam {
    Extent,
    HRobot,
    HLift,
    NMax,
}

impl std::str::FromStr for CurriculumParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l" | "extent" => Ok(Self::Extent),
            "h_robot" => Ok(Self::HRobot),
            "h_lift" => Ok(Self::HLift),
            "n_max" => Ok(Self::NMax),
            other => Err(Error::Config(format!(
                "unknown curriculum parameter {other:?} (expected l, h_robot, h_lift or n_max)"
            ))),
        }
    }
}

impl CurriculumParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Extent => "l",
            Self::HRobot => "h_robot",
            Self::HLift => "h_lift",
            Self::NMax => "n_max",
        }
    }
}

impl CurriculumSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("l", self.extent),
            ("h_robot", self.h_robot),
            ("h_lift", self.h_lift),
            ("n_max", self.n_max),
        ] {
            if !(r.min <= r.max) {
                return Err(Error::Config(format!("curriculum {name}: min > max")));
            }
        }
        if self.h_lift.max > self.h_robot.max {
            return Err(Error::Config("h_lift must not exceed h_robot at the final stage".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("curriculum epsilon must lie in (0, 1)".into()));
        }
        if self.n_steps == 0 || self.window == 0 {
            return Err(Error::Config("curriculum n_steps and window must be >= 1".into()));
        }
        Ok(())
    }

    /// A single-stage spec pinned at the maximum of every parameter.
    pub fn none(self) -> Self {
        let pin = |r: Ramp| Ramp::new(r.max, r.max);
        Self {
            extent: pin(self.extent),
            h_robot: pin(self.h_robot),
            h_lift: pin(self.h_lift),
            n_max: pin(self.n_max),
            n_steps: 1,
            ..self
        }
    }

    pub fn params_at(&self, lambda: f64) -> Result<WorkspaceParams> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("curriculum step {lambda} outside [0, 1]")));
        }
        Ok(WorkspaceParams {
            extent: self.extent.at(lambda),
            h_robot: self.h_robot.at(lambda),
            h_lift: self.h_lift.at(lambda),
            n_max: (self.n_max.at(lambda) + 0.5).floor() as u32,
        })
    }

    pub fn lambda_of(&self, k: usize) -> f64 {
        if self.n_steps <= 1 {
            1.0
        } else {
            k as f64 / (self.n_steps - 1) as f64
        }
    }

    pub fn freeze(mut self, param: CurriculumParam) -> Self {
        let r = match param {
            CurriculumParam::Extent => &mut self.extent,
            CurriculumParam::HRobot => &mut self.h_robot,
            CurriculumParam::HLift => &mut self.h_lift,
            CurriculumParam::NMax => &mut self.n_max,
        };
        r.min = r.max;
        self
    }

    pub fn freeze_named(self, name: &str) -> Result<Self> {
        Ok(self.freeze(name.parse()?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub spec: CurriculumSpec,
    pub k: usize,
    window: VecDeque<bool>,
    /// Window rate that triggered the most recent advancement.
    pub last_trigger_rate: Option<f64>,
}

impl CurriculumState {
    pub fn new(spec: CurriculumSpec) -> Self {
        Self {
            spec,
            k: 0,
            window: VecDeque::with_capacity(spec.window),
            last_trigger_rate: None,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda_of(self.k)
    }

    pub fn params(&self) -> WorkspaceParams {
        self.spec.params_at(self.lambda()).expect("stage lambda is in range")
    }

    /// Mean of the current window, or `None` while it is empty.
    pub fn window_rate(&self) -> Option<f64> {
        (!self.window.is_empty())
            .then(|| self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64)
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn is_final(&self) -> bool {
        self.k + 1 >= self.spec.n_steps
    }

    /// Records an outcome of an episode started at stage `stage`; outcomes
    /// from earlier stages are ignored. Returns whether the stage advanced.
    pub fn record(&mut self, stage: usize, success: bool) -> bool {
        if stage != self.k {
            return false;
        }
        if self.window.len() == self.spec.window {
            self.window.pop_front();
        }
        self.window.push_back(success);
        let full = self.window.len() == self.spec.window;
        let rate = self.window_rate().unwrap_or(0.0);
        if full && !self.is_final() && rate >= self.spec.epsilon {
            self.last_trigger_rate = Some(rate);
            self.k += 1;
            self.window.clear();
            return true;
        }
        false
    }
}
