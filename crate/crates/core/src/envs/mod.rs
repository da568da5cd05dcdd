//! Deterministic double-integrator point-mass environments (run, circle,
//! reach) with the reward/cost shapes the specifications monitor, plus
//! scripted behavior policies that generate mixed-quality offline datasets.

mod behavior;

pub use behavior::{default_mix, generate_dataset, BehaviorMix, BehaviorSpec, BehaviorStyle};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stl::{circle_spec, reach_spec, run_spec, Formula};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown environment kind `{0}`")]
    UnknownKind(String),
    #[error("trajectory slot {index}: no consistent trajectory after {attempts} attempts")]
    Generation { index: usize, attempts: usize },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Run,
    Circle,
    Reach,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvKind::Run => "run",
            EnvKind::Circle => "circle",
            EnvKind::Reach => "reach",
        };
        write!(f, "{s}")
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "run" => Ok(EnvKind::Run),
            "circle" => Ok(EnvKind::Circle),
            "reach" => Ok(EnvKind::Reach),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }
}

/// State channel names exported to signals and dataset files.
pub const STATE_SCHEMA: [&str; 5] = ["x", "y", "vx", "vy", "speed"];

pub fn state_schema() -> Vec<String> {
    STATE_SCHEMA.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl EnvState {
    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }

    /// Channel row in [`STATE_SCHEMA`] order.
    pub fn channels(&self) -> Vec<f64> {
        vec![self.x, self.y, self.vx, self.vy, self.speed()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Integration step, seconds.
    pub dt: f64,
    /// Per-axis acceleration bound.
    pub action_bound: f64,
    /// Episode length in steps.
    pub horizon: usize,
    pub y_lim: f64,
    pub x_lim: f64,
    pub v_lim: f64,
    /// Target circle radius for the circle/reach reward.
    pub radius: f64,
    pub goal_a: (f64, f64),
    pub goal_b: (f64, f64),
    pub goal_halfwidth: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            dt: 0.1,
            action_bound: 1.0,
            horizon: 60,
            y_lim: 1.0,
            x_lim: 1.0,
            v_lim: 1.5,
            radius: 1.0,
            goal_a: (0.5, 0.0),
            goal_b: (-0.5, 0.0),
            goal_halfwidth: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: String| Err(EnvError::InvalidConfig(msg));
        if !(self.dt > 0.0) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon < 10 {
            return fail(format!("horizon must be >= 10, got {}", self.horizon));
        }
        if !(self.action_bound > 0.0) {
            return fail("action bound must be positive".into());
        }
        if !(self.y_lim > 0.0 && self.x_lim > 0.0 && self.v_lim > 0.0 && self.radius > 0.0) {
            return fail("limits and radius must be positive".into());
        }
        if self.kind == EnvKind::Reach {
            if !(self.goal_halfwidth > 0.0) {
                return fail("goal half-width must be positive".into());
            }
            for (name, g) in [("goal A", self.goal_a), ("goal B", self.goal_b)] {
                if g.0.abs() + self.goal_halfwidth >= self.x_lim {
                    return fail(format!("{name} must lie inside the safe region"));
                }
            }
        }
        Ok(())
    }

    /// The built-in specification instantiated at this config's limits.
    pub fn spec(&self) -> Formula {
        match self.kind {
            EnvKind::Run => run_spec(self.y_lim, self.v_lim),
            EnvKind::Circle => circle_spec(self.x_lim),
            EnvKind::Reach => reach_spec(self.x_lim, self.goal_a, self.goal_b, self.goal_halfwidth),
        }
    }

    /// Initial state distribution. Run starts near the lane center; circle
    /// and reach start on a radius-0.75 ring with a slow tangential velocity.
    pub fn reset(&self, rng: &mut impl rand::Rng) -> EnvState {
        match self.kind {
            EnvKind::Run => EnvState {
                x: 0.0,
                y: rng.random_range(-0.15..0.15),
                vx: rng.random_range(0.0..0.2),
                vy: 0.0,
            },
            EnvKind::Circle | EnvKind::Reach => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let r = 0.75;
                let s = 0.5;
                EnvState {
                    x: r * theta.cos(),
                    y: r * theta.sin(),
                    vx: -s * theta.sin(),
                    vy: s * theta.cos(),
                }
            }
        }
    }
}

/// One Euler step: clip the action, integrate `v += a*dt`, `p += v*dt`, and
/// score the next state. Deterministic; inputs are clipped, never rejected.
pub fn step(cfg: &EnvConfig, state: &EnvState, action: [f64; 2]) -> (EnvState, f64) {
    let b = cfg.action_bound;
    let ax = action[0].clamp(-b, b);
    let ay = action[1].clamp(-b, b);
    let vx = state.vx + ax * cfg.dt;
    let vy = state.vy + ay * cfg.dt;
    let next = EnvState {
        x: state.x + vx * cfg.dt,
        y: state.y + vy * cfg.dt,
        vx,
        vy,
    };
    let reward = reward_of(cfg, &next);
    (next, reward)
}

/// Reward of a state. Run pays forward speed; circle/reach pay tangential
/// progress damped by distance from the target circle.
pub fn reward_of(cfg: &EnvConfig, state: &EnvState) -> f64 {
    match cfg.kind {
        EnvKind::Run => state.vx,
        EnvKind::Circle | EnvKind::Reach => {
            let dist = (state.x * state.x + state.y * state.y).sqrt();
            (-state.y * state.vx + state.x * state.vy) / (1.0 + (dist - cfg.radius).abs())
        }
    }
}

/// Per-step {0,1} cost indicators `(c_p, c_v)`.
///
/// Run: position cost fires on `|y| > y_lim`, velocity cost on
/// `speed > v_lim` (strict). Circle/reach: position cost on `|x| > x_lim`,
/// no velocity cost.
pub fn per_step_costs(cfg: &EnvConfig, state: &EnvState) -> (f64, f64) {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    match cfg.kind {
        EnvKind::Run => (
            ind(state.y.abs() > cfg.y_lim),
            ind(state.speed() > cfg.v_lim),
        ),
        EnvKind::Circle | EnvKind::Reach => (ind(state.x.abs() > cfg.x_lim), 0.0),
    }
}
