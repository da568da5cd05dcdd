//! Conditioned Gaussian sequence policies.
//!
//! The main model is a pre-norm causal transformer over interleaved per-step
//! token groups (suffix robustness, prefix robustness, return-to-go, state,
//! action), predicting the action distribution from the transformer output
//! at the state token. A two-hidden-layer MLP over the single-step condition
//! serves as the non-sequential baseline; with the condition reduced to the
//! state alone it is the behavior-cloning baseline.

mod model;

pub use model::{GaussianOut, LossOut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Array, ParamStore};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("batch/config mismatch: {0}")]
    Shape(String),
    #[error("token column for {0:?} is required by the layout but missing")]
    MissingColumn(TokenKind),
    #[error("non-finite loss")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Suffix,
    Prefix,
    RewardPrefix,
    ReturnToGo,
    State,
    Action,
}

/// Per-step token group, in sequence order. The action token is always last
/// so the state-token output never sees the current action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub kinds: Vec<TokenKind>,
}

/// Token-column ablations and extensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoPrefix,
    NoSuffix,
    RewardPrefix,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-prefix" => Ok(Ablation::NoPrefix),
            "no-suffix" => Ok(Ablation::NoSuffix),
            "reward-prefix" => Ok(Ablation::RewardPrefix),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

impl TokenLayout {
    /// The standard five-token group (suffix, prefix, return-to-go, state,
    /// action).
    pub fn standard() -> Self {
        Self {
            kinds: vec![
                TokenKind::Suffix,
                TokenKind::Prefix,
                TokenKind::ReturnToGo,
                TokenKind::State,
                TokenKind::Action,
            ],
        }
    }

    /// State and action only (behavior cloning).
    pub fn state_only() -> Self {
        Self {
            kinds: vec![TokenKind::State, TokenKind::Action],
        }
    }

    pub fn with_ablation(ablation: Option<Ablation>) -> Self {
        let mut kinds = Self::standard().kinds;
        match ablation {
            None => {}
            Some(Ablation::NoPrefix) => kinds.retain(|k| *k != TokenKind::Prefix),
            Some(Ablation::NoSuffix) => kinds.retain(|k| *k != TokenKind::Suffix),
            Some(Ablation::RewardPrefix) => {
                let pos = kinds
                    .iter()
                    .position(|k| *k == TokenKind::Prefix)
                    .expect("standard layout has a prefix token")
                    + 1;
                kinds.insert(pos, TokenKind::RewardPrefix);
            }
        }
        Self { kinds }
    }

    pub fn group_size(&self) -> usize {
        self.kinds.len()
    }

    pub fn position_of(&self, kind: TokenKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }

    /// Condition kinds for the MLP baseline: everything except the action.
    pub fn condition_kinds(&self) -> Vec<TokenKind> {
        self.kinds
            .iter()
            .copied()
            .filter(|k| *k != TokenKind::Action)
            .collect()
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.kinds.last() != Some(&TokenKind::Action) {
            return Err(PolicyError::Shape("layout must end with the action token".into()));
        }
        if !self.kinds.contains(&TokenKind::State) {
            return Err(PolicyError::Shape("layout must contain the state token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Sdt,
    Mlp,
}

/// Input normalization recorded with the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub reward_scale: f64,
    pub robustness_scale: f64,
}

impl Scales {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            reward_scale: 1.0,
            robustness_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub layout: TokenLayout,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub max_timestep: usize,
    pub mlp_hidden: usize,
    pub lambda: f64,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        self.layout.validate()?;
        if self.embed_dim % self.heads != 0 {
            return Err(PolicyError::Shape(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.context == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(PolicyError::Shape("zero-sized dimension".into()));
        }
        if self.arch == Arch::Mlp && self.context != 1 {
            return Err(PolicyError::Shape("mlp baseline requires context 1".into()));
        }
        Ok(())
    }
}

/// Padded fixed-context training batch. All per-step columns are row-major
/// `[batch, context]` (times the trailing feature dimension for states and
/// actions); `mask` is 1 for real steps and 0 for front padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub context: usize,
    pub suffix: Vec<f64>,
    pub prefix: Vec<f64>,
    pub reward_prefix: Option<Vec<f64>>,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub targets: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<f64>,
}

impl TokenBatch {
    pub fn validate(&self, config: &PolicyConfig) -> Result<(), PolicyError> {
        let (b, k) = (self.batch, self.context);
        if k != config.context {
            return Err(PolicyError::Shape(format!(
                "batch context {k} != config context {}",
                config.context
            )));
        }
        let expect = |name: &str, len: usize, want: usize| {
            if len != want {
                Err(PolicyError::Shape(format!(
                    "{name}: length {len} != expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        expect("suffix", self.suffix.len(), b * k)?;
        expect("prefix", self.prefix.len(), b * k)?;
        expect("rtg", self.rtg.len(), b * k)?;
        expect("states", self.states.len(), b * k * config.state_dim)?;
        expect("actions", self.actions.len(), b * k * config.action_dim)?;
        expect("targets", self.targets.len(), b * k * config.action_dim)?;
        expect("timesteps", self.timesteps.len(), b * k)?;
        expect("mask", self.mask.len(), b * k)?;
        if let Some(rp) = &self.reward_prefix {
            expect("reward_prefix", rp.len(), b * k)?;
        } else if config.layout.position_of(TokenKind::RewardPrefix).is_some() {
            return Err(PolicyError::MissingColumn(TokenKind::RewardPrefix));
        }
        if self.mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(PolicyError::Shape("mask values must be 0 or 1".into()));
        }
        // Padding is at the front: within each item the mask is nondecreasing.
        for item in 0..b {
            let row = &self.mask[item * k..(item + 1) * k];
            if row.windows(2).any(|w| w[0] > w[1]) {
                return Err(PolicyError::Shape(format!(
                    "mask of batch item {item} is not front-padded"
                )));
            }
        }
        if let Some(t) = self.timesteps.iter().find(|t| **t > config.max_timestep) {
            return Err(PolicyError::Shape(format!(
                "timestep {t} exceeds the embedding table size {}",
                config.max_timestep
            )));
        }
        Ok(())
    }
}

/// A conditioned Gaussian policy: configuration, input scales, parameters.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub scales: Scales,
    pub params: ParamStore,
}

impl Policy {
    /// Initializes parameters deterministically from `seed`: weights
    /// N(0, 0.02), biases and the Gaussian head at zero, layer-norm gains
    /// at one.
    pub fn init(config: PolicyConfig, scales: Scales, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let mut normal = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    use rand::Rng;
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.02
                })
                .collect();
            Array::new(shape, data)
        };
        match config.arch {
            Arch::Sdt => {
                for kind in &config.layout.kinds {
                    let (name, in_dim) = embed_spec(*kind, &config);
                    params.insert(format!("embed.{name}.w"), normal(vec![in_dim, d]));
                    params.insert(format!("embed.{name}.b"), Array::zeros(vec![d]));
                }
                params.insert(
                    "embed.time".to_string(),
                    normal(vec![config.max_timestep + 1, d]),
                );
                for l in 0..config.layers {
                    params.insert(format!("block{l}.ln1.g"), Array::full(vec![d], 1.0));
                    params.insert(format!("block{l}.ln1.b"), Array::zeros(vec![d]));
                    for w in ["wq", "wk", "wv", "wo"] {
                        params.insert(format!("block{l}.attn.{w}"), normal(vec![d, d]));
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        params.insert(format!("block{l}.attn.{b}"), Array::zeros(vec![d]));
                    }
                    params.insert(format!("block{l}.ln2.g"), Array::full(vec![d], 1.0));
                    params.insert(format!("block{l}.ln2.b"), Array::zeros(vec![d]));
                    params.insert(format!("block{l}.mlp.w1"), normal(vec![d, 4 * d]));
                    params.insert(format!("block{l}.mlp.b1"), Array::zeros(vec![4 * d]));
                    params.insert(format!("block{l}.mlp.w2"), normal(vec![4 * d, d]));
                    params.insert(format!("block{l}.mlp.b2"), Array::zeros(vec![d]));
                }
                params.insert("ln_f.g".to_string(), Array::full(vec![d], 1.0));
                params.insert("ln_f.b".to_string(), Array::zeros(vec![d]));
                params.insert(
                    "head.mean.w".to_string(),
                    Array::zeros(vec![d, config.action_dim]),
                );
            }
            Arch::Mlp => {
                let cond_dim: usize = config
                    .layout
                    .condition_kinds()
                    .iter()
                    .map(|k| match k {
                        TokenKind::State => config.state_dim,
                        _ => 1,
                    })
                    .sum();
                let h = config.mlp_hidden;
                params.insert("mlp.w1".to_string(), normal(vec![cond_dim, h]));
                params.insert("mlp.b1".to_string(), Array::zeros(vec![h]));
                params.insert("mlp.w2".to_string(), normal(vec![h, h]));
                params.insert("mlp.b2".to_string(), Array::zeros(vec![h]));
                params.insert(
                    "head.mean.w".to_string(),
                    Array::zeros(vec![h, config.action_dim]),
                );
            }
        }
        params.insert(
            "head.mean.b".to_string(),
            Array::zeros(vec![config.action_dim]),
        );
        params.insert(
            "head.log_std".to_string(),
            Array::zeros(vec![config.action_dim]),
        );
        Ok(Self {
            config,
            scales,
            params,
        })
    }

    /// Clamps the global log-std parameter to `[-5, 2]`.
    pub fn clamp_log_std(&mut self) {
        let arr = self
            .params
            .entries
            .get_mut("head.log_std")
            .expect("log_std present");
        for v in arr.data_mut() {
            *v = v.clamp(-5.0, 2.0);
        }
    }
}

fn embed_spec(kind: TokenKind, config: &PolicyConfig) -> (&'static str, usize) {
    match kind {
        TokenKind::Suffix => ("suffix", 1),
        TokenKind::Prefix => ("prefix", 1),
        TokenKind::RewardPrefix => ("reward_prefix", 1),
        TokenKind::ReturnToGo => ("rtg", 1),
        TokenKind::State => ("state", config.state_dim),
        TokenKind::Action => ("action", config.action_dim),
    }
}
