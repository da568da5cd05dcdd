//! Token-batch sampling and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{reward_prefix, DataError, OfflineDataset};
use crate::diff::{adam_step, AdamConfig, AdamState, Array, DiffError, ParamStore, Tape};
use crate::policy::{
    Ablation, Arch, Policy, PolicyConfig, PolicyError, Scales, TokenBatch, TokenKind, TokenLayout,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: non-finite loss")]
    NonFinite { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no trajectories satisfy the specification (safe-only training)")]
    NoSafeTrajectories,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Training hyperparameters. Serialized form allows partial JSON; missing
/// fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub context: usize,
    pub lr: f64,
    pub lambda: f64,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub arch: Arch,
    pub ablation: Option<Ablation>,
    /// Train only on trajectories whose full-trace robustness is positive
    /// (the behavior-cloning-on-safe-data baseline).
    pub safe_only: bool,
    pub reward_scale: Option<f64>,
    pub robustness_scale: Option<f64>,
    pub seed: u64,
    /// Print a progress line to stderr every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            context: 8,
            lr: 1e-4,
            lambda: 0.1,
            embed_dim: 64,
            layers: 2,
            heads: 1,
            mlp_hidden: 64,
            arch: Arch::Sdt,
            ablation: None,
            safe_only: false,
            reward_scale: None,
            robustness_scale: None,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 || self.context == 0 {
            return Err(TrainError::Config(
                "steps, batch size, and context must be >= 1".into(),
            ));
        }
        if self.arch == Arch::Mlp && self.context != 1 {
            return Err(TrainError::Config("mlp arch requires context = 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        if self.arch == Arch::Mlp && self.safe_only {
            // BC-safe conditions on the state alone.
            TokenLayout::state_only()
        } else {
            TokenLayout::with_ablation(self.ablation)
        }
    }
}

/// Checkpoint sidecar: everything needed to rebuild the policy and to pick
/// evaluation defaults derived from the training dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub policy: PolicyConfig,
    pub scales: Scales,
    pub env: String,
    pub spec: String,
    pub schema: Vec<String>,
    pub horizon: usize,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub default_target_reward: Option<f64>,
    pub default_target_suffix: Option<f64>,
    pub suffix_mean_curve: Option<Vec<f64>>,
    pub suffix_max_curve: Option<Vec<f64>>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    os.into()
}

impl Checkpoint {
    pub fn policy(&self) -> Policy {
        Policy {
            config: self.meta.policy.clone(),
            scales: self.meta.scales.clone(),
            params: self.params.clone(),
        }
    }

    /// Writes the parameter map at `path` and the sidecar at
    /// `<path>.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        crate::diff::save_params(&self.params, path)?;
        let sidecar = std::fs::File::create(sidecar_path(path)).map_err(DiffError::Io)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(sidecar), &self.meta)
            .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let params = crate::diff::load_params(path)?;
        let sidecar = std::fs::File::open(sidecar_path(path)).map_err(DiffError::Io)?;
        let meta = serde_json::from_reader(std::io::BufReader::new(sidecar))
            .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        Ok(Self { meta, params })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
}

pub fn write_loss_csv(log: &[LossRow], path: impl AsRef<Path>) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,nll,entropy")?;
    for row in log {
        writeln!(out, "{},{},{},{}", row.step, row.loss, row.nll, row.entropy)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

/// Precomputed view of one trajectory for batch assembly.
struct AnnotatedTraj {
    states: Vec<f64>,
    actions: Vec<f64>,
    rho_pre: Vec<f64>,
    rho_suf: Vec<f64>,
    rtg: Vec<f64>,
    reward_pre: Vec<f64>,
    len: usize,
}

/// Samples a batch of K-step windows ending at uniformly chosen
/// (trajectory, end-step) pairs; windows reaching before step 1 are
/// front-padded and masked.
pub struct BatchSampler {
    trajs: Vec<AnnotatedTraj>,
    state_dim: usize,
    action_dim: usize,
    context: usize,
    needs_reward_prefix: bool,
}

impl BatchSampler {
    pub fn new(
        dataset: &OfflineDataset,
        layout: &TokenLayout,
        context: usize,
        safe_only: bool,
    ) -> Result<Self, TrainError> {
        if dataset.trajectories.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let eligible: Vec<usize> = if safe_only {
            let safe = dataset.safe_indices()?;
            if safe.is_empty() {
                return Err(TrainError::NoSafeTrajectories);
            }
            safe
        } else {
            (0..dataset.trajectories.len()).collect()
        };
        let state_dim = dataset.schema.len();
        let action_dim = dataset.trajectories[0].actions[0].len();
        let mut trajs = Vec::with_capacity(eligible.len());
        for &i in &eligible {
            let t = &dataset.trajectories[i];
            let (rho_pre, rho_suf, rtg) = match (&t.rho_pre, &t.rho_suf, &t.rtg) {
                (Some(a), Some(b), Some(c)) => (a.clone(), b.clone(), c.clone()),
                _ => {
                    return Err(TrainError::Config(
                        "dataset is not annotated (run annotate first)".into(),
                    ))
                }
            };
            trajs.push(AnnotatedTraj {
                states: t.states.iter().flatten().copied().collect(),
                actions: t.actions.iter().flatten().copied().collect(),
                rho_pre,
                rho_suf,
                rtg,
                reward_pre: reward_prefix(&t.rewards),
                len: t.len(),
            });
        }
        Ok(Self {
            trajs,
            state_dim,
            action_dim,
            context,
            needs_reward_prefix: layout.position_of(TokenKind::RewardPrefix).is_some(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.trajs.iter().map(|t| t.len).max().unwrap_or(0)
    }

    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
        let k = self.context;
        let (s, a) = (self.state_dim, self.action_dim);
        let n = batch_size * k;
        let mut batch = TokenBatch {
            batch: batch_size,
            context: k,
            suffix: vec![0.0; n],
            prefix: vec![0.0; n],
            reward_prefix: self.needs_reward_prefix.then(|| vec![0.0; n]),
            rtg: vec![0.0; n],
            states: vec![0.0; n * s],
            actions: vec![0.0; n * a],
            targets: vec![0.0; n * a],
            timesteps: vec![0; n],
            mask: vec![0.0; n],
        };
        for item in 0..batch_size {
            let traj = &self.trajs[rng.random_range(0..self.trajs.len())];
            let end = rng.random_range(1..=traj.len); // 1-indexed end step
            let pad = k.saturating_sub(end);
            for slot in pad..k {
                let t = end - (k - slot) + 1; // 1-indexed step for this slot
                let ti = t - 1;
                let flat = item * k + slot;
                batch.suffix[flat] = traj.rho_suf[ti];
                batch.prefix[flat] = traj.rho_pre[ti];
                batch.rtg[flat] = traj.rtg[ti];
                if let Some(rp) = batch.reward_prefix.as_mut() {
                    rp[flat] = traj.reward_pre[ti];
                }
                batch.states[flat * s..(flat + 1) * s]
                    .copy_from_slice(&traj.states[ti * s..(ti + 1) * s]);
                batch.actions[flat * a..(flat + 1) * a]
                    .copy_from_slice(&traj.actions[ti * a..(ti + 1) * a]);
                batch.targets[flat * a..(flat + 1) * a]
                    .copy_from_slice(&traj.actions[ti * a..(ti + 1) * a]);
                batch.timesteps[flat] = t;
                batch.mask[flat] = 1.0;
            }
        }
        batch
    }
}

/// Derives input scales from dataset statistics unless overridden.
fn derive_scales(dataset: &OfflineDataset, config: &TrainConfig) -> Scales {
    let stats = dataset.stats.as_ref();
    let state_dim = dataset.schema.len();
    let (state_mean, state_std) = match stats {
        Some(s) => (s.state_mean.clone(), s.state_std.clone()),
        None => (vec![0.0; state_dim], vec![1.0; state_dim]),
    };
    let reward_scale = config.reward_scale.unwrap_or_else(|| {
        dataset
            .trajectories
            .iter()
            .map(|t| t.total_reward().abs())
            .fold(1.0, f64::max)
    });
    let robustness_scale = config.robustness_scale.unwrap_or_else(|| {
        dataset
            .trajectories
            .iter()
            .flat_map(|t| t.rho_pre.iter().chain(t.rho_suf.iter()).flatten())
            .map(|v| v.abs())
            .fold(1.0, f64::max)
    });
    Scales {
        state_mean,
        state_std,
        reward_scale,
        robustness_scale,
    }
}

/// Runs `steps` iterations of sample / loss / backward / Adam, fully
/// reproducible from the config seed. The dataset must be annotated (or is
/// annotated on a working copy if not).
pub fn train(dataset: &OfflineDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut owned;
    let dataset = if dataset
        .trajectories
        .iter()
        .any(|t| t.rho_pre.is_none() || t.rho_suf.is_none() || t.rtg.is_none())
    {
        owned = dataset.clone();
        owned.annotate()?;
        &owned
    } else {
        dataset
    };
    if dataset.trajectories.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let layout = config.layout();
    let sampler = BatchSampler::new(dataset, &layout, config.context, config.safe_only)?;
    let scales = derive_scales(dataset, config);
    let policy_config = PolicyConfig {
        arch: config.arch,
        layout,
        state_dim: dataset.schema.len(),
        action_dim: sampler.action_dim,
        embed_dim: config.embed_dim,
        layers: config.layers,
        heads: config.heads,
        context: config.context,
        max_timestep: sampler.max_len(),
        mlp_hidden: config.mlp_hidden,
        lambda: config.lambda,
    };
    let mut policy = Policy::init(policy_config.clone(), scales.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5DEECE66D));
    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut adam = AdamState::new();
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = sampler.sample(config.batch_size, &mut rng);
        let mut tape = Tape::new();
        let (param_vars, out) = policy
            .loss_on_tape(&mut tape, &batch, true)
            .map_err(|e| match e {
                PolicyError::NonFinite => TrainError::NonFinite { step },
                other => TrainError::Policy(other),
            })?;
        tape.backward(out.loss);
        let mut grads: BTreeMap<String, Array> = BTreeMap::new();
        for (name, var) in &param_vars {
            if let Some(g) = tape.grad(*var) {
                grads.insert(name.clone(), g);
            }
        }
        adam_step(&mut policy.params, &grads, &mut adam, &adam_cfg)?;
        policy.clamp_log_std();
        let row = LossRow {
            step,
            loss: tape.value(out.loss).item(),
            nll: tape.value(out.nll).item(),
            entropy: tape.value(out.entropy).item(),
        };
        if config.eval_every > 0 && step % config.eval_every == 0 {
            eprintln!(
                "step {step}/{}: loss {:.6} nll {:.6} entropy {:.4}",
                config.steps, row.loss, row.nll, row.entropy
            );
        }
        log.push(row);
    }
    let stats = dataset.stats.as_ref();
    let safe = stats.and_then(|s| s.safe.as_ref());
    let meta = CheckpointMeta {
        policy: policy_config,
        scales,
        env: dataset.env.clone(),
        spec: dataset.spec_text.clone(),
        schema: dataset.schema.clone(),
        horizon: sampler.max_len(),
        r_min: safe.map(|s| s.r_min),
        r_max: safe.map(|s| s.r_max),
        default_target_reward: safe.map(|s| s.target_reward_p90),
        default_target_suffix: safe.map(|s| s.median_positive_suffix),
        suffix_mean_curve: safe.map(|s| s.suffix_mean.clone()),
        suffix_max_curve: safe.map(|s| s.suffix_max.clone()),
        train: config.clone(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta,
            params: policy.params,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{default_mix, generate_dataset, EnvConfig, EnvKind};

    fn small_dataset(n: usize, seed: u64) -> OfflineDataset {
        let mut cfg = EnvConfig::new(EnvKind::Run);
        cfg.horizon = 20;
        let mut ds = generate_dataset(&cfg, n, &default_mix(EnvKind::Run), seed).unwrap();
        ds.annotate().unwrap();
        ds
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            steps: 5,
            batch_size: 4,
            context: 4,
            lr: 1e-3,
            embed_dim: 16,
            layers: 1,
            heads: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_batch_pads_short_windows() {
        let ds = small_dataset(3, 1);
        let layout = TokenLayout::standard();
        let sampler = BatchSampler::new(&ds, &layout, 8, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // draw until a window ends early enough to need padding
        let mut found = false;
        for _ in 0..50 {
            let batch = sampler.sample(4, &mut rng);
            for item in 0..batch.batch {
                let row = &batch.mask[item * 8..(item + 1) * 8];
                let pads = row.iter().filter(|m| **m == 0.0).count();
                if pads > 0 {
                    // padding is at the front and timesteps there are zero
                    assert!(row[..pads].iter().all(|m| *m == 0.0));
                    assert!(row[pads..].iter().all(|m| *m == 1.0));
                    assert!(batch.timesteps[item * 8..item * 8 + pads].iter().all(|t| *t == 0));
                    found = true;
                }
            }
            if found {
                break;
            }
        }
        assert!(found, "no padded window sampled");
    }

    #[test]
    fn sample_batch_is_deterministic() {
        let ds = small_dataset(3, 3);
        let layout = TokenLayout::standard();
        let sampler = BatchSampler::new(&ds, &layout, 4, false).unwrap();
        let a = sampler.sample(6, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sampler.sample(6, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn k1_batches_suit_the_mlp() {
        let ds = small_dataset(3, 4);
        let layout = TokenLayout::standard();
        let sampler = BatchSampler::new(&ds, &layout, 1, false).unwrap();
        let batch = sampler.sample(5, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(batch.context, 1);
        assert!(batch.mask.iter().all(|m| *m == 1.0));
    }

    #[test]
    fn train_writes_log_and_is_reproducible() {
        let ds = small_dataset(4, 5);
        let cfg = quick_config();
        let a = train(&ds, &cfg).unwrap();
        assert_eq!(a.log.len(), cfg.steps);
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(
            a.log.iter().map(|r| r.loss).collect::<Vec<_>>(),
            b.log.iter().map(|r| r.loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_step_run_produces_checkpoint() {
        let ds = small_dataset(2, 6);
        let mut cfg = quick_config();
        cfg.steps = 1;
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params, out.checkpoint.params);
        assert_eq!(loaded.meta.spec, out.checkpoint.meta.spec);
    }

    #[test]
    fn overfit_small_dataset() {
        // 200 steps on 4 trajectories cut the loss to well under 10% of its
        // initial value.
        let ds = small_dataset(4, 7);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 16,
            context: 4,
            lr: 1e-2,
            embed_dim: 16,
            layers: 1,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg).unwrap();
        let initial = out.log.first().unwrap().loss;
        let final_loss = out.log.last().unwrap().loss;
        assert!(
            final_loss <= 0.1 * initial,
            "initial {initial}, final {final_loss}"
        );
    }

    #[test]
    fn safe_only_requires_safe_trajectories() {
        let mut cfg = EnvConfig::new(EnvKind::Run);
        cfg.horizon = 30;
        let mix = crate::envs::BehaviorMix {
            entries: vec![crate::envs::BehaviorSpec {
                fraction: 1.0,
                style: crate::envs::BehaviorStyle::Sustained,
                margin: -0.5,
                noise: 0.01,
            }],
        };
        let mut ds = generate_dataset(&cfg, 5, &mix, 8).unwrap();
        ds.annotate().unwrap();
        let train_cfg = TrainConfig {
            safe_only: true,
            arch: Arch::Mlp,
            context: 1,
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&ds, &train_cfg),
            Err(TrainError::NoSafeTrajectories)
        ));
    }
}
