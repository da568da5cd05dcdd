//! Closed-loop evaluation: conditioned rollouts, target-suffix schedules,
//! satisfaction metrics, and the target/achieved alignment sweep.
//!
//! Each step recomputes the prefix robustness from the states observed so
//! far, reads the target suffix from a precomputed schedule, queries the
//! policy on the last K token groups, executes the action, and updates the
//! return-to-go autoregressively (`R_{t+1} = R_t - r_t`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalized_reward, relabel_costs, DataError, Trajectory};
use crate::envs::{per_step_costs, step, EnvConfig, EnvError, EnvKind};
use crate::policy::{PolicyError, TokenBatch, TokenKind};
use crate::stl::{self, EvalError as StlError, Formula, Signal};
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("config: {0}")]
    Config(String),
    #[error("schedule kind `{0}` needs dataset suffix statistics in the checkpoint")]
    MissingStats(String),
    #[error("checkpoint schema {ckpt:?} does not match environment schema {env:?}")]
    SchemaMismatch { ckpt: Vec<String>, env: Vec<String> },
    #[error("non-finite action at step {step}")]
    NonFiniteAction { step: usize },
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Target-suffix schedule kinds. `fixed:v | linear:v | mean | max` in the
/// CLI; omitted values fall back to the checkpoint's dataset-derived default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SuffixSchedule {
    Fixed(Option<f64>),
    Linear(Option<f64>),
    Mean,
    Max,
}

impl std::str::FromStr for SuffixSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_v = |v: &str| -> Result<f64, String> {
            v.parse().map_err(|_| format!("bad schedule value `{v}`"))
        };
        match s.split_once(':') {
            None => match s {
                "fixed" => Ok(SuffixSchedule::Fixed(None)),
                "linear" => Ok(SuffixSchedule::Linear(None)),
                "mean" => Ok(SuffixSchedule::Mean),
                "max" => Ok(SuffixSchedule::Max),
                other => Err(format!("unknown schedule `{other}`")),
            },
            Some(("fixed", v)) => Ok(SuffixSchedule::Fixed(Some(parse_v(v)?))),
            Some(("linear", v)) => Ok(SuffixSchedule::Linear(Some(parse_v(v)?))),
            Some((other, _)) => Err(format!("unknown schedule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Target return-to-go at step 1; `None` takes the checkpoint default.
    pub target_reward: Option<f64>,
    pub schedule: SuffixSchedule,
    pub action_mode: ActionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            seed: 0,
            target_reward: None,
            schedule: SuffixSchedule::Fixed(None),
            action_mode: ActionMode::Mean,
        }
    }
}

/// Builds the per-step target-suffix values for a `horizon`-step episode.
pub fn suffix_schedule(
    kind: SuffixSchedule,
    default_target: Option<f64>,
    suffix_mean: Option<&[f64]>,
    suffix_max: Option<&[f64]>,
    horizon: usize,
) -> Result<Vec<f64>, RolloutError> {
    let fallback = |v: Option<f64>| {
        v.or(default_target).ok_or_else(|| {
            RolloutError::Config("no target suffix given and no dataset default available".into())
        })
    };
    match kind {
        SuffixSchedule::Fixed(v) => Ok(vec![fallback(v)?; horizon]),
        SuffixSchedule::Linear(v) => {
            let target = fallback(v)?;
            if horizon == 1 {
                return Ok(vec![target]);
            }
            Ok((0..horizon)
                .map(|i| target * i as f64 / (horizon - 1) as f64)
                .collect())
        }
        SuffixSchedule::Mean => stat_curve(suffix_mean, "mean", horizon),
        SuffixSchedule::Max => stat_curve(suffix_max, "max", horizon),
    }
}

fn stat_curve(curve: Option<&[f64]>, name: &str, horizon: usize) -> Result<Vec<f64>, RolloutError> {
    let curve = curve.ok_or_else(|| RolloutError::MissingStats(name.to_string()))?;
    if curve.is_empty() {
        return Err(RolloutError::MissingStats(name.to_string()));
    }
    let mut out: Vec<f64> = curve.iter().copied().take(horizon).collect();
    while out.len() < horizon {
        out.push(*curve.last().expect("nonempty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub relabeled_cost: Option<f64>,
    pub robustness: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub spec: String,
    pub episodes: Vec<EpisodeResult>,
    pub target_reward: f64,
    pub schedule: SuffixSchedule,
    pub satisfaction_rate: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub normalized_reward_mean: Option<f64>,
    pub normalized_reward_std: Option<f64>,
    pub cost_mean: Option<f64>,
    pub cost_std: Option<f64>,
    /// Achieved suffix = full-trace robustness of the realized episode.
    pub suffix_mean: f64,
    pub suffix_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Result of a single closed-loop episode, including the realized trajectory.
pub struct Episode {
    pub trajectory: Trajectory,
    pub rtg_sequence: Vec<f64>,
    pub prefix_sequence: Vec<f64>,
}

/// Rolls one episode with the policy conditioned on `schedule` and
/// `target_reward`; `rng` drives the initial state and (in sample mode) the
/// action noise.
pub fn rollout_episode(
    checkpoint: &Checkpoint,
    env: &EnvConfig,
    phi: &Formula,
    schedule: &[f64],
    target_reward: f64,
    action_mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, RolloutError> {
    let policy = checkpoint.policy();
    let config = &policy.config;
    let schema = crate::envs::state_schema();
    if checkpoint.meta.schema != schema {
        return Err(RolloutError::SchemaMismatch {
            ckpt: checkpoint.meta.schema.clone(),
            env: schema,
        });
    }
    phi.validate(&schema)?;
    let horizon = env.horizon;
    let k = config.context;
    let state_dim = config.state_dim;
    let action_dim = config.action_dim;
    let needs_rp = config.layout.position_of(TokenKind::RewardPrefix).is_some();

    let mut state = env.reset(rng);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut actions: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut rewards: Vec<f64> = Vec::with_capacity(horizon);
    let mut costs_p = Vec::with_capacity(horizon);
    let mut costs_v = Vec::with_capacity(horizon);
    let mut rtg_seq = Vec::with_capacity(horizon);
    let mut prefix_seq = Vec::with_capacity(horizon);
    // token groups observed so far: (suffix, prefix, rtg, reward_prefix, state, action)
    let mut groups: Vec<(f64, f64, f64, f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(horizon);
    let mut r_t = target_reward;
    let mut reward_so_far = 0.0;

    for t in 1..=horizon {
        states.push(state.channels());
        let sig = Signal::new(schema.clone(), states.clone())?;
        let rho_pre = stl::robustness(&sig, 1, phi)?;
        prefix_seq.push(rho_pre);
        rtg_seq.push(r_t);
        groups.push((
            schedule[t - 1],
            rho_pre,
            r_t,
            reward_so_far,
            state.channels(),
            vec![0.0; action_dim],
        ));

        let window = &groups[groups.len().saturating_sub(k)..];
        let pad = k - window.len();
        let mut batch = TokenBatch {
            batch: 1,
            context: k,
            suffix: vec![0.0; k],
            prefix: vec![0.0; k],
            reward_prefix: needs_rp.then(|| vec![0.0; k]),
            rtg: vec![0.0; k],
            states: vec![0.0; k * state_dim],
            actions: vec![0.0; k * action_dim],
            targets: vec![0.0; k * action_dim],
            timesteps: vec![0; k],
            mask: vec![0.0; k],
        };
        for (slot, group) in window.iter().enumerate() {
            let j = pad + slot;
            batch.suffix[j] = group.0;
            batch.prefix[j] = group.1;
            batch.rtg[j] = group.2;
            if let Some(rp) = batch.reward_prefix.as_mut() {
                rp[j] = group.3;
            }
            batch.states[j * state_dim..(j + 1) * state_dim].copy_from_slice(&group.4);
            batch.actions[j * action_dim..(j + 1) * action_dim].copy_from_slice(&group.5);
            batch.timesteps[j] = (t - window.len() + slot + 1).min(config.max_timestep);
            batch.mask[j] = 1.0;
        }
        let (means, std) = policy.distribution(&batch)?;
        let last = k - 1;
        let mut action = [0.0f64; 2];
        for d in 0..action_dim.min(2) {
            let mean = means[last * action_dim + d];
            action[d] = match action_mode {
                ActionMode::Mean => mean,
                ActionMode::Sample => mean + std[d] * rng.sample::<f64, _>(StandardNormal),
            };
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(RolloutError::NonFiniteAction { step: t });
        }
        let b = env.action_bound;
        let clipped = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
        groups.last_mut().expect("nonempty").5 = clipped.to_vec();

        let (c_p, c_v) = per_step_costs(env, &state);
        let (next, reward) = step(env, &state, clipped);
        actions.push(clipped.to_vec());
        rewards.push(reward);
        costs_p.push(c_p);
        costs_v.push(c_v);
        reward_so_far += reward;
        r_t -= reward;
        state = next;
    }

    let trajectory = Trajectory {
        schema,
        states,
        actions,
        rewards,
        costs_p,
        costs_v: (env.kind == EnvKind::Run).then_some(costs_v),
        relabeled_costs: None,
        rho_pre: None,
        rho_suf: None,
        rtg: None,
    };
    Ok(Episode {
        trajectory,
        rtg_sequence: rtg_seq,
        prefix_sequence: prefix_seq,
    })
}

/// Runs `episodes` independent rollouts and aggregates the metrics.
pub fn rollout(
    checkpoint: &Checkpoint,
    env: &EnvConfig,
    phi: &Formula,
    eval: &EvalConfig,
) -> Result<EvalReport, RolloutError> {
    if eval.episodes == 0 {
        return Err(RolloutError::Config("episodes must be >= 1".into()));
    }
    env.validate()?;
    let meta = &checkpoint.meta;
    let schedule = suffix_schedule(
        eval.schedule,
        meta.default_target_suffix,
        meta.suffix_mean_curve.as_deref(),
        meta.suffix_max_curve.as_deref(),
        env.horizon,
    )?;
    let target_reward = eval
        .target_reward
        .or(meta.default_target_reward)
        .ok_or_else(|| {
            RolloutError::Config("no target reward given and no dataset default available".into())
        })?;

    let mut results = Vec::with_capacity(eval.episodes);
    let mut rewards = Vec::with_capacity(eval.episodes);
    let mut suffixes = Vec::with_capacity(eval.episodes);
    let mut costs = Vec::new();
    for episode in 0..eval.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_episode_seed(eval.seed, episode as u64));
        let ep = rollout_episode(
            checkpoint,
            env,
            phi,
            &schedule,
            target_reward,
            eval.action_mode,
            &mut rng,
        )?;
        let sig = ep.trajectory.signal()?;
        let rho = stl::robustness(&sig, 1, phi)?;
        let total_reward = ep.trajectory.total_reward();
        let relabeled = match env.kind {
            EnvKind::Run | EnvKind::Circle => {
                Some(relabel_costs(&ep.trajectory, env.kind)?.iter().sum::<f64>())
            }
            EnvKind::Reach => None,
        };
        if let Some(c) = relabeled {
            costs.push(c);
        }
        rewards.push(total_reward);
        suffixes.push(rho);
        results.push(EpisodeResult {
            total_reward,
            relabeled_cost: relabeled,
            robustness: rho,
            satisfied: rho > 0.0,
        });
    }
    let satisfaction_rate =
        results.iter().filter(|r| r.satisfied).count() as f64 / results.len() as f64;
    let (reward_mean, reward_std) = mean_std(&rewards);
    let (suffix_mean, suffix_std) = mean_std(&suffixes);
    let normalized = match (meta.r_min, meta.r_max) {
        (Some(lo), Some(hi)) if hi > lo => {
            let normed: Vec<f64> = rewards
                .iter()
                .map(|r| normalized_reward(*r, lo, hi).expect("hi > lo"))
                .collect();
            Some(mean_std(&normed))
        }
        _ => None,
    };
    let cost = (!costs.is_empty()).then(|| mean_std(&costs));
    Ok(EvalReport {
        env: env.kind.to_string(),
        spec: phi.to_string(),
        episodes: results,
        target_reward,
        schedule: eval.schedule,
        satisfaction_rate,
        reward_mean,
        reward_std,
        normalized_reward_mean: normalized.map(|(m, _)| m),
        normalized_reward_std: normalized.map(|(_, s)| s),
        cost_mean: cost.map(|(m, _)| m),
        cost_std: cost.map(|(_, s)| s),
        suffix_mean,
        suffix_std,
    })
}

fn mix_episode_seed(seed: u64, episode: u64) -> u64 {
    let mut z = seed ^ episode.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub target_reward: f64,
    pub target_suffix: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub suffix_mean: f64,
    pub suffix_std: f64,
    pub satisfaction_rate: f64,
}

/// Evaluates every (target reward, fixed target suffix) grid cell; rows come
/// back sorted by the targets.
pub fn alignment_sweep(
    checkpoint: &Checkpoint,
    env: &EnvConfig,
    phi: &Formula,
    grid: &[(f64, f64)],
    episodes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, RolloutError> {
    if grid.is_empty() {
        return Err(RolloutError::Config("sweep grid is empty".into()));
    }
    let mut cells = grid.to_vec();
    cells.sort_by(|a, b| a.partial_cmp(b).expect("finite targets"));
    let mut rows = Vec::with_capacity(cells.len());
    for (target_reward, target_suffix) in cells {
        let eval = EvalConfig {
            episodes,
            seed,
            target_reward: Some(target_reward),
            schedule: SuffixSchedule::Fixed(Some(target_suffix)),
            action_mode: ActionMode::Mean,
        };
        let report = rollout(checkpoint, env, phi, &eval)?;
        rows.push(SweepRow {
            target_reward,
            target_suffix,
            reward_mean: report.reward_mean,
            reward_std: report.reward_std,
            suffix_mean: report.suffix_mean,
            suffix_std: report.suffix_std,
            satisfaction_rate: report.satisfaction_rate,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(
        out,
        "target_reward,target_suffix,reward_mean,reward_std,suffix_mean,suffix_std,satisfaction_rate"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.target_reward,
            r.target_suffix,
            r.reward_mean,
            r.reward_std,
            r.suffix_mean,
            r.suffix_std,
            r.satisfaction_rate
        )?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|a, b| vals[*a].partial_cmp(&vals[*b]).expect("finite"));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov = rx
        .iter()
        .zip(&ry)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / rx.len() as f64;
    cov / (sx * sy)
}
