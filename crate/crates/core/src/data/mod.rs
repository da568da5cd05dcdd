//! Trajectory and offline-dataset model: return-to-go, cost relabeling,
//! robustness annotation, normalization statistics, and JSONL I/O.

mod io;

pub use io::{load_dataset, save_dataset};

use thiserror::Error;

use crate::envs::EnvKind;
use crate::stl::{self, EvalError, Formula, Signal};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trajectory {index}: field `{field}`: {detail}")]
    Schema {
        index: usize,
        field: &'static str,
        detail: String,
    },
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("missing cost channel `{channel}` required for {kind} relabeling")]
    MissingCostChannel { channel: &'static str, kind: EnvKind },
    #[error("cost relabeling is not defined for the {0} environment")]
    RelabelUnsupported(EnvKind),
    #[error("degenerate reward stats: r_max == r_min == {0}")]
    DegenerateRewardStats(f64),
    #[error("dataset has no trajectories satisfying the specification")]
    NoSafeTrajectories,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One episode: per-step states, actions, rewards, and original costs, plus
/// optional relabeled costs and robustness annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schema: Vec<String>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs_p: Vec<f64>,
    pub costs_v: Option<Vec<f64>>,
    pub relabeled_costs: Option<Vec<f64>>,
    pub rho_pre: Option<Vec<f64>>,
    pub rho_suf: Option<Vec<f64>>,
    pub rtg: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// View of the state channels as an STL signal.
    pub fn signal(&self) -> Result<Signal, EvalError> {
        Signal::new(self.schema.clone(), self.states.clone())
    }

    /// Checks the length/finiteness invariants; `index` is used in errors.
    pub fn validate(&self, index: usize) -> Result<(), DataError> {
        let t = self.states.len();
        let err = |field: &'static str, detail: String| DataError::Schema { index, field, detail };
        if t == 0 {
            return Err(err("states", "trajectory must have at least one step".into()));
        }
        for (step, row) in self.states.iter().enumerate() {
            if row.len() != self.schema.len() {
                return Err(err(
                    "states",
                    format!(
                        "step {}: width {} != schema width {}",
                        step + 1,
                        row.len(),
                        self.schema.len()
                    ),
                ));
            }
        }
        let check_len = |name: &'static str, len: usize| {
            if len != t {
                Err(err(name, format!("length {len} != {t}")))
            } else {
                Ok(())
            }
        };
        check_len("actions", self.actions.len())?;
        check_len("rewards", self.rewards.len())?;
        check_len("costs_p", self.costs_p.len())?;
        if let Some(cv) = &self.costs_v {
            check_len("costs_v", cv.len())?;
        }
        if let Some(c) = &self.relabeled_costs {
            check_len("costs_relabeled", c.len())?;
            if let Some(v) = c.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(err("costs_relabeled", format!("value {v} not in {{0,1}}")));
            }
        }
        if let Some(v) = &self.rho_pre {
            check_len("rho_pre", v.len())?;
        }
        if let Some(v) = &self.rho_suf {
            check_len("rho_suf", v.len())?;
        }
        if let Some(v) = &self.rtg {
            check_len("rtg", v.len())?;
        }
        let all_finite = self
            .states
            .iter()
            .flatten()
            .chain(self.actions.iter().flatten())
            .chain(self.rewards.iter())
            .chain(self.costs_p.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(err("states", "non-finite value".into()));
        }
        Ok(())
    }
}

/// `out[t] = sum of rewards from t to the end`; the recurrence
/// `out[t] = out[t+1] + rewards[t]` holds exactly in f64.
pub fn return_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i];
        out[i] = acc;
    }
    out
}

/// Cumulative past reward `out[t] = sum of rewards from 1 to t` (the reward
/// prefix token).
pub fn reward_prefix(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate() {
        acc += r;
        out[i] = acc;
    }
    out
}

/// Relabels per-step costs into a {0,1} signal whose episode sum tracks STL
/// violation.
///
/// Run: `c'_t = 1` iff the position cost fires at `t` or the velocity cost
/// fired at all of the previous five steps. Circle: `c'_t = 1` iff the
/// position cost fired at all of the previous five steps. Steps without a
/// full five-step history never trigger the window condition.
pub fn relabel_costs(traj: &Trajectory, kind: EnvKind) -> Result<Vec<f64>, DataError> {
    let t_len = traj.len();
    let window_fires =
        |costs: &[f64], i: usize| i >= 5 && costs[i - 5..i].iter().all(|c| *c == 1.0);
    match kind {
        EnvKind::Run => {
            let costs_v = traj.costs_v.as_ref().ok_or(DataError::MissingCostChannel {
                channel: "costs_v",
                kind,
            })?;
            Ok((0..t_len)
                .map(|i| {
                    if traj.costs_p[i] == 1.0 || window_fires(costs_v, i) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect())
        }
        EnvKind::Circle => Ok((0..t_len)
            .map(|i| if window_fires(&traj.costs_p, i) { 1.0 } else { 0.0 })
            .collect()),
        EnvKind::Reach => Err(DataError::RelabelUnsupported(kind)),
    }
}

/// Prefix and suffix robustness traces of the trajectory's state signal.
pub fn annotate_robustness(
    traj: &Trajectory,
    phi: &Formula,
) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let sig = traj.signal()?;
    let pre = stl::prefix_trace(&sig, phi)?;
    let suf = stl::suffix_trace(&sig, phi)?;
    Ok((pre, suf))
}

/// `(R_pi - r_min) / (r_max - r_min)`; may leave `[0, 1]` by extrapolation.
pub fn normalized_reward(r_pi: f64, r_min: f64, r_max: f64) -> Result<f64, DataError> {
    if r_max == r_min {
        return Err(DataError::DegenerateRewardStats(r_max));
    }
    Ok((r_pi - r_min) / (r_max - r_min))
}

/// Statistics derived from the safe subset (full-trace robustness > 0).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SafeStats {
    /// Min / max total reward over safe trajectories.
    pub r_min: f64,
    pub r_max: f64,
    /// Per-step mean and max of the suffix trace over safe trajectories,
    /// aligned by step; shorter trajectories drop out beyond their length.
    pub suffix_mean: Vec<f64>,
    pub suffix_max: Vec<f64>,
    /// 90th percentile of safe total rewards (default evaluation target).
    pub target_reward_p90: f64,
    /// Median strictly-positive suffix value (default fixed target suffix).
    pub median_positive_suffix: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub n_trajectories: usize,
    pub n_safe: usize,
    pub satisfaction_fraction: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub safe: Option<SafeStats>,
}

/// A set of trajectories with a declared environment and specification.
///
/// Immutable after construction; `stats` are recomputed deterministically
/// from the trajectories and are `None` only for an empty dataset.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub env: String,
    pub spec_text: String,
    pub schema: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub stats: Option<DatasetStats>,
}

impl OfflineDataset {
    pub fn new(
        env: String,
        spec_text: String,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self, DataError> {
        for (i, traj) in trajectories.iter().enumerate() {
            traj.validate(i)?;
        }
        let schema = trajectories
            .first()
            .map(|t| t.schema.clone())
            .unwrap_or_default();
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.schema != schema {
                return Err(DataError::Schema {
                    index: i,
                    field: "schema",
                    detail: "schema differs from first trajectory".into(),
                });
            }
        }
        let stats = if trajectories.is_empty() {
            None
        } else {
            let phi = stl::parse_formula(&spec_text).map_err(|e| DataError::Malformed {
                line: 1,
                detail: format!("spec: {e}"),
            })?;
            Some(compute_stats(&trajectories, &phi)?)
        };
        Ok(Self {
            env,
            spec_text,
            schema,
            trajectories,
            stats,
        })
    }

    pub fn formula(&self) -> Result<Formula, DataError> {
        stl::parse_formula(&self.spec_text).map_err(|e| DataError::Malformed {
            line: 1,
            detail: format!("spec: {e}"),
        })
    }

    pub fn env_kind(&self) -> Option<EnvKind> {
        self.env.parse().ok()
    }

    /// Parses the declared spec and fills `relabeled_costs`, `rho_pre`,
    /// `rho_suf`, and `rtg` on every trajectory. Relabeling is skipped for
    /// environments without a relabel rule.
    pub fn annotate(&mut self) -> Result<(), DataError> {
        let phi = self.formula()?;
        let kind = self.env_kind();
        for traj in &mut self.trajectories {
            let (pre, suf) = annotate_robustness(traj, &phi)?;
            traj.rho_pre = Some(pre);
            traj.rho_suf = Some(suf);
            traj.rtg = Some(return_to_go(&traj.rewards));
            if let Some(kind) = kind {
                if kind != EnvKind::Reach {
                    traj.relabeled_costs = Some(relabel_costs(traj, kind)?);
                }
            }
        }
        Ok(())
    }

    /// Indices of trajectories whose full-trace robustness is strictly
    /// positive.
    pub fn safe_indices(&self) -> Result<Vec<usize>, DataError> {
        let phi = self.formula()?;
        let mut out = Vec::new();
        for (i, traj) in self.trajectories.iter().enumerate() {
            if stl::robustness(&traj.signal()?, 1, &phi)? > 0.0 {
                out.push(i);
            }
        }
        Ok(out)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

fn compute_stats(trajectories: &[Trajectory], phi: &Formula) -> Result<DatasetStats, DataError> {
    let n = trajectories.len();
    let width = trajectories[0].schema.len();
    let mut sum = vec![0.0; width];
    let mut sum_sq = vec![0.0; width];
    let mut count = 0usize;
    for traj in trajectories {
        for row in &traj.states {
            for (i, v) in row.iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
            count += 1;
        }
    }
    let state_mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let state_std: Vec<f64> = sum_sq
        .iter()
        .zip(&state_mean)
        .map(|(sq, m)| (sq / count as f64 - m * m).max(0.0).sqrt())
        .collect();

    let mut safe_rewards = Vec::new();
    let mut suffix_sum: Vec<f64> = Vec::new();
    let mut suffix_cnt: Vec<usize> = Vec::new();
    let mut suffix_max: Vec<f64> = Vec::new();
    let mut positive_suffixes = Vec::new();
    for traj in trajectories {
        let sig = traj.signal()?;
        if stl::robustness(&sig, 1, phi)? <= 0.0 {
            continue;
        }
        safe_rewards.push(traj.total_reward());
        let suf = match &traj.rho_suf {
            Some(s) => s.clone(),
            None => stl::suffix_trace(&sig, phi)?,
        };
        if suf.len() > suffix_sum.len() {
            suffix_sum.resize(suf.len(), 0.0);
            suffix_cnt.resize(suf.len(), 0);
            suffix_max.resize(suf.len(), f64::NEG_INFINITY);
        }
        for (i, v) in suf.iter().enumerate() {
            suffix_sum[i] += v;
            suffix_cnt[i] += 1;
            if *v > suffix_max[i] {
                suffix_max[i] = *v;
            }
            if *v > 0.0 {
                positive_suffixes.push(*v);
            }
        }
    }
    let n_safe = safe_rewards.len();
    let safe = if n_safe > 0 {
        safe_rewards.sort_by(|a, b| a.partial_cmp(b).unwrap());
        positive_suffixes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let suffix_mean = suffix_sum
            .iter()
            .zip(&suffix_cnt)
            .map(|(s, c)| s / *c as f64)
            .collect();
        Some(SafeStats {
            r_min: safe_rewards[0],
            r_max: *safe_rewards.last().unwrap(),
            suffix_mean,
            suffix_max,
            target_reward_p90: percentile(&safe_rewards, 0.9),
            median_positive_suffix: if positive_suffixes.is_empty() {
                0.0
            } else {
                percentile(&positive_suffixes, 0.5)
            },
        })
    } else {
        None
    };
    Ok(DatasetStats {
        n_trajectories: n,
        n_safe,
        satisfaction_fraction: n_safe as f64 / n as f64,
        state_mean,
        state_std,
        safe,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::stl::parse_formula;

    fn traj_1d(xs: &[f64]) -> Trajectory {
        Trajectory {
            schema: vec!["x".into()],
            states: xs.iter().map(|&v| vec![v]).collect(),
            actions: vec![vec![0.0]; xs.len()],
            rewards: vec![0.0; xs.len()],
            costs_p: vec![0.0; xs.len()],
            costs_v: None,
            relabeled_costs: None,
            rho_pre: None,
            rho_suf: None,
            rtg: None,
        }
    }

    #[test]
    fn return_to_go_examples() {
        assert_eq!(return_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(return_to_go(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(return_to_go(&[-1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn return_to_go_recurrence_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rewards: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rtg = return_to_go(&rewards);
        for t in 0..rewards.len() - 1 {
            assert_eq!(rtg[t], rtg[t + 1] + rewards[t]);
        }
        assert_eq!(rtg[rewards.len() - 1], rewards[rewards.len() - 1]);
    }

    #[test]
    fn reward_prefix_telescopes_with_rtg() {
        let rewards = [1.0, 2.0, 3.0];
        let pre = reward_prefix(&rewards);
        let rtg = return_to_go(&rewards);
        assert_eq!(pre, vec![1.0, 3.0, 6.0]);
        let total: f64 = rewards.iter().sum();
        for t in 0..rewards.len() - 1 {
            assert_eq!(pre[t] + rtg[t + 1], total);
        }
    }

    #[test]
    fn relabel_circle_window() {
        let mut traj = traj_1d(&[0.0; 6]);
        traj.costs_p = vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(
            relabel_costs(&traj, EnvKind::Circle).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
        // no full window, never fires
        let mut traj = traj_1d(&[0.0; 8]);
        traj.costs_p = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(relabel_costs(&traj, EnvKind::Circle).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn relabel_run_position_is_immediate() {
        let mut traj = traj_1d(&[0.0; 3]);
        traj.costs_p = vec![0.0, 0.0, 1.0];
        traj.costs_v = Some(vec![0.0, 0.0, 0.0]);
        assert_eq!(relabel_costs(&traj, EnvKind::Run).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relabel_requires_matching_channels() {
        let traj = traj_1d(&[0.0; 3]);
        assert!(matches!(
            relabel_costs(&traj, EnvKind::Run),
            Err(DataError::MissingCostChannel { .. })
        ));
        assert!(matches!(
            relabel_costs(&traj, EnvKind::Reach),
            Err(DataError::RelabelUnsupported(_))
        ));
    }

    #[test]
    fn annotate_traces() {
        let traj = traj_1d(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G (x < 2)").unwrap();
        let (pre, suf) = annotate_robustness(&traj, &phi).unwrap();
        assert_eq!(pre, vec![1.0, -1.0, -1.0]);
        assert_eq!(suf, vec![-1.0, -1.0, 2.0]);
        assert_eq!(pre[2], suf[0]);
    }

    #[test]
    fn annotate_matches_bruteforce_prefix_suffix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schema: Vec<String> = vec!["a".into(), "b".into()];
        for _ in 0..20 {
            let phi = crate::stl::gen::random_formula(&mut rng, &schema, 3, false);
            let len = rng.random_range(1..=8);
            let sig = crate::stl::gen::random_signal(&mut rng, &schema, len);
            let traj = Trajectory {
                schema: schema.clone(),
                states: sig.rows().to_vec(),
                actions: vec![vec![0.0]; len],
                rewards: vec![0.0; len],
                costs_p: vec![0.0; len],
                costs_v: None,
                relabeled_costs: None,
                rho_pre: None,
                rho_suf: None,
                rtg: None,
            };
            let (pre, suf) = annotate_robustness(&traj, &phi).unwrap();
            for t in 1..=len {
                let pre_brute =
                    crate::stl::robustness_bruteforce(&sig.slice(1, t), 1, &phi).unwrap();
                let suf_brute =
                    crate::stl::robustness_bruteforce(&sig.slice(t, len), 1, &phi).unwrap();
                assert_eq!(pre[t - 1], pre_brute);
                assert_eq!(suf[t - 1], suf_brute);
            }
        }
    }

    #[test]
    fn normalized_reward_examples() {
        assert_eq!(normalized_reward(5.0, 0.0, 10.0).unwrap(), 0.5);
        assert_eq!(normalized_reward(10.0, 0.0, 10.0).unwrap(), 1.0);
        assert_eq!(normalized_reward(12.0, 0.0, 10.0).unwrap(), 1.2);
        assert!(matches!(
            normalized_reward(1.0, 3.0, 3.0),
            Err(DataError::DegenerateRewardStats(_))
        ));
    }

    #[test]
    fn stats_on_small_dataset() {
        let mut safe = traj_1d(&[1.0, 1.5]);
        safe.rewards = vec![1.0, 2.0];
        let mut unsafe_t = traj_1d(&[1.0, 3.0]);
        unsafe_t.rewards = vec![5.0, 5.0];
        let ds =
            OfflineDataset::new("circle".into(), "G (x < 2)".into(), vec![safe, unsafe_t]).unwrap();
        let stats = ds.stats.as_ref().unwrap();
        assert_eq!(stats.n_trajectories, 2);
        assert_eq!(stats.n_safe, 1);
        assert_eq!(stats.satisfaction_fraction, 0.5);
        let safe = stats.safe.as_ref().unwrap();
        assert_eq!(safe.r_min, 3.0);
        assert_eq!(safe.r_max, 3.0);
        // suffix trace of the safe trajectory is [0.5, 0.5]
        assert_eq!(safe.suffix_mean, vec![0.5, 0.5]);
        assert_eq!(safe.suffix_max, vec![0.5, 0.5]);
    }

    #[test]
    fn boundary_robustness_counts_as_unsafe() {
        let traj = traj_1d(&[2.0]);
        let ds = OfflineDataset::new("circle".into(), "G (x < 2)".into(), vec![traj]).unwrap();
        assert_eq!(ds.stats.unwrap().n_safe, 0);
    }
}
