//! Scripted behavior policies and offline dataset generation.
//!
//! Behaviors track precomputed velocity/position profiles with a one-step
//! feedback correction, so violation episodes have controlled durations:
//! either short enough to recover inside the five-step window or long enough
//! that both the relabeled cost and the robustness sign agree. Trajectories
//! that land in the disagreement band (or tie at zero robustness) are
//! resampled deterministically from a retry-derived seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{per_step_costs, step, EnvConfig, EnvError, EnvKind, EnvState};
use crate::data::{relabel_costs, OfflineDataset, Trajectory};
use crate::stl;

const MAX_ATTEMPTS: usize = 40;

/// Shape of a scripted behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorStyle {
    /// Hold a safe setpoint (cruisers / safe orbits).
    Steady,
    /// Brief excursions past the limit with prompt recovery (run only).
    Pulse,
    /// Sustained limit violation (speeders / wide orbits).
    Sustained,
    /// Position-boundary excursion (run only; aliases Sustained elsewhere).
    Boundary,
}

/// One behavior mode: selection weight, signed safety margin, action noise.
///
/// `margin > 0` keeps the controlled quantity `margin` units inside its
/// limit; `margin < 0` pushes `|margin|` units past it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub fraction: f64,
    pub style: BehaviorStyle,
    pub margin: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMix {
    pub entries: Vec<BehaviorSpec>,
}

impl BehaviorMix {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.entries.is_empty() {
            return Err(EnvError::InvalidConfig("behavior mix is empty".into()));
        }
        if self.entries.iter().any(|e| !(e.fraction > 0.0) || !(e.noise >= 0.0)) {
            return Err(EnvError::InvalidConfig(
                "behavior fractions must be positive and noise nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut impl Rng) -> BehaviorSpec {
        let total: f64 = self.entries.iter().map(|e| e.fraction).sum();
        let mut u = rng.random_range(0.0..total);
        for e in &self.entries {
            if u < e.fraction {
                return *e;
            }
            u -= e.fraction;
        }
        *self.entries.last().expect("nonempty")
    }
}

/// Default mixed-quality behavior population per environment.
///
/// Tuned so roughly a fifth of the trajectories satisfy the built-in
/// specification, unsafe modes collect the highest returns, and safe modes
/// span a range of robustness margins.
pub fn default_mix(kind: EnvKind) -> BehaviorMix {
    let e = |fraction, style, margin, noise| BehaviorSpec {
        fraction,
        style,
        margin,
        noise,
    };
    let entries = match kind {
        EnvKind::Run => vec![
            e(0.07, BehaviorStyle::Steady, 0.35, 0.03),
            e(0.05, BehaviorStyle::Steady, 0.12, 0.02),
            e(0.10, BehaviorStyle::Pulse, 0.04, 0.006),
            e(0.28, BehaviorStyle::Sustained, -0.07, 0.006),
            e(0.30, BehaviorStyle::Sustained, -0.35, 0.01),
            e(0.20, BehaviorStyle::Boundary, -0.40, 0.02),
        ],
        EnvKind::Circle => vec![
            e(0.10, BehaviorStyle::Steady, 0.35, 0.015),
            e(0.08, BehaviorStyle::Steady, 0.18, 0.012),
            e(0.07, BehaviorStyle::Steady, 0.07, 0.006),
            e(0.35, BehaviorStyle::Sustained, -0.22, 0.005),
            e(0.40, BehaviorStyle::Sustained, -0.13, 0.005),
        ],
        EnvKind::Reach => vec![
            e(0.14, BehaviorStyle::Steady, 0.50, 0.01),
            e(0.08, BehaviorStyle::Steady, 0.45, 0.01),
            e(0.25, BehaviorStyle::Steady, 0.12, 0.01),
            e(0.28, BehaviorStyle::Sustained, -0.20, 0.005),
            e(0.25, BehaviorStyle::Sustained, -0.12, 0.005),
        ],
    };
    BehaviorMix { entries }
}

/// Generates `n` trajectories from scripted controllers, fully reproducible
/// from `seed`. Each trajectory is checked for a strict robustness sign
/// (`|rho| > 1e-6`) and, where a relabel rule exists, for agreement between
/// the relabeled-cost sum and the robustness sign; failures are resampled
/// from a retry-derived seed.
pub fn generate_dataset(
    cfg: &EnvConfig,
    n: usize,
    mix: &BehaviorMix,
    seed: u64,
) -> Result<OfflineDataset, EnvError> {
    cfg.validate()?;
    mix.validate()?;
    if n == 0 {
        return Err(EnvError::InvalidConfig("n must be >= 1".into()));
    }
    let phi = cfg.spec();
    let spec_text = phi.to_string();
    let mut trajectories = Vec::with_capacity(n);
    for index in 0..n {
        let mut accepted = None;
        for retry in 0..MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64, retry as u64));
            let spec = mix.pick(&mut rng);
            let traj = rollout_behavior(cfg, &spec, &mut rng);
            let sig = traj.signal().map_err(crate::data::DataError::from)?;
            let rho = stl::robustness(&sig, 1, &phi).map_err(crate::data::DataError::from)?;
            if rho.abs() <= 1e-6 {
                continue;
            }
            if matches!(cfg.kind, EnvKind::Run | EnvKind::Circle) {
                let relabeled = relabel_costs(&traj, cfg.kind)?;
                let total: f64 = relabeled.iter().sum();
                if (total == 0.0) != (rho > 0.0) {
                    continue;
                }
            }
            accepted = Some(traj);
            break;
        }
        trajectories.push(accepted.ok_or(EnvError::Generation {
            index,
            attempts: MAX_ATTEMPTS,
        })?);
    }
    Ok(OfflineDataset::new(
        cfg.kind.to_string(),
        spec_text,
        trajectories,
    )?)
}

/// SplitMix64-style mixing of (seed, trajectory index, retry counter).
fn derive_seed(seed: u64, index: u64, retry: u64) -> u64 {
    let mut z = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ retry.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rollout_behavior(cfg: &EnvConfig, spec: &BehaviorSpec, rng: &mut ChaCha8Rng) -> Trajectory {
    let init = cfg.reset(rng);
    match cfg.kind {
        EnvKind::Run => rollout_run(cfg, spec, init, rng),
        EnvKind::Circle | EnvKind::Reach => rollout_orbit(cfg, spec, init, rng),
    }
}

fn record_rollout(
    cfg: &EnvConfig,
    init: EnvState,
    mut act: impl FnMut(usize, &EnvState) -> [f64; 2],
) -> Trajectory {
    let t_len = cfg.horizon;
    let mut states = Vec::with_capacity(t_len);
    let mut actions = Vec::with_capacity(t_len);
    let mut rewards = Vec::with_capacity(t_len);
    let mut costs_p = Vec::with_capacity(t_len);
    let mut costs_v = Vec::with_capacity(t_len);
    let mut state = init;
    for k in 0..t_len {
        let a = act(k, &state);
        let b = cfg.action_bound;
        let a = [a[0].clamp(-b, b), a[1].clamp(-b, b)];
        let (c_p, c_v) = per_step_costs(cfg, &state);
        let (next, reward) = step(cfg, &state, a);
        states.push(state.channels());
        actions.push(a.to_vec());
        rewards.push(reward);
        costs_p.push(c_p);
        costs_v.push(c_v);
        state = next;
    }
    Trajectory {
        schema: super::state_schema(),
        states,
        actions,
        rewards,
        costs_p,
        costs_v: if cfg.kind == EnvKind::Run {
            Some(costs_v)
        } else {
            None
        },
        relabeled_costs: None,
        rho_pre: None,
        rho_suf: None,
        rtg: None,
    }
}

/// Piecewise-linear profile builder: values advance toward each target at
/// the given per-step rate, holding once reached.
struct ProfileBuilder {
    values: Vec<f64>,
}

impl ProfileBuilder {
    fn new(start: f64) -> Self {
        Self { values: vec![start] }
    }

    fn last(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }

    fn len(&self) -> usize {
        self.values.len()
    }

    /// Moves toward `target` at `rate` per step until reached.
    fn ramp_to(&mut self, target: f64, rate: f64) {
        let mut v = self.last();
        while (v - target).abs() > 1e-12 {
            let delta = (target - v).clamp(-rate, rate);
            v += delta;
            self.values.push(v);
        }
    }

    fn hold(&mut self, steps: usize) {
        let v = self.last();
        for _ in 0..steps {
            self.values.push(v);
        }
    }

    fn finish(mut self, len: usize) -> Vec<f64> {
        let v = self.last();
        while self.values.len() < len {
            self.values.push(v);
        }
        self.values.truncate(len);
        self.values
    }
}

fn rollout_run(
    cfg: &EnvConfig,
    spec: &BehaviorSpec,
    init: EnvState,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let t_len = cfg.horizon;
    let max_rate = 0.9 * cfg.action_bound * cfg.dt;
    let v_lim = cfg.v_lim;
    let jitter = rng.random_range(0.85..1.15);

    let mut vstar = ProfileBuilder::new(init.vx);
    let mut ystar = ProfileBuilder::new(init.y);
    match spec.style {
        BehaviorStyle::Steady => {
            let target = ((1.0 - spec.margin * jitter) * v_lim).clamp(0.15, v_lim - 0.08);
            vstar.ramp_to(target, max_rate);
            let y_hold = rng.random_range(-0.4..0.4);
            ystar.ramp_to(y_hold, 0.03);
        }
        BehaviorStyle::Pulse => {
            // Brief speed pulses: slow climb through the limit, sharp fall.
            // Time above the limit stays at <= 4 steps so the five-step
            // recovery window always closes.
            let base = 0.85 * v_lim;
            let peak = v_lim * (1.0 + (spec.margin * jitter).clamp(0.025, 0.05));
            let rise = rng.random_range(0.027..0.033);
            vstar.ramp_to(base, max_rate);
            vstar.hold(rng.random_range(2..5));
            let pulse_len = ((peak - base) / rise).ceil() as usize
                + ((peak - base) / max_rate).ceil() as usize;
            while vstar.len() + pulse_len + 12 < t_len {
                vstar.ramp_to(peak, rise);
                vstar.ramp_to(base, max_rate);
                vstar.hold(rng.random_range(4..8));
            }
            ystar.ramp_to(rng.random_range(-0.3..0.3), 0.03);
        }
        BehaviorStyle::Sustained => {
            let target = ((1.0 - spec.margin * jitter) * v_lim).min(2.2);
            // Budget the pre-speeding cruise so the violation run still
            // reaches comfortably past the five-step relabel window.
            let to_cruise = ((0.9 * v_lim - init.vx).max(0.0) / max_rate).ceil() as usize;
            let budget = t_len.saturating_sub(to_cruise + 10);
            if budget >= 4 {
                vstar.ramp_to(0.9 * v_lim, max_rate);
                vstar.hold(rng.random_range(0..budget.min(12)));
            }
            vstar.ramp_to(target, max_rate);
            ystar.ramp_to(rng.random_range(-0.3..0.3), 0.03);
        }
        BehaviorStyle::Boundary => {
            vstar.ramp_to(0.8 * v_lim, max_rate);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let depth = side * (cfg.y_lim - spec.margin * jitter);
            ystar.hold(rng.random_range(8..20));
            ystar.ramp_to(depth, 0.05);
            ystar.hold(rng.random_range(8..16));
            ystar.ramp_to(0.0, 0.05);
        }
    }
    let vstar = vstar.finish(t_len + 2);
    let ystar = ystar.finish(t_len + 2);
    let noise = spec.noise;
    record_rollout(cfg, init, move |k, state| {
        let n1: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
        let n2: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
        let ax = (vstar[k + 1] - state.vx) / cfg.dt + n1;
        let vy_des = ((ystar[k + 1] - state.y) / cfg.dt).clamp(-0.35, 0.35);
        let ay = (vy_des - state.vy) / cfg.dt + n2;
        [ax, ay]
    })
}

fn rollout_orbit(
    cfg: &EnvConfig,
    spec: &BehaviorSpec,
    init: EnvState,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let t_len = cfg.horizon;
    let jitter = rng.random_range(0.9..1.1);
    // Semi-axis along x controls safety: x_lim - margin.
    let semi_x_target = (cfg.x_lim - spec.margin * jitter).clamp(0.35, cfg.x_lim + 0.45);
    let wide = semi_x_target > cfg.x_lim;
    let semi_y_target = if cfg.kind == EnvKind::Reach && !wide {
        rng.random_range(0.45..0.65)
    } else {
        rng.random_range(0.8..1.0)
    };
    let semi_max = semi_x_target.max(semi_y_target);
    // Keep the centripetal acceleration within the action bound.
    let speed_target = (0.8 * cfg.action_bound * semi_max).sqrt()
        * if cfg.kind == EnvKind::Reach && !wide {
            1.0
        } else {
            rng.random_range(0.88..0.99)
        };

    let theta0 = init.y.atan2(init.x);
    let r0 = (init.x * init.x + init.y * init.y).sqrt();
    let ramp_start = 8;
    let shrink_start = t_len.saturating_sub(18);

    // Precompute the target path: phase advances with the commanded speed,
    // amplitudes ramp out at `ramp_start` and (for wide orbits) back in at
    // `shrink_start` so violation runs end well before the horizon.
    let mut px = Vec::with_capacity(t_len + 2);
    let mut py = Vec::with_capacity(t_len + 2);
    let mut theta = theta0;
    let mut amp_x = r0;
    let mut amp_y = r0;
    let mut speed = init.speed().max(0.2);
    for k in 0..t_len + 2 {
        px.push(amp_x * theta.cos());
        py.push(amp_y * theta.sin());
        let (ax_target, ay_target) = if wide && k >= shrink_start {
            (0.86, semi_y_target.min(0.9))
        } else if k >= ramp_start {
            (semi_x_target, semi_y_target)
        } else {
            (r0, r0)
        };
        amp_x += (ax_target - amp_x).clamp(-0.04, 0.04);
        amp_y += (ay_target - amp_y).clamp(-0.04, 0.04);
        speed += (speed_target - speed).clamp(-0.05, 0.05);
        let r_mean = 0.5 * (amp_x + amp_y);
        theta += speed * cfg.dt / r_mean.max(0.2);
    }

    let noise = spec.noise;
    let v_cap = speed_target * 1.4 + 0.3;
    record_rollout(cfg, init, move |k, state| {
        let n1: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
        let n2: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
        let mut vx_des = (px[k + 1] - state.x) / cfg.dt;
        let mut vy_des = (py[k + 1] - state.y) / cfg.dt;
        let norm = (vx_des * vx_des + vy_des * vy_des).sqrt();
        if norm > v_cap {
            vx_des *= v_cap / norm;
            vy_des *= v_cap / norm;
        }
        let ax = (vx_des - state.vx) / cfg.dt + n1;
        let ay = (vy_des - state.vy) / cfg.dt + n2;
        [ax, ay]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::robustness;

    fn single_mix(style: BehaviorStyle, margin: f64, noise: f64) -> BehaviorMix {
        BehaviorMix {
            entries: vec![BehaviorSpec {
                fraction: 1.0,
                style,
                margin,
                noise,
            }],
        }
    }

    #[test]
    fn conservative_zero_noise_trajectory_is_safe() {
        let cfg = EnvConfig::new(EnvKind::Run);
        let mix = single_mix(BehaviorStyle::Steady, 0.35, 0.0);
        let ds = generate_dataset(&cfg, 1, &mix, 42).unwrap();
        let phi = cfg.spec();
        let sig = ds.trajectories[0].signal().unwrap();
        assert!(robustness(&sig, 1, &phi).unwrap() > 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = EnvConfig::new(EnvKind::Circle);
        let mix = default_mix(EnvKind::Circle);
        let a = generate_dataset(&cfg, 12, &mix, 7).unwrap();
        let b = generate_dataset(&cfg, 12, &mix, 7).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn aggressive_mix_is_mostly_unsafe() {
        let cfg = EnvConfig::new(EnvKind::Run);
        let mix = single_mix(BehaviorStyle::Sustained, -0.3, 0.01);
        let ds = generate_dataset(&cfg, 30, &mix, 3).unwrap();
        assert!(ds.stats.as_ref().unwrap().satisfaction_fraction < 0.5);
    }

    #[test]
    fn default_mix_satisfaction_fraction_in_band() {
        for kind in [EnvKind::Run, EnvKind::Circle, EnvKind::Reach] {
            let cfg = EnvConfig::new(kind);
            let ds = generate_dataset(&cfg, 120, &default_mix(kind), 11).unwrap();
            let frac = ds.stats.as_ref().unwrap().satisfaction_fraction;
            assert!(
                (0.05..=0.40).contains(&frac),
                "{kind}: satisfaction fraction {frac}"
            );
        }
    }

    #[test]
    fn relabel_agrees_with_robustness_on_generated_data() {
        for kind in [EnvKind::Run, EnvKind::Circle] {
            let cfg = EnvConfig::new(kind);
            let ds = generate_dataset(&cfg, 60, &default_mix(kind), 19).unwrap();
            let phi = cfg.spec();
            for traj in &ds.trajectories {
                let sig = traj.signal().unwrap();
                let rho = robustness(&sig, 1, &phi).unwrap();
                let total: f64 = relabel_costs(traj, kind).unwrap().iter().sum();
                assert!(rho.abs() > 1e-6);
                assert_eq!(total == 0.0, rho > 0.0, "{kind}: rho={rho} cost={total}");
            }
        }
    }

    #[test]
    fn circle_reward_tension() {
        // The best safe trajectory earns strictly less than the best overall.
        let cfg = EnvConfig::new(EnvKind::Circle);
        let ds = generate_dataset(&cfg, 120, &default_mix(EnvKind::Circle), 29).unwrap();
        let phi = cfg.spec();
        let mut best_safe = f64::NEG_INFINITY;
        let mut best_all = f64::NEG_INFINITY;
        for traj in &ds.trajectories {
            let sig = traj.signal().unwrap();
            let rho = robustness(&sig, 1, &phi).unwrap();
            let total = traj.total_reward();
            best_all = best_all.max(total);
            if rho > 0.0 {
                best_safe = best_safe.max(total);
            }
        }
        assert!(
            best_safe < best_all,
            "best safe {best_safe} vs best overall {best_all}"
        );
    }

    #[test]
    fn reach_orbits_pass_through_goal() {
        let cfg = EnvConfig::new(EnvKind::Reach);
        let mix = single_mix(BehaviorStyle::Steady, 0.5, 0.0);
        let ds = generate_dataset(&cfg, 4, &mix, 5).unwrap();
        let phi = cfg.spec();
        for traj in &ds.trajectories {
            let sig = traj.signal().unwrap();
            assert!(robustness(&sig, 1, &phi).unwrap() > 0.0);
        }
    }
}
