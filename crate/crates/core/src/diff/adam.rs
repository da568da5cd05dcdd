use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Array, DiffError};

/// Named parameter arrays, ordered so serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    pub entries: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Array {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|a| a.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected adaptive-moment update over every named gradient.
///
/// Deterministic; errors on the first non-finite gradient, naming the
/// parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), DiffError> {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(DiffError::NonFinite {
                param: name.clone(),
            });
        }
        let param = params
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
        let n = param.numel();
        assert_eq!(
            grad.numel(),
            n,
            "adam: gradient shape {:?} != parameter shape {:?} for `{name}`",
            grad.shape(),
            param.shape()
        );
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Writes the parameter map as JSON (`name -> {shape, data}`); floats use
/// shortest-round-trip decimal form so load/save is exact.
pub fn save_params(params: &ParamStore, path: impl AsRef<Path>) -> Result<(), DiffError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer(file, params).map_err(|e| DiffError::Checkpoint(e.to_string()))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore, DiffError> {
    let file = BufReader::new(File::open(path)?);
    serde_json::from_reader(file).map_err(|e| DiffError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, values: Vec<f64>) -> BTreeMap<String, Array> {
        let mut grads = BTreeMap::new();
        grads.insert(name.to_string(), Array::new(vec![values.len()], values));
        grads
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Array::new(vec![2], vec![1.0, -2.0]));
        let mut state = AdamState::new();
        adam_step(
            &mut params,
            &grads_of("w", vec![0.0, 0.0]),
            &mut state,
            &AdamConfig::with_lr(1e-3),
        )
        .unwrap();
        assert_eq!(params.get("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // step 1, g = 1: m_hat = 1, v_hat = 1, delta = -lr / (1 + eps)
        let mut params = ParamStore::new();
        params.insert("w", Array::new(vec![1], vec![0.0]));
        let mut state = AdamState::new();
        let cfg = AdamConfig::with_lr(1e-3);
        adam_step(&mut params, &grads_of("w", vec![1.0]), &mut state, &cfg).unwrap();
        let expected = -1e-3 / (1.0 + cfg.eps);
        assert!((params.get("w").data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut params = ParamStore::new();
            params.insert("w", Array::new(vec![2], vec![0.5, -0.5]));
            let mut state = AdamState::new();
            let cfg = AdamConfig::with_lr(1e-2);
            for step in 0..20 {
                let g = vec![(step as f64 * 0.1).sin(), (step as f64 * 0.2).cos()];
                adam_step(&mut params, &grads_of("w", g), &mut state, &cfg).unwrap();
            }
            params.get("w").data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = ParamStore::new();
        params.insert("bad", Array::new(vec![1], vec![0.0]));
        let mut state = AdamState::new();
        let err = adam_step(
            &mut params,
            &grads_of("bad", vec![f64::NAN]),
            &mut state,
            &AdamConfig::with_lr(1e-3),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut params = ParamStore::new();
        params.insert("a", Array::new(vec![3], vec![0.1, 1.0 / 3.0, -2.5e-17]));
        params.insert("b", Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded, params);
    }
}
