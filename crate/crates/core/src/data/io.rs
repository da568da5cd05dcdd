//! JSONL dataset files: a header line `{"env": ..., "spec": ...}` followed
//! by one trajectory object per line. Numeric fields round-trip bit-exactly
//! (floats are serialized in shortest-round-trip decimal form).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, OfflineDataset, Trajectory};

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    env: String,
    spec: String,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    schema: Vec<String>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    costs_p: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    costs_v: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    costs_relabeled: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho_pre: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho_suf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtg: Option<Vec<f64>>,
}

impl From<&Trajectory> for TrajectoryLine {
    fn from(t: &Trajectory) -> Self {
        Self {
            schema: t.schema.clone(),
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
            costs_p: t.costs_p.clone(),
            costs_v: t.costs_v.clone(),
            costs_relabeled: t.relabeled_costs.clone(),
            rho_pre: t.rho_pre.clone(),
            rho_suf: t.rho_suf.clone(),
            rtg: t.rtg.clone(),
        }
    }
}

impl From<TrajectoryLine> for Trajectory {
    fn from(l: TrajectoryLine) -> Self {
        Self {
            schema: l.schema,
            states: l.states,
            actions: l.actions,
            rewards: l.rewards,
            costs_p: l.costs_p,
            costs_v: l.costs_v,
            relabeled_costs: l.costs_relabeled,
            rho_pre: l.rho_pre,
            rho_suf: l.rho_suf,
            rtg: l.rtg,
        }
    }
}

pub fn save_dataset(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        env: dataset.env.clone(),
        spec: dataset.spec_text.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(io_err)?;
    out.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        serde_json::to_writer(&mut out, &TrajectoryLine::from(traj)).map_err(io_err)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: HeaderLine = loop {
        match lines.next() {
            None => {
                // Entirely empty file: an empty dataset with undefined stats.
                return OfflineDataset::new(String::new(), String::new(), Vec::new());
            }
            Some((idx, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                    line: idx + 1,
                    detail: format!("header: {e}"),
                })?;
            }
        }
    };
    let mut trajectories = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: idx + 1,
                detail: format!("trajectory {}: {e}", trajectories.len()),
            })?;
        trajectories.push(Trajectory::from(parsed));
    }
    OfflineDataset::new(header.env, header.spec, trajectories)
}

fn io_err(e: serde_json::Error) -> DataError {
    DataError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::super::{return_to_go, OfflineDataset, Trajectory};
    use super::*;

    fn sample_dataset() -> OfflineDataset {
        let traj = Trajectory {
            schema: vec!["x".into()],
            states: vec![vec![0.1], vec![0.30000000000000004], vec![1.0 / 3.0]],
            actions: vec![vec![0.5], vec![-0.25], vec![0.0]],
            rewards: vec![0.1, 0.2, -0.05],
            costs_p: vec![0.0, 1.0, 0.0],
            costs_v: None,
            relabeled_costs: None,
            rho_pre: None,
            rho_suf: Some(vec![1.9, 1.7, 1.6666666666666667]),
            rtg: Some(return_to_go(&[0.1, 0.2, -0.05])),
        };
        OfflineDataset::new("circle".into(), "G (x < 2)".into(), vec![traj]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let ds = sample_dataset();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.env, ds.env);
        assert_eq!(loaded.spec_text, ds.spec_text);
        assert_eq!(loaded.trajectories, ds.trajectories);
        assert_eq!(loaded.stats, ds.stats);
        // saving the loaded dataset reproduces the same bytes
        let path2 = dir.path().join("data2.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_dataset(&path).unwrap();
        assert!(ds.trajectories.is_empty());
        assert!(ds.stats.is_none());
    }

    #[test]
    fn malformed_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"env\":\"circle\",\"spec\":\"G (x < 2)\"}\n{\"schema\": [\"x\"]}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(DataError::Malformed { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("trajectory 0"), "detail: {detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_deterministic_across_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&sample_dataset(), &path).unwrap();
        let a = load_dataset(&path).unwrap();
        let b = load_dataset(&path).unwrap();
        assert_eq!(a.stats, b.stats);
    }
}
