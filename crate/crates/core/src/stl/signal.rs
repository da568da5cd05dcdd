use serde::{Deserialize, Serialize};

use super::eval::EvalError;

/// Discrete-time multi-channel signal: `len` steps of `|schema|` finite reals.
///
/// Steps are 1-indexed in the public API, matching the robustness semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    schema: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl Signal {
    pub fn new(schema: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::EmptySignal);
        }
        for (step, row) in values.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(EvalError::RowWidth {
                    step: step + 1,
                    expected: schema.len(),
                    found: row.len(),
                });
            }
            if let Some(&v) = row.iter().find(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite { step: step + 1, value: v });
            }
        }
        Ok(Self { schema, values })
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    /// Row of channel values at 1-indexed step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Sub-signal over 1-indexed inclusive step range `[from, to]`.
    pub fn slice(&self, from: usize, to: usize) -> Signal {
        Signal {
            schema: self.schema.clone(),
            values: self.values[from - 1..to].to_vec(),
        }
    }
}
