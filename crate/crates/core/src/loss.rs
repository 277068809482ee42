//! Relative-error least-squares objective and the experimental dataset table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefix marking observable columns in dataset CSV headers.
pub const OBSERVABLE_PREFIX: &str = "obs_";

/// Relative residuals `(E - M) / E`.
pub fn residuals(observed: &[f64], predicted: &[f64]) -> Result<Vec<f64>> {
    if observed.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    observed
        .iter()
        .zip(predicted)
        .map(|(e, m)| {
            if *e == 0.0 {
                Err(Error::InvalidDataset("observed value is zero".into()))
            } else {
                Ok((e - m) / e)
            }
        })
        .collect()
}

/// `½ Σ r²`.
pub fn objective(residual: &[f64]) -> f64 {
    0.5 * residual.iter().map(|r| r * r).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub inputs: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Experimental conditions with their measured observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_names: Vec<String>,
    pub observable_names: Vec<String>,
    pub conditions: Vec<Condition>,
    /// Per-observable weights applied to the squared residuals; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        input_names: Vec<String>,
        observable_names: Vec<String>,
        conditions: Vec<Condition>,
    ) -> Result<Self> {
        let ds = Self {
            input_names,
            observable_names,
            conditions,
            weights: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.observable_names.len();
        if m == 0 {
            return Err(Error::InvalidDataset("no observable columns".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.inputs.len() != self.input_names.len() || c.observed.len() != m {
                return Err(Error::InvalidDataset(format!(
                    "condition {i} has {} inputs / {} observables, expected {} / {m}",
                    c.inputs.len(),
                    c.observed.len(),
                    self.input_names.len()
                )));
            }
            if let Some(j) = c.observed.iter().position(|v| *v == 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "condition {i}: observable {:?} is exactly zero",
                    self.observable_names[j]
                )));
            }
            if c.observed.iter().chain(&c.inputs).any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "condition {i} has a non-finite entry"
                )));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != m || w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidDataset(
                    "weights must be positive, one per observable".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn observables_per_condition(&self) -> usize {
        self.observable_names.len()
    }

    /// Flattened residual length `|D| · m`.
    pub fn residual_len(&self) -> usize {
        self.len() * self.observables_per_condition()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            input_names: self.input_names.clone(),
            observable_names: self.observable_names.clone(),
            conditions: indices
                .iter()
                .map(|&i| self.conditions[i].clone())
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let ds: Dataset = serde_json::from_str(&text)?;
                ds.validate()?;
                Ok(ds)
            }
            _ => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                Self::read_csv(file)
            }
        }
    }

    /// Reads a CSV table. Columns whose header starts with `obs_` are
    /// observables; every other column is a condition input.
    pub fn read_csv(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut input_cols = Vec::new();
        let mut obs_cols = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            match h.trim().strip_prefix(OBSERVABLE_PREFIX) {
                Some(name) => obs_cols.push((i, name.to_string())),
                None => input_cols.push((i, h.trim().to_string())),
            }
        }
        let mut conditions = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidDataset(format!("row {}: {e}", line + 1)))
            };
            conditions.push(Condition {
                inputs: input_cols
                    .iter()
                    .map(|(i, _)| parse(*i))
                    .collect::<Result<_>>()?,
                observed: obs_cols
                    .iter()
                    .map(|(i, _)| parse(*i))
                    .collect::<Result<_>>()?,
            });
        }
        Self::new(
            input_cols.into_iter().map(|(_, n)| n).collect(),
            obs_cols.into_iter().map(|(_, n)| n).collect(),
            conditions,
        )
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = self
            .input_names
            .iter()
            .cloned()
            .chain(
                self.observable_names
                    .iter()
                    .map(|n| format!("{OBSERVABLE_PREFIX}{n}")),
            )
            .collect();
        w.write_record(&header)?;
        for c in &self.conditions {
            let row: Vec<String> = c
                .inputs
                .iter()
                .chain(&c.observed)
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let text = serde_json::to_string_pretty(self)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        } else {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            self.write_csv(file)
        }
    }
}
