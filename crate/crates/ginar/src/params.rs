//! Named parameter registry.
//!
//! Model components create their parameters through a [`ParamRegistry`] so
//! that every trainable tensor has a stable, documented name. The registry
//! order is the canonical parameter order used by the optimizer and the
//! checkpoint format.

use crate::tensor::{Real, Tape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ordered collection of named parameter tensors on one tape.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Tensor)>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unrecognized checkpoint format {found:?} (expected {CHECKPOINT_FORMAT:?})")]
    BadFormat { found: String },
    #[error("checkpoint is missing parameter {name:?}")]
    Missing { name: String },
    #[error("checkpoint names unknown parameter {name:?}")]
    Unknown { name: String },
    #[error("parameter {name:?}: checkpoint shape {file:?} vs model shape {model:?}")]
    Shape {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("parameter {name:?} holds a non-finite value")]
    NonFinite { name: String },
}

/// Format tag written into every checkpoint file.
pub const CHECKPOINT_FORMAT: &str = "ginar-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
        }
    }

    /// Register a parameter with explicit initial values.
    pub fn add<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<F>,
    ) -> Result<Tensor, TensorError> {
        let t = tape.param(shape, data)?;
        self.entries.push((name.into(), t));
        Ok(t)
    }

    /// Register a parameter drawn uniformly from `[-bound, bound]`.
    pub fn uniform<F: Real, R: Rng>(
        &mut self,
        tape: &mut Tape<F>,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
    ) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| crate::tensor::real(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(tape, name, shape, data)
    }

    /// Register a parameter filled with a constant (layer-norm gains start at
    /// one, biases at zero).
    pub fn constant<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        self.add(tape, name, shape, vec![crate::tensor::real(value); n])
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
    }

    /// Copy out every parameter's current values, in registry order. The
    /// cheap in-memory counterpart of a checkpoint, used to hold the
    /// best-so-far state during training.
    pub fn export_values<F: Real>(&self, tape: &Tape<F>) -> Vec<Vec<F>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.data(*t).to_vec())
            .collect()
    }

    /// Write previously exported values back into the parameters.
    pub fn import_values<F: Real>(
        &self,
        tape: &mut Tape<F>,
        values: &[Vec<F>],
    ) -> Result<(), TensorError> {
        if values.len() != self.entries.len() {
            return Err(TensorError::Invalid {
                op: "import_values",
                msg: format!(
                    "{} value vectors for {} parameters",
                    values.len(),
                    self.entries.len()
                ),
            });
        }
        for ((name, t), vals) in self.entries.iter().zip(values) {
            let dst = tape.data_mut(*t);
            if dst.len() != vals.len() {
                return Err(TensorError::Invalid {
                    op: "import_values",
                    msg: format!(
                        "parameter {name:?} has {} elements, snapshot has {}",
                        dst.len(),
                        vals.len()
                    ),
                });
            }
            dst.copy_from_slice(vals);
        }
        Ok(())
    }

    /// Serialize every parameter (name, shape, values) as a JSON checkpoint.
    /// Entries follow registry order, so the bytes are deterministic.
    pub fn save_checkpoint<F: Real>(
        &self,
        tape: &Tape<F>,
        path: &Path,
    ) -> Result<(), CheckpointError> {
        let params = self
            .entries
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: tape.shape(*t).to_vec(),
                data: tape
                    .data(*t)
                    .iter()
                    .map(|v| v.to_f64().expect("parameter values are finite reals"))
                    .collect(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            params,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamRegistry::save_checkpoint`] into
    /// this registry's parameters. Every registered parameter must appear in
    /// the file with a matching shape, and the file must not name parameters
    /// the model does not have.
    pub fn load_checkpoint<F: Real>(
        &self,
        tape: &mut Tape<F>,
        path: &Path,
    ) -> Result<(), CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::BadFormat { found: file.format });
        }
        for entry in &file.params {
            if self.get(&entry.name).is_none() {
                return Err(CheckpointError::Unknown {
                    name: entry.name.clone(),
                });
            }
        }
        for (name, t) in &self.entries {
            let entry = file
                .params
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
            let shape = tape.shape(*t).to_vec();
            if entry.shape != shape {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    file: entry.shape.clone(),
                    model: shape,
                });
            }
            let expect: usize = shape.iter().product();
            if entry.data.len() != expect || entry.data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite { name: name.clone() });
            }
            let dst = tape.data_mut(*t);
            for (d, &v) in dst.iter_mut().zip(&entry.data) {
                *d = crate::tensor::real(v);
            }
        }
        Ok(())
    }
}
