//! Model checkpoints.
//!
//! A checkpoint is a single JSON document holding the architecture, the
//! normalization statistics the model was trained with, and every parameter
//! tensor as nested row arrays keyed by its stable name. Keys live in a
//! `BTreeMap`, so serialization order (and therefore the bytes on disk) is
//! deterministic. Loading validates the name set and every tensor shape
//! against the stored architecture before accepting the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::NormStats;
use crate::net::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    norm_stats: NormStats,
    /// Parameter name -> row-major nested arrays (`rows x cols`).
    tensors: BTreeMap<String, Vec<Vec<f64>>>,
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn rows_to_tensor(name: &str, rows: &[Vec<f64>]) -> Result<Tensor> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, |r| r.len());
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Net(format!("checkpoint tensor '{name}' is empty")));
    }
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Net(format!("checkpoint tensor '{name}' is ragged")));
    }
    Ok(Tensor {
        rows: n_rows,
        cols: n_cols,
        data: rows.iter().flatten().copied().collect(),
    })
}

/// Writes a checkpoint. The same parameters and stats always produce the
/// same bytes.
pub fn save_checkpoint(path: &Path, params: &ModelParams, stats: &NormStats) -> Result<()> {
    let mut tensors = BTreeMap::new();
    params.visit_params(|name, t| {
        tensors.insert(name, tensor_to_rows(t));
    });
    let file = CheckpointFile {
        config: params.config.clone(),
        norm_stats: stats.clone(),
        tensors,
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Reads a checkpoint, validating names and shapes against its own config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, NormStats)> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.config.validate()?;

    // Build the parameter skeleton from the stored config, then overwrite
    // every tensor from the file, checking shape as we go.
    let mut params = ModelParams::init(&file.config, 0)?;
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut shape_error: Option<Error> = None;
    params.visit_params_mut(|name, t| {
        if shape_error.is_some() {
            return;
        }
        match file.tensors.get(&name) {
            None => missing.push(name),
            Some(rows) => match rows_to_tensor(&name, rows) {
                Err(e) => shape_error = Some(e),
                Ok(loaded) => {
                    if loaded.rows != t.rows || loaded.cols != t.cols {
                        shape_error = Some(Error::Net(format!(
                            "checkpoint tensor '{name}' is {}x{}, config implies {}x{}",
                            loaded.rows, loaded.cols, t.rows, t.cols
                        )));
                    } else {
                        *t = loaded;
                        used += 1;
                    }
                }
            },
        }
    });
    if let Some(e) = shape_error {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Net(format!(
            "checkpoint is missing {} tensor(s), e.g. '{}'",
            missing.len(),
            missing[0]
        )));
    }
    if used != file.tensors.len() {
        let mut expected = std::collections::BTreeSet::new();
        params.visit_params(|name, _| {
            expected.insert(name);
        });
        let extra: Vec<&String> =
            file.tensors.keys().filter(|k| !expected.contains(*k)).collect();
        return Err(Error::Net(format!(
            "checkpoint has {} unknown tensor(s), e.g. '{}'",
            extra.len(),
            extra.first().map_or("?", |s| s.as_str())
        )));
    }
    Ok((params, file.norm_stats))
}
