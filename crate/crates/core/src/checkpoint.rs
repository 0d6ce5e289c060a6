//! Versioned JSON checkpoint of a [`Regressor`] and the loss it was trained with.
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so `load(save(model)) == model` bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::regressor::{Dense, Head, Regressor};

pub const FORMAT: &str = "qamro-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    /// Row-major `(outputs, inputs)`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRecord {
    name: String,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_dims: [usize; 2],
    seed: u64,
    loss: LossConfig,
    heads: Vec<HeadRecord>,
}

/// A trained model plus the loss configuration used to train it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub regressor: Regressor,
    pub loss: LossConfig,
}

impl Checkpoint {
    fn to_file(&self) -> CheckpointFile {
        let r = &self.regressor;
        CheckpointFile {
            format: FORMAT.to_string(),
            version: VERSION,
            input_dim: r.input_dim,
            hidden_dims: r.hidden_dims,
            seed: r.seed,
            loss: self.loss,
            heads: r
                .heads
                .iter()
                .map(|h| HeadRecord {
                    name: h.name.clone(),
                    layers: h
                        .layers
                        .iter()
                        .map(|d| LayerRecord {
                            inputs: d.inputs(),
                            outputs: d.outputs(),
                            weights: d.weights.iter().copied().collect(),
                            bias: d.bias.to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn from_file(file: CheckpointFile) -> std::result::Result<Self, String> {
        if file.format != FORMAT {
            return Err(format!("not a checkpoint (format {:?})", file.format));
        }
        if file.version != VERSION {
            return Err(format!("unsupported checkpoint version {}", file.version));
        }
        let expected = [
            (file.input_dim, file.hidden_dims[0]),
            (file.hidden_dims[0], file.hidden_dims[1]),
            (file.hidden_dims[1], 1),
        ];
        let mut heads = Vec::with_capacity(file.heads.len());
        for h in file.heads {
            if h.layers.len() != 3 {
                return Err(format!("head {:?} must have exactly three layers", h.name));
            }
            let layers: Vec<Dense> = h
                .layers
                .into_iter()
                .zip(expected)
                .map(|(l, (inputs, outputs))| {
                    if (l.inputs, l.outputs) != (inputs, outputs) || l.bias.len() != outputs {
                        return Err(format!("head {:?}: layer shape mismatch", h.name));
                    }
                    Ok(Dense {
                        weights: Array2::from_shape_vec((outputs, inputs), l.weights)
                            .map_err(|e| format!("head {:?}: {e}", h.name))?,
                        bias: Array1::from(l.bias),
                    })
                })
                .collect::<std::result::Result<_, String>>()?;
            let layers: [Dense; 3] = layers.try_into().expect("length checked above");
            heads.push(Head {
                name: h.name,
                layers,
            });
        }
        if heads.is_empty() {
            return Err("checkpoint has no heads".into());
        }
        let regressor = Regressor {
            input_dim: file.input_dim,
            hidden_dims: file.hidden_dims,
            heads,
            seed: file.seed,
        };
        if !regressor.is_finite() {
            return Err("checkpoint contains non-finite parameters".into());
        }
        file.loss.validate().map_err(|e| e.to_string())?;
        Ok(Self {
            regressor,
            loss: file.loss,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        Self::from_file(file).map_err(Error::Domain)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.to_file())?;
        w.write_all(b"\n")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: CheckpointFile = serde_json::from_reader(BufReader::new(file))?;
        Self::from_file(raw).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), dim in 1usize..6, bias in -10.0f64..10.0) {
            let regressor = Regressor::new(dim, &["MI", "TA"], [7, 3], bias, seed).unwrap();
            let ckpt = Checkpoint { regressor, loss: LossConfig { beta: 3.5, ..Default::default() } };
            let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn rejects_foreign_and_malformed_files() {
        let ckpt = Checkpoint {
            regressor: Regressor::new(2, &["A"], [3, 2], 3.0, 0).unwrap(),
            loss: LossConfig::default(),
        };
        let text = ckpt.to_json().unwrap();
        assert!(Checkpoint::from_json(&text.replace(FORMAT, "other")).is_err());
        assert!(Checkpoint::from_json(&text.replace("\"version\": 1", "\"version\": 2")).is_err());
        let mut file = ckpt.to_file();
        file.heads[0].layers.pop();
        assert!(Checkpoint::from_file(file).is_err());
        let mut file = ckpt.to_file();
        file.heads[0].layers[1].weights.pop();
        assert!(Checkpoint::from_file(file).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint {
            regressor: Regressor::new(4, &["PQ", "PC", "CE", "CU"], [5, 3], 3.0, 8).unwrap(),
            loss: LossConfig::default(),
        };
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }
}
