//! JSON documents for parameter sets and other versioned artifacts.
//!
//! Floats are written in shortest round-trip form, so a document that is
//! loaded and saved again is byte-identical.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsDoc {
    pub tensors: Vec<TensorDoc>,
}

impl ParamsDoc {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(name, t)| TensorDoc {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Copies stored tensors into `params`, which must have the same names
    /// and shapes.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Format {
                what: "parameters",
                message: format!("expected {} tensors, found {}", params.len(), self.tensors.len()),
            });
        }
        for doc in &self.tensors {
            let id = params.find(&doc.name).ok_or_else(|| Error::Format {
                what: "parameters",
                message: format!("unexpected tensor {}", doc.name),
            })?;
            let t = Tensor::new(doc.shape.clone(), doc.data.clone())?;
            params.set(id, t).map_err(|e| Error::Format {
                what: "parameters",
                message: format!("{}: {e}", doc.name),
            })?;
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("artifact serializes")
}

pub fn from_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::json(what, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, &path.display().to_string())
}

/// Checks the `format`/`version` header of an artifact.
pub fn check_header(found_format: &str, found_version: u32, format: &str, version: u32) -> Result<()> {
    if found_format != format || found_version != version {
        return Err(Error::Format {
            what: "artifact header",
            message: format!("expected {format} v{version}, found {found_format} v{found_version}"),
        });
    }
    Ok(())
}
