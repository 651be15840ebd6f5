//! Checkpoint container: a JSON document with the model spec and every
//! parameter array as `{name, shape, data}` in row-major order.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "delayprop-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    spec: ModelSpec,
    tensors: Vec<StoredTensor>,
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let doc = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        spec: net.spec.clone(),
        tensors: net
            .tensors()
            .into_iter()
            .map(|t| StoredTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.to_vec(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &doc)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Checkpoint = serde_json::from_str(&text)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::Serde(format!(
            "{}: unsupported checkpoint format `{}`",
            path.display(),
            doc.format
        )));
    }
    let mut net = Network::zeros(doc.spec)?;
    let expected: Vec<(String, Vec<usize>)> = net
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != doc.tensors.len() {
        return Err(Error::Serde(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            expected.len(),
            doc.tensors.len()
        )));
    }
    for ((slot, (name, shape)), stored) in net
        .tensors_mut()
        .into_iter()
        .zip(&expected)
        .zip(&doc.tensors)
    {
        if &stored.name != name || &stored.shape != shape || stored.data.len() != slot.len() {
            return Err(Error::Serde(format!(
                "{}: tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                path.display(),
                stored.name,
                stored.shape
            )));
        }
        slot.copy_from_slice(&stored.data);
    }
    if !net.is_finite() {
        return Err(Error::Serde(format!(
            "{}: non-finite parameter",
            path.display()
        )));
    }
    Ok(net)
}
