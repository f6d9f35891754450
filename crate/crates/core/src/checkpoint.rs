//! Model checkpoints.
//!
//! Layout: magic `PSYM`, format version u32, a length-prefixed UTF-8 config
//! block (the `key = value` run configuration), then a u32 record count and
//! one named tensor record per parameter (see [`crate::records`]). Loading
//! verifies the magic, version, and config, and parameter assignment rejects
//! any name or shape that does not match the model built from that config.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::records::{
    expect_magic, read_string, read_tensor_record, read_u32, write_magic, write_string,
    write_tensor_record, write_u32,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSYM";
const VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    cfg: &RunConfig,
    store: &ParamStore<S>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_string(&mut w, &cfg.to_config_string())?;
    write_u32(&mut w, store.len() as u32)?;
    for (_, name, tensor) in store.iter() {
        write_tensor_record(&mut w, name, tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(RunConfig, Vec<(String, Tensor<S>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = RunConfig::from_config_str(&read_string(&mut r)?)
        .map_err(|e| Error::Format(format!("checkpoint config block: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_tensor_record::<S, _>(&mut r)?);
    }
    Ok((cfg, records))
}

/// Copy checkpoint records into a freshly initialized store. Every parameter
/// must be present with the exact shape the store expects, and no extras are
/// allowed; a config mismatch shows up here as a missing or misshapen name.
pub fn assign_params<S: Scalar>(
    store: &mut ParamStore<S>,
    records: Vec<(String, Tensor<S>)>,
) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model wants {}",
            records.len(),
            store.len()
        )));
    }
    for (name, tensor) in records {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter '{name}' not in model")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter '{name}' has shape {:?}, model wants {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        store.set(id, tensor);
    }
    Ok(())
}
