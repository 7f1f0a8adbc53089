//! Versioned model checkpoints: a magic first line, then one JSON document
//! holding the run seed, the data description, and the full network. Floats
//! serialize in shortest round-trip form, so save/load preserves every
//! parameter bit for bit.

use std::fs;
use std::path::Path;

use cpac_core::error::{CpacError, Result};
use cpac_core::network::Network;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;

pub const MAGIC: &str = "CPACNET1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub data: DataConfig,
    pub network: Network,
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let body = serde_json::to_string(checkpoint)
        .map_err(|e| CpacError::data(path.display().to_string(), format!("serialize: {e}")))?;
    fs::write(path, format!("{MAGIC}\n{body}\n"))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let name = path.display().to_string();
    let text =
        fs::read_to_string(path).map_err(|e| CpacError::data(&name, format!("cannot read: {e}")))?;
    let (magic, body) = text
        .split_once('\n')
        .ok_or_else(|| CpacError::data(&name, "missing magic line"))?;
    if magic != MAGIC {
        return Err(CpacError::data(
            &name,
            format!("bad magic `{magic}`, expected `{MAGIC}`"),
        ));
    }
    let checkpoint: Checkpoint = serde_json::from_str(body)
        .map_err(|e| CpacError::data(&name, format!("malformed body: {e}")))?;
    checkpoint.network.validate()?;
    Ok(checkpoint)
}
