use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{CsmConfig, CsmModel};
use crate::error::{Error, Result};
use crate::nncore::checkpoint::{read_params, write_params};

/// A loaded model together with the metadata stored beside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CsmModel,
    /// Fingerprint of the pattern statistics the model was trained with.
    pub stats_fingerprint: String,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    /// `Some(message)` when `fingerprint` differs from the recorded one.
    pub fn fingerprint_warning(&self, fingerprint: &str) -> Option<String> {
        (self.stats_fingerprint != fingerprint).then(|| {
            format!(
                "pattern statistics fingerprint {} differs from the one recorded in the checkpoint ({})",
                short(fingerprint),
                short(&self.stats_fingerprint)
            )
        })
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

pub fn write_checkpoint<W: Write>(
    w: W,
    model: &CsmModel,
    stats_fingerprint: &str,
    extra: &serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "model": model.config,
        "stats_fingerprint": stats_fingerprint,
        "extra": extra,
    });
    write_params(w, &model.params, &meta)
}

pub fn save_checkpoint(
    path: &Path,
    model: &CsmModel,
    stats_fingerprint: &str,
    extra: &serde_json::Value,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, stats_fingerprint, extra)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: std::io::Read>(r: R) -> Result<Checkpoint> {
    let (params, meta) = read_params(r)?;
    let config: CsmConfig =
        serde_json::from_value(meta["model"].clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
    let stats_fingerprint = meta["stats_fingerprint"]
        .as_str()
        .ok_or_else(|| Error::Format("missing stats fingerprint".into()))?
        .to_string();
    Ok(Checkpoint {
        model: CsmModel::from_params(config, params)?,
        stats_fingerprint,
        extra: meta["extra"].clone(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
