//! Model checkpoints: `"SNCK"`, `u32` header length, JSON header, then
//! every parameter tensor in the tensor file format.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seenet::{MaskPolicy, ModelConfig, SeeNetModel};
use crate::tensor::serialize;

pub const MAGIC: &[u8; 4] = b"SNCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub policy: MaskPolicy,
    pub iteration: usize,
    pub seed: u64,
}

pub fn encode_checkpoint(model: &SeeNetModel, header: &CheckpointHeader) -> Result<Vec<u8>> {
    if &header.config != model.config() {
        return Err(Error::Contract(
            "checkpoint header describes a different architecture".into(),
        ));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        serialize::write_tensor(&mut out, p).expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &SeeNetModel, header: &CheckpointHeader) -> Result<()> {
    let bytes = encode_checkpoint(model, header)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, SeeNetModel)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let mut cursor = bytes.as_slice();
    let mut prefix = [0u8; 8];
    cursor
        .read_exact(&mut prefix)
        .map_err(|_| bad("truncated checkpoint".into()))?;
    if &prefix[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes([prefix[4], prefix[5], prefix[6], prefix[7]]) as usize;
    if cursor.len() < len {
        return Err(bad("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&cursor[..len]).map_err(|e| bad(format!("header: {e}")))?;
    cursor = &cursor[len..];

    let mut model = SeeNetModel::new(header.config.clone(), 0).map_err(|e| bad(e.to_string()))?;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let t = serialize::read_tensor(&mut cursor).map_err(|e| bad(format!("tensor {i}: {e}")))?;
        if t.shape() != p.shape() {
            return Err(bad(format!(
                "tensor {i} has shape {:?}, architecture expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t;
    }
    if !cursor.is_empty() {
        return Err(bad(format!("{} trailing bytes", cursor.len())));
    }
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::Thresholds;
    use crate::seenet::Strategy;

    #[test]
    fn round_trip() {
        let config = ModelConfig::desk(3).widened(0.25);
        let model = SeeNetModel::new(config.clone(), 9).unwrap();
        let header = CheckpointHeader {
            config,
            policy: MaskPolicy::new(Strategy::Seenet, Thresholds::default()).unwrap(),
            iteration: 17,
            seed: 9,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &header).unwrap();
        let (h, m) = load_checkpoint(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(m, model);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"SNCK").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
