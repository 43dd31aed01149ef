//! Checkpoint file: a JSON header (class list, vocab, step index, schedule
//! hash, model config) followed by all parameter arrays keyed by canonical
//! names, little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synth_data::ClassId;

use super::{ModelConfig, ModelState, ParamStore, Vocab};

const MAGIC: &[u8; 8] = b"CPPCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub cfg: ModelConfig,
    pub classes: Vec<ClassId>,
    pub vocab_words: Vec<String>,
    pub step: usize,
    pub schedule_hash: String,
}

pub fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    step: usize,
    schedule_hash: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = CheckpointHeader {
        cfg: state.cfg.clone(),
        classes: state.classes.clone(),
        vocab_words: state.vocab.words().to_vec(),
        step,
        schedule_hash: schedule_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&(state.params.len() as u64).to_le_bytes())?;
    for (name, arr) in &state.params {
        let name_bytes = name.as_bytes();
        f.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        f.write_all(name_bytes)?;
        f.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for d in arr.shape() {
            f.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointHeader)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!("bad magic in {}", path.display())));
    }

    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbytes)?;

    f.read_exact(&mut len8)?;
    let n_params = u64::from_le_bytes(len8) as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let mut len4 = [0u8; 4];
        f.read_exact(&mut len4)?;
        let nlen = u32::from_le_bytes(len4) as usize;
        let mut nbytes = vec![0u8; nlen];
        f.read_exact(&mut nbytes)?;
        let name = String::from_utf8(nbytes)
            .map_err(|e| CoreError::Checkpoint(format!("bad name: {e}")))?;

        f.read_exact(&mut len4)?;
        let ndim = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut len8)?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| CoreError::Checkpoint(format!("bad shape for {name}: {e}")))?;
        params.insert(name, arr);
    }

    let state = ModelState {
        cfg: header.cfg.clone(),
        params,
        classes: header.classes.clone(),
        vocab: Vocab::from_words(header.vocab_words.clone()),
    };
    Ok((state, header))
}

#[cfg(test)]
mod tests {
    use super::super::tests::test_classes;
    use super::super::{ModelConfig, ModelState};
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let state = ModelState::init(ModelConfig::tiny(), &test_classes(4), 13).unwrap();
        save_checkpoint(&path, &state, 2, "abc123").unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(header.step, 2);
        assert_eq!(header.schedule_hash, "abc123");
        assert_eq!(loaded.param_hash(), state.param_hash());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Checkpoint(_))));
    }
}
