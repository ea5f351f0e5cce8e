//! Versioned binary checkpoint container.
//!
//! Layout: magic "ISKP", u32 format version, u32 JSON length + metadata
//! blob (config, vocabulary, optional pooling spec and epoch), u32 entry
//! count, then named float64 parameter arrays. All integers little-endian.
//! Save then load round-trips bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::pooling::PoolingSpec;
use crate::{ParamStore, Tensor};

use super::{EncoderError, Model, ModelConfig, Result};

const MAGIC: &[u8; 4] = b"ISKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub pooling: Option<PoolingSpec>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

fn bad(detail: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(detail.into())
}

pub fn save_checkpoint(
    model: &Model,
    pooling: Option<&PoolingSpec>,
    epoch: Option<usize>,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        vocab: model.vocab.tokens().to_vec(),
        pooling: pooling.cloned(),
        epoch,
    };
    let blob = serde_json::to_vec(&meta).map_err(|e| bad(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(&blob)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&(tensor.len() as u64).to_le_bytes())?;
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let blob_len = read_u32(&mut r)? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&blob).map_err(|e| bad(format!("metadata: {e}")))?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("param name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel = read_u64(&mut r)? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(bad(format!("param {name}: shape {shape:?} vs {numel} values")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor =
            Tensor::from_vec(shape, data).map_err(|e| bad(format!("param {name}: {e}")))?;
        params.insert(&name, tensor);
    }

    let vocab = Vocab::from_tokens(meta.vocab.clone());
    let model = Model { cfg: meta.model.clone(), params, vocab };
    model.cfg.validate()?;
    Ok((model, meta))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::pooling::PoolingSpec;

    fn tiny_model() -> Model {
        let vocab = Vocab::build(&["a b c d".to_string()], 10).unwrap();
        let cfg = ModelConfig { k: 2, d: 8, n_layers: 1, n_heads: 2, vocab_size: 0, max_len: 8 };
        Model::new(cfg, vocab, 77).unwrap()
    }

    #[test]
    fn save_load_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.iskp");
        let model = tiny_model();
        save_checkpoint(&model, Some(&PoolingSpec::v3(10.0)), Some(4), &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.epoch, Some(4));
        assert_eq!(meta.pooling.unwrap(), PoolingSpec::v3(10.0));
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.vocab, model.vocab);
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            let lt = loaded.params.get(name).unwrap();
            assert_eq!(lt.shape(), t.shape());
            for (a, b) in t.data().iter().zip(lt.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {name}");
            }
        }
        // byte-identical on re-save
        let path2 = dir.path().join("m2.iskp");
        save_checkpoint(&loaded, Some(&PoolingSpec::v3(10.0)), Some(4), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.iskp");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
