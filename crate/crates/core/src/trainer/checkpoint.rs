//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CPCKPT\0\0" | version u32 | config_len u64 | config JSON
//! | param_count u64 | per param: name_len u32, name, ndim u32, dims u64…, values f64…
//! | SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::model::{CpcConfig, CpcModel};

const MAGIC: &[u8; 8] = b"CPCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn to_bytes(model: &CpcModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).ok_or(TrainError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(TrainError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        usize::try_from(self.u64()?).map_err(|_| TrainError::Truncated)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<CpcModel, TrainError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(TrainError::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(TrainError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    // Parse the body first so a short file reports as truncated, not corrupt.
    let mut r = Reader { buf: body, pos: r.pos };
    let parsed = parse_body(&mut r);
    if Sha256::digest(body).as_slice() != digest {
        return Err(match parsed {
            Err(TrainError::Truncated) => TrainError::Truncated,
            _ => TrainError::Integrity("checksum mismatch".into()),
        });
    }
    let (config, tensors) = parsed?;
    if r.pos != body.len() {
        return Err(TrainError::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let mut model = CpcModel::init(config)?;
    if tensors.len() != model.params().len() {
        return Err(TrainError::ShapeDisagreement {
            name: "<all>".into(),
            detail: format!("{} stored parameters, config implies {}", tensors.len(), model.params().len()),
        });
    }
    for (name, tensor) in tensors {
        let id = model.params().find(&name).ok_or_else(|| TrainError::ShapeDisagreement {
            name: name.clone(),
            detail: "not a parameter of the configured model".into(),
        })?;
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != tensor.shape() {
            return Err(TrainError::ShapeDisagreement {
                name,
                detail: format!("stored {:?}, expected {:?}", tensor.shape(), p.value.shape()),
            });
        }
        p.value = tensor;
    }
    Ok(model)
}

fn parse_body(r: &mut Reader) -> Result<(CpcConfig, Vec<(String, Tensor)>), TrainError> {
    let config_len = r.len()?;
    let config: CpcConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| TrainError::Integrity(format!("config: {e}")))?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| TrainError::Integrity("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(TrainError::Truncated)?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| TrainError::ShapeDisagreement {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        tensors.push((name, tensor));
    }
    Ok((config, tensors))
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(model: &CpcModel, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, to_bytes(model)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CpcModel, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CpcModel {
        let cfg = CpcConfig {
            horizon: 3,
            obs_len: 4,
            seed: 11,
            ..CpcConfig::for_channels(4)
        };
        let mut m = CpcModel::init(cfg).unwrap();
        // Make the zero-initialized heads non-trivial too.
        for p in m.params_mut().iter_mut() {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 1e-3 * (i as f64).sin();
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn loaded_model_encodes_identically() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3, 0.4], [1.0, 0.0, -1.0, 0.5]]).unwrap();
        assert_eq!(m.encode(&x).unwrap(), back.encode(&x).unwrap());
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let bytes = to_bytes(&model());
        for i in (0..bytes.len()).step_by(37) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(from_bytes(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(from_bytes(&bad), Err(TrainError::Integrity(_))));
    }

    #[test]
    fn truncation_and_version() {
        let bytes = to_bytes(&model());
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(TrainError::Truncated)),
                "cut at {cut}"
            );
        }
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&v2),
            Err(TrainError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn shape_disagreement() {
        // A well-formed file whose parameter shape contradicts its config.
        let m = model();
        let other = CpcModel::init(CpcConfig {
            latent_dim: m.config().latent_dim + 1,
            ..m.config().clone()
        })
        .unwrap();
        let bytes = to_bytes(&other);
        let cfg_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut forged = bytes[..12].to_vec();
        let cfg = serde_json::to_vec(m.config()).unwrap();
        forged.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        forged.extend_from_slice(&cfg);
        forged.extend_from_slice(&bytes[20 + cfg_len..bytes.len() - DIGEST_LEN]);
        let digest = Sha256::digest(&forged);
        forged.extend_from_slice(&digest);
        assert!(matches!(
            from_bytes(&forged),
            Err(TrainError::ShapeDisagreement { .. })
        ));
    }

    #[test]
    fn save_and_load_files() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let first = fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(TrainError::Io { .. })
        ));
    }
}
