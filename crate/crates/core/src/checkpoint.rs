//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `KVBL`, u32 version, u32 length and
//! bytes of a JSON config block, then per tensor: u32 name length, name,
//! u32 rank, u64 dims, f64 data. The file ends with the 64-bit FNV-1a hash
//! of every preceding byte.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::tensor::{Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"KVBL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, TensorData)>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Digest of parameter values, for frozen-state checks.
pub fn params_hash(params: &[Tensor]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for p in params {
        for d in p.shape() {
            h.write_u64(*d as u64);
        }
        for v in p.data().iter() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, tensors: Vec<(String, TensorData)>) -> Self {
        Checkpoint {
            version: VERSION,
            config,
            tensors,
        }
    }

    pub fn from_params(config: serde_json::Value, named: &[(String, Tensor)]) -> Self {
        Checkpoint::new(
            config,
            named
                .iter()
                .map(|(n, t)| (n.clone(), t.to_data()))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, TensorData)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }

    /// Store optimizer moments as `optim.m.<i>` / `optim.v.<i>` tensors and
    /// the step count in the config block.
    pub fn add_optimizer(&mut self, state: &OptimState) {
        for (i, (m, v)) in state
            .first_moment
            .iter()
            .zip(&state.second_moment)
            .enumerate()
        {
            let flat = |d: &Vec<f64>| TensorData {
                shape: vec![d.len()],
                data: d.clone(),
            };
            self.tensors.push((format!("optim.m.{i}"), flat(m)));
            self.tensors.push((format!("optim.v.{i}"), flat(v)));
        }
        if let serde_json::Value::Object(map) = &mut self.config {
            map.insert("optim_step".into(), state.step.into());
            map.insert(
                "optim_hyper".into(),
                serde_json::to_value(state.hyper).unwrap_or_default(),
            );
        }
    }

    pub fn optimizer(&self) -> Option<OptimState> {
        let step = self.config.get("optim_step")?.as_u64()? as usize;
        let hyper = serde_json::from_value(self.config.get("optim_hyper")?.clone()).ok()?;
        let mut first_moment = Vec::new();
        let mut second_moment = Vec::new();
        for i in 0.. {
            let (Some(m), Some(v)) = (
                self.get(&format!("optim.m.{i}")),
                self.get(&format!("optim.v.{i}")),
            ) else {
                break;
            };
            first_moment.push(m.data.clone());
            second_moment.push(v.data.clone());
        }
        Some(OptimState {
            first_moment,
            second_moment,
            step,
            hyper,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("`{}` shape {:?} vs {} values", name, t.shape, t.data.len()),
                ));
            }
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let h = fnv1a(&buf);
        buf.extend_from_slice(&h.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let corrupt = |reason: String| Error::Corruption {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 + 4 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing header".into()));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(corrupt("content hash mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let short = || corrupt("record runs past end of file".into());
        let json_len = r.u32().ok_or_else(short)? as usize;
        let config = serde_json::from_slice(r.take(json_len).ok_or_else(short)?)?;
        let mut tensors = Vec::new();
        while r.pos < r.bytes.len() {
            let name_len = r.u32().ok_or_else(short)? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(short)?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32().ok_or_else(short)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(short)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r
                .take(n.checked_mul(8).ok_or_else(short)?)
                .ok_or_else(short)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, TensorData { shape, data }));
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Write `ckpt` to `path` via a temporary sibling and rename. Returns the
/// content hash.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<u64> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes).and_then(|_| f.sync_all()))
        .map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(u64::from_le_bytes(
        bytes[bytes.len() - 8..].try_into().unwrap(),
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LanguageModel, ModelConfig, TokenBatch};

    fn sample() -> Checkpoint {
        let m = LanguageModel::init(ModelConfig::toy(1), 3).unwrap();
        Checkpoint::from_params(serde_json::json!({"model": m.config()}), &m.named_params())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.kvbl");
        let c = sample();
        let h = save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            fnv1a(&std::fs::read(&p).unwrap()[..]),
            fnv1a(&c.to_bytes().unwrap())
        );
        assert_eq!(
            h,
            u64::from_le_bytes(
                c.to_bytes().unwrap()[c.to_bytes().unwrap().len() - 8..]
                    .try_into()
                    .unwrap()
            )
        );
    }

    #[test]
    fn known_fnv_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn truncation_and_bit_flips_are_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], p),
                Err(Error::Corruption { .. })
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, p),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut c = sample();
        c.version = 9;
        let bytes = c.to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(
            err,
            Error::UnsupportedVersion {
                found: 9,
                expected: 1
            }
        ));
    }

    #[test]
    fn reloaded_model_evaluates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.kvbl");
        let cfg = ModelConfig::toy(1);
        let m = LanguageModel::init(cfg.clone(), 8).unwrap();
        save_checkpoint(
            &p,
            &Checkpoint::from_params(serde_json::Value::Null, &m.named_params()),
        )
        .unwrap();
        let tokens = TokenBatch::new((0..20).map(|i| i % 64).collect(), 2, 10).unwrap();
        let losses: Vec<f64> = (0..2)
            .map(|_| {
                let c = load_checkpoint(&p).unwrap();
                let r = LanguageModel::from_named(cfg.clone(), &c.tensors).unwrap();
                r.full_loss(&tokens).unwrap().item()
            })
            .collect();
        assert_eq!(losses[0], losses[1]);
        assert_eq!(losses[0], m.full_loss(&tokens).unwrap().item());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let mut st = OptimState::new(&[p.clone()], Default::default());
        crate::optim::adamw_step(&[p], &[vec![0.5, -0.5]], &mut st, 1e-2).unwrap();
        let mut c = Checkpoint::new(serde_json::json!({}), vec![]);
        c.add_optimizer(&st);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.optimizer().unwrap(), st);
    }
}
