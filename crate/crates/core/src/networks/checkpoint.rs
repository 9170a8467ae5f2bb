use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkConfig;
use crate::autograd::{Adam, AdamConfig, ParamStore, Tensor};
use crate::error::{FddmError, Result};

const MAGIC: &[u8; 8] = b"FDDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: String,
}

#[derive(Debug, Clone)]
pub struct NetworkEntry {
    pub role: String,
    pub config: NetworkConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mode: String,
    pub schedule: ScheduleSpec,
    pub step: u64,
    pub networks: Vec<NetworkEntry>,
    /// Free-form run metadata (training config and the like).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn network(&self, role: &str) -> Option<&NetworkEntry> {
        self.networks.iter().find(|n| n.role == role)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    role: String,
    config: NetworkConfig,
    params: Vec<String>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    mode: String,
    schedule: ScheduleSpec,
    step: u64,
    networks: Vec<NetworkMeta>,
    extra: serde_json::Value,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let start = buf.len();
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[start..]);
    put_u32(buf, crc);
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        mode: ck.mode.clone(),
        schedule: ck.schedule.clone(),
        step: ck.step,
        networks: ck
            .networks
            .iter()
            .map(|n| NetworkMeta {
                role: n.role.clone(),
                config: n.config.clone(),
                params: n.params.names().to_vec(),
                optimizer: n.optimizer.as_ref().map(|o| OptimizerMeta {
                    config: o.config,
                    steps: o.steps.clone(),
                }),
            })
            .collect(),
        extra: ck.extra.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| FddmError::Corrupt(format!("metadata encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, meta_bytes.len() as u32);
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&Sha256::digest(&meta_bytes));

    let mut blobs = 0u32;
    let count_at = buf.len();
    put_u32(&mut buf, 0);
    for n in &ck.networks {
        for (name, t) in n.params.iter() {
            put_blob(&mut buf, &format!("{}/{name}", n.role), t);
            blobs += 1;
        }
        if let Some(opt) = &n.optimizer {
            if opt.first.len() != n.params.len() || opt.second.len() != n.params.len() {
                return Err(FddmError::Contract(format!(
                    "optimizer state for {} does not match its parameters",
                    n.role
                )));
            }
            for (kind, moments) in [("adam.m", &opt.first), ("adam.v", &opt.second)] {
                for (name, t) in n.params.names().iter().zip(moments) {
                    put_blob(&mut buf, &format!("{}/{kind}/{name}", n.role), t);
                    blobs += 1;
                }
            }
        }
    }
    buf[count_at..count_at + 4].copy_from_slice(&blobs.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| FddmError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| FddmError::io(&tmp, e))?;
    f.sync_all().map_err(|e| FddmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FddmError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FddmError::Corrupt(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self, expected: &str) -> Result<Tensor<f32>> {
        let start = self.pos;
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| FddmError::Corrupt("blob name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(FddmError::Corrupt(format!("blob {name} claims rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FddmError::Corrupt(format!("blob {name} size overflows")))?;
        let raw = self.take(bytes)?;
        let body_end = self.pos;
        let crc = self.u32()?;
        if crc32fast::hash(&self.buf[start..body_end]) != crc {
            return Err(FddmError::Checksum {
                id: name,
                detail: "parameter blob CRC mismatch".into(),
            });
        }
        if name != expected {
            return Err(FddmError::Corrupt(format!("expected blob {expected}, found {name}")));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FddmError::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FddmError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 4 + r.pos {
        return Err(FddmError::Corrupt("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let file_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    // Bound blob reads by the body so truncation is never mistaken for data.
    let mut r = Reader { buf: body, pos: r.pos };

    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let digest = r.take(32)?;
    if Sha256::digest(meta_bytes).as_slice() != digest {
        return Err(FddmError::Checksum {
            id: "metadata".into(),
            detail: "config digest mismatch".into(),
        });
    }
    let meta: Meta =
        serde_json::from_slice(meta_bytes).map_err(|e| FddmError::Corrupt(format!("metadata decode: {e}")))?;
    let blob_count = r.u32()? as usize;

    let mut networks = Vec::with_capacity(meta.networks.len());
    let mut seen = 0usize;
    for nm in meta.networks {
        let mut params = ParamStore::new();
        for name in &nm.params {
            let t = r.blob(&format!("{}/{name}", nm.role))?;
            params.add(name.clone(), t);
            seen += 1;
        }
        let optimizer = match nm.optimizer {
            Some(om) => {
                let mut moments = [Vec::new(), Vec::new()];
                for (k, kind) in ["adam.m", "adam.v"].iter().enumerate() {
                    for (name, p) in nm.params.iter().zip(params.tensors()) {
                        let t = r.blob(&format!("{}/{kind}/{name}", nm.role))?;
                        if t.shape() != p.shape() {
                            return Err(FddmError::Corrupt(format!("moment {name} has the wrong shape")));
                        }
                        moments[k].push(t);
                        seen += 1;
                    }
                }
                if om.steps.len() != nm.params.len() {
                    return Err(FddmError::Corrupt("optimizer step counts do not match parameters".into()));
                }
                let [first, second] = moments;
                Some(Adam {
                    config: om.config,
                    first,
                    second,
                    steps: om.steps,
                })
            }
            None => None,
        };
        networks.push(NetworkEntry {
            role: nm.role,
            config: nm.config,
            params,
            optimizer,
        });
    }
    if seen != blob_count || r.pos != body.len() {
        return Err(FddmError::Corrupt(format!(
            "blob count mismatch: header says {blob_count}, metadata describes {seen}"
        )));
    }
    if crc32fast::hash(body) != file_crc {
        return Err(FddmError::Checksum {
            id: "file".into(),
            detail: "trailing CRC mismatch".into(),
        });
    }
    Ok(Checkpoint {
        mode: meta.mode,
        schedule: meta.schedule,
        step: meta.step,
        networks,
        extra: meta.extra,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FddmError::io(path, e))?;
    decode_checkpoint(&bytes)
}
