use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PlanningSample, Split, Structure};
use crate::error::{FddmError, Result};
use crate::wavelet::Grid2D;

pub const ARRAY_MAGIC: &[u8; 8] = b"FDDMARR1";
pub const MANIFEST_SCHEMA: u32 = 1;

/// Encode `values` with shape `dims` as magic, rank, dims, f32 payload, CRC32.
pub fn encode_array(dims: &[usize], values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * dims.len() + 4 * values.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Errors carry no sample context; callers wrap them.
pub fn decode_array(bytes: &[u8]) -> std::result::Result<(Vec<usize>, Vec<f32>), String> {
    if bytes.len() < 16 || &bytes[..8] != ARRAY_MAGIC {
        return Err("bad magic or truncated header".into());
    }
    let word = |at: usize| -> std::result::Result<u32, String> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| "truncated".to_string())
    };
    let rank = word(8)? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(12 + 4 * i)? as usize);
    }
    let header = 12 + 4 * rank;
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("size overflow")?;
    let expected = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(header + 4))
        .ok_or("size overflow")?;
    if bytes.len() != expected {
        return Err(format!("length {} does not match header ({expected})", bytes.len()));
    }
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err("CRC mismatch".into());
    }
    let values = body[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, values))
}

pub fn write_array(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    fs::write(path, encode_array(dims, values)).map_err(|e| FddmError::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| FddmError::io(path, e))?;
    decode_array(&bytes).map_err(|detail| FddmError::Checksum {
        id: path.display().to_string(),
        detail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub prescription: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PlanningSample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&PlanningSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }
}

fn array_names() -> Vec<(String, Option<Structure>)> {
    let mut v = vec![("ct".to_string(), None), ("dose".to_string(), None)];
    for s in Structure::ALL {
        v.push((format!("mask_{}", s.name().to_lowercase()), Some(s)));
    }
    v
}

fn grid_f32(g: &Grid2D) -> Vec<f32> {
    g.values().iter().map(|&v| v as f32).collect()
}

pub fn write_dataset(samples: &[PlanningSample], splits: &[Split], dir: &Path) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(FddmError::Dataset(format!(
            "{} samples but {} split labels",
            samples.len(),
            splits.len()
        )));
    }
    let (height, width) = samples.first().map_or((0, 0), |s| s.dims());
    let root = dir.join("samples");
    fs::create_dir_all(&root).map_err(|e| FddmError::io(&root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, &split) in samples.iter().zip(splits) {
        if s.dims() != (height, width) {
            return Err(FddmError::Dataset(format!("sample {} has mismatched dims", s.id)));
        }
        let sd = root.join(&s.id);
        fs::create_dir_all(&sd).map_err(|e| FddmError::io(&sd, e))?;
        for (name, structure) in array_names() {
            let grid = match (name.as_str(), structure) {
                ("ct", _) => &s.ct,
                ("dose", _) => &s.dose,
                (_, Some(st)) => s.mask(st),
                _ => unreachable!(),
            };
            write_array(&sd.join(format!("{name}.arr")), &[height, width], &grid_f32(grid))?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            index: s.index,
            seed: s.seed,
            split,
            prescription: s.prescription,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        height,
        width,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| FddmError::io(&path, e))
}

fn read_grid(dir: &Path, id: &str, name: &str, dims: (usize, usize)) -> Result<Grid2D> {
    let path: PathBuf = dir.join(format!("{name}.arr"));
    if !path.exists() {
        return Err(FddmError::Dataset(format!("sample {id}: missing array {name}.arr")));
    }
    let bytes = fs::read(&path).map_err(|e| FddmError::io(&path, e))?;
    let (shape, values) = decode_array(&bytes).map_err(|detail| FddmError::Checksum {
        id: format!("sample {id}"),
        detail: format!("{name}.arr: {detail}"),
    })?;
    if shape != [dims.0, dims.1] {
        return Err(FddmError::Dataset(format!(
            "sample {id}: {name}.arr has shape {shape:?}, manifest says {}x{}",
            dims.0, dims.1
        )));
    }
    Grid2D::new(dims.0, dims.1, values.into_iter().map(f64::from).collect())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| FddmError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| FddmError::Dataset(format!("manifest is malformed: {e}")))?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(FddmError::Version {
            found: manifest.schema_version,
            expected: MANIFEST_SCHEMA,
        });
    }
    let root = dir.join("samples");
    let on_disk = match fs::read_dir(&root) {
        Ok(rd) => rd.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).count(),
        Err(_) => 0,
    };
    if on_disk != manifest.samples.len() {
        return Err(FddmError::Dataset(format!(
            "manifest lists {} samples but {on_disk} sample directories exist",
            manifest.samples.len()
        )));
    }
    let dims = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let sd = root.join(&e.id);
        let ct = read_grid(&sd, &e.id, "ct", dims)?;
        let dose = read_grid(&sd, &e.id, "dose", dims)?;
        let mut masks = Vec::with_capacity(5);
        for s in Structure::ALL {
            masks.push(read_grid(&sd, &e.id, &format!("mask_{}", s.name().to_lowercase()), dims)?);
        }
        samples.push(PlanningSample {
            id: e.id,
            seed: e.seed,
            index: e.index,
            ct,
            masks: masks.try_into().expect("five masks"),
            dose,
            prescription: e.prescription,
        });
        splits.push(e.split);
    }
    Ok(Dataset { samples, splits })
}
