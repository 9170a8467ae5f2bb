//! On-disk prediction sets: one `.arr` dose per case plus `predictions.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fddm_core::metrics::Case;
use fddm_core::phantom::{read_array, write_array, Dataset, PlanningSample, Structure};
use fddm_core::wavelet::Grid2D;
use fddm_core::{FddmError, Result};

pub const MANIFEST: &str = "predictions.json";
pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCase {
    pub id: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub schema_version: u32,
    pub mode: String,
    pub seed: u64,
    pub stride: usize,
    pub split: String,
    pub checkpoint_step: u64,
    pub cases: Vec<PredictedCase>,
}

pub fn write_case(dir: &Path, id: &str, dose: &Grid2D) -> Result<PredictedCase> {
    let file = format!("{id}.arr");
    let (h, w) = dose.dims();
    let values: Vec<f32> = dose.values().iter().map(|&v| v as f32).collect();
    write_array(&dir.join(&file), &[h, w], &values)?;
    Ok(PredictedCase { id: id.to_string(), file })
}

pub fn write_manifest(dir: &Path, m: &PredictionManifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| FddmError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<PredictionManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| FddmError::io(&path, e))?;
    let m: PredictionManifest = serde_json::from_str(&text)
        .map_err(|e| FddmError::Dataset(format!("{}: malformed prediction manifest: {e}", path.display())))?;
    if m.schema_version != SCHEMA {
        return Err(FddmError::Version {
            found: m.schema_version,
            expected: SCHEMA,
        });
    }
    Ok(m)
}

fn case_of(sample: &PlanningSample, dose: Vec<f64>) -> Case {
    Case {
        id: sample.id.clone(),
        dose,
        masks: Structure::ALL
            .iter()
            .map(|&s| (s, sample.mask(s).values().to_vec()))
            .collect::<BTreeMap<_, _>>(),
        prescription: sample.prescription,
    }
}

/// Predicted and ground-truth cases, paired by id in manifest order.
pub fn load_pairs(pred_dir: &Path, data: &Dataset) -> Result<(Vec<Case>, Vec<Case>)> {
    let m = read_manifest(pred_dir)?;
    let mut pred = Vec::with_capacity(m.cases.len());
    let mut gt = Vec::with_capacity(m.cases.len());
    for c in &m.cases {
        let sample = data
            .samples
            .iter()
            .find(|s| s.id == c.id)
            .ok_or_else(|| FddmError::Unpaired(format!("case {} is not in the dataset", c.id)))?;
        let path = pred_dir.join(&c.file);
        if !path.exists() {
            return Err(FddmError::Unpaired(format!(
                "prediction for case {} is missing ({})",
                c.id,
                path.display()
            )));
        }
        let (dims, values) = read_array(&path)?;
        let (h, w) = sample.dims();
        if dims != [h, w] {
            return Err(FddmError::Dimension(format!(
                "prediction for case {} is {dims:?}, ground truth is {h}x{w}",
                c.id
            )));
        }
        pred.push(case_of(sample, values.iter().map(|&v| v as f64).collect()));
        gt.push(case_of(sample, sample.dose.values().to_vec()));
    }
    Ok((pred, gt))
}
