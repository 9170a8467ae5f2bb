//! Dose-volume metrics and prediction-vs-truth difference reports.
//!
//! Doses and masks are flat voxel slices, so 2D slices and full volumes go
//! through the same code. A voxel is in a mask when its mask value is > 0.5.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{FddmError, Result};
use crate::phantom::Structure;

fn in_mask(dose: &[f64], mask: &[f64], what: &str) -> Result<Vec<f64>> {
    if dose.len() != mask.len() {
        return Err(FddmError::Dimension(format!(
            "dose has {} voxels, mask has {}",
            dose.len(),
            mask.len()
        )));
    }
    let v: Vec<f64> = dose
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m > 0.5)
        .map(|(&d, _)| d)
        .collect();
    if v.is_empty() {
        return Err(FddmError::EmptyMask(what.to_string()));
    }
    Ok(v)
}

/// D_m: the `⌈m·N/100⌉`-th largest in-mask dose, so at least that many
/// voxels receive it or more.
pub fn dose_percentile(dose: &[f64], mask: &[f64], m: f64) -> Result<f64> {
    if !(m > 0.0 && m <= 100.0) {
        return Err(FddmError::Parameter(format!("percentile {m} is outside (0, 100]")));
    }
    let mut v = in_mask(dose, mask, "dose_percentile")?;
    v.sort_by(|a, b| b.total_cmp(a));
    // m·N is exact for integral m, so the division rounds correctly.
    let k = (m * v.len() as f64 / 100.0).ceil().max(1.0) as usize;
    Ok(v[k.min(v.len()) - 1])
}

pub fn mean_dose(dose: &[f64], mask: &[f64]) -> Result<f64> {
    let v = in_mask(dose, mask, "mean_dose")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `|PTV ∩ ISO|² / (|PTV|·|ISO|)` with `ISO = {dose ≥ prescription}`; 0 when
/// nothing reaches the prescription.
pub fn conformity_index(dose: &[f64], ptv: &[f64], prescription: f64) -> Result<f64> {
    if !(prescription > 0.0 && prescription.is_finite()) {
        return Err(FddmError::Parameter(format!("prescription must be positive, got {prescription}")));
    }
    in_mask(dose, ptv, "conformity_index")?;
    let (mut v_ptv, mut v_iso, mut both) = (0u64, 0u64, 0u64);
    for (&d, &m) in dose.iter().zip(ptv) {
        let inside = m > 0.5;
        let iso = d >= prescription;
        v_ptv += inside as u64;
        v_iso += iso as u64;
        both += (inside && iso) as u64;
    }
    if v_iso == 0 {
        return Ok(0.0);
    }
    Ok((both * both) as f64 / (v_ptv as f64 * v_iso as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvhCurve {
    pub dose_bins: Vec<f64>,
    pub volume_fraction: Vec<f64>,
}

/// Fraction of in-mask voxels with dose ≥ each edge `0, w, 2w, …` up to `max_dose`.
pub fn dvh(dose: &[f64], mask: &[f64], bin_width: f64, max_dose: f64) -> Result<DvhCurve> {
    if !(bin_width > 0.0 && bin_width.is_finite()) || !(max_dose >= 0.0 && max_dose.is_finite()) {
        return Err(FddmError::Parameter(format!(
            "invalid DVH binning (width {bin_width}, max {max_dose})"
        )));
    }
    let mut v = in_mask(dose, mask, "dvh")?;
    v.sort_by(|a, b| a.total_cmp(b));
    let edges = (max_dose / bin_width + 1e-9).floor() as usize + 1;
    let n = v.len() as f64;
    let dose_bins: Vec<f64> = (0..edges).map(|k| k as f64 * bin_width).collect();
    let volume_fraction = dose_bins
        .iter()
        .map(|&e| {
            let below = v.partition_point(|&d| d < e);
            (v.len() - below) as f64 / n
        })
        .collect();
    Ok(DvhCurve {
        dose_bins,
        volume_fraction,
    })
}

/// One evaluated case: flat dose, per-structure masks and the prescription.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub dose: Vec<f64>,
    pub masks: BTreeMap<Structure, Vec<f64>>,
    pub prescription: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Ci,
    D2,
    D50,
    Dmean,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Self::Ci, Self::D2, Self::D50, Self::Dmean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ci => "CI",
            Self::D2 => "D2",
            Self::D50 => "D50",
            Self::Dmean => "Dmean",
        }
    }
}

/// Signed differences `pred − gt` for one case and structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDelta {
    pub case_id: String,
    pub structure: Structure,
    /// PTV only.
    pub ci: Option<f64>,
    pub d2: f64,
    pub d50: f64,
    pub dmean: f64,
}

impl CaseDelta {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ci => self.ci,
            Metric::D2 => Some(self.d2),
            Metric::D50 => Some(self.d50),
            Metric::Dmean => Some(self.dmean),
        }
    }
}

/// Mean and population standard deviation of |Δ|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean_abs: f64,
    pub std_abs: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
        let var = values.iter().map(|v| (v.abs() - mean_abs).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean_abs,
            std_abs: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseDelta>,
    pub structures: Vec<Structure>,
}

impl MetricsReport {
    pub fn aggregate(&self, s: Structure, m: Metric) -> Option<Aggregate> {
        let values: Vec<f64> = self
            .cases
            .iter()
            .filter(|c| c.structure == s)
            .filter_map(|c| c.get(m))
            .collect();
        Aggregate::of(&values)
    }

    pub fn cases_csv(&self) -> String {
        let mut out = String::from("case,structure,delta_ci,delta_d2,delta_d50,delta_dmean\n");
        for c in &self.cases {
            let ci = c.ci.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{ci},{},{},{}",
                c.case_id,
                c.structure.name(),
                c.d2,
                c.d50,
                c.dmean
            );
        }
        out
    }

    /// One row per structure: `|Δ|` mean and std for each metric.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("structure");
        for m in Metric::ALL {
            let _ = write!(out, ",abs_delta_{0}_mean,abs_delta_{0}_std", m.name().to_lowercase());
        }
        out.push('\n');
        for &s in &self.structures {
            out.push_str(s.name());
            for m in Metric::ALL {
                match self.aggregate(s, m) {
                    Some(a) => {
                        let _ = write!(out, ",{},{}", a.mean_abs, a.std_abs);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pairs cases by id. Structures whose mask is empty in a case are skipped
/// for that case.
pub fn delta_report(pred: &[Case], gt: &[Case], structures: &[Structure]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(FddmError::Unpaired(format!(
            "{} predictions for {} ground-truth cases",
            pred.len(),
            gt.len()
        )));
    }
    let mut cases = Vec::new();
    for p in pred {
        let g = gt
            .iter()
            .find(|g| g.id == p.id)
            .ok_or_else(|| FddmError::Unpaired(format!("no ground truth for case {}", p.id)))?;
        if p.masks != g.masks || p.dose.len() != g.dose.len() {
            return Err(FddmError::Unpaired(format!("case {} has differing masks or sizes", p.id)));
        }
        for &s in structures {
            let Some(mask) = g.masks.get(&s) else {
                return Err(FddmError::Unpaired(format!("case {} has no {} mask", p.id, s.name())));
            };
            if !mask.iter().any(|&m| m > 0.5) {
                continue;
            }
            let ci = if s == Structure::Ptv {
                Some(conformity_index(&p.dose, mask, g.prescription)? - conformity_index(&g.dose, mask, g.prescription)?)
            } else {
                None
            };
            cases.push(CaseDelta {
                case_id: p.id.clone(),
                structure: s,
                ci,
                d2: dose_percentile(&p.dose, mask, 2.0)? - dose_percentile(&g.dose, mask, 2.0)?,
                d50: dose_percentile(&p.dose, mask, 50.0)? - dose_percentile(&g.dose, mask, 50.0)?,
                dmean: mean_dose(&p.dose, mask)? - mean_dose(&g.dose, mask)?,
            });
        }
    }
    Ok(MetricsReport {
        cases,
        structures: structures.to_vec(),
    })
}
