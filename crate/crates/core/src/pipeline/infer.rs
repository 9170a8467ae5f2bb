use super::{denormalize_dose, derived_rng, input_tensor, Models, PipelineMode, HIGH_BANDS, RNG_PREDICT};
use crate::autograd::{kernels, Tensor};
use crate::diffusion::{sample_loop, BandStack};
use crate::error::{FddmError, Result};
use crate::networks::{cdpm_forward, ConditioningBundle};
use crate::phantom::PlanningSample;
use crate::wavelet::{dwt2, iwt2, Grid2D, SubbandSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Network-scale output before clamping.
    pub normalized: Grid2D,
    /// Dose in Gy, clamped at zero.
    pub dose: Grid2D,
    /// Coarse-model output on the normalized scale, when the mode has one.
    pub coarse: Option<Grid2D>,
}

fn grid_of(t: &Tensor<f32>) -> Result<Grid2D> {
    let (h, w) = (t.dim(2), t.dim(3));
    Grid2D::new(h, w, t.data().iter().map(|&v| v as f64).collect())
        .map_err(|_| FddmError::Numeric("network output is not finite".into()))
}

/// Rebuilds a slice from the coarse low band and refined high bands.
fn recombine(coarse: &Grid2D, high: &Tensor<f32>) -> Result<Grid2D> {
    let ll = dwt2(coarse)?.ll;
    let [lh, hl, hh] = BandStack::new(high.clone())
        .map_err(|e| FddmError::Numeric(format!("refined bands: {e}")))?
        .item_grids(0);
    iwt2(&SubbandSet::new(ll, lh, hl, hh)?)
}

/// Predicts one slice. `stride` sets the sampling stride for the diffusion
/// modes; the per-slice noise stream comes from `(seed, sample.index)`.
pub fn predict(models: &Models, sample: &PlanningSample, stride: usize, seed: u64) -> Result<Prediction> {
    let x = input_tensor(&[sample])?;
    let (h, w) = sample.dims();
    let mut rng = derived_rng(seed, RNG_PREDICT, sample.index as u64);
    let coarse_out = match &models.cdpm {
        Some(m) => Some(cdpm_forward(m, &x)?),
        None => None,
    };
    let coarse = coarse_out.as_ref().map(|o| grid_of(&o.coarse)).transpose()?;
    let coarse_high = || {
        let c = coarse_out.as_ref().expect("mode has a coarse model");
        kernels::haar_forward(&c.coarse).slice_channels(1, HIGH_BANDS)
    };

    let normalized = match models.mode {
        PipelineMode::CoarseOnly => coarse.clone().expect("mode A has a coarse model"),
        PipelineMode::DiffusionDirect => {
            let bundle = ConditioningBundle {
                image_cond: x.clone(),
                feature_cond: Vec::new(),
            };
            let out = sample_loop(models.denoiser()?, &bundle, &[1, 1, h, w], &models.schedule, &mut rng, stride)?;
            grid_of(&out.scale(1.0 / models.state_scale as f32))?
        }
        PipelineMode::CoarseCnnRefine => {
            let pooled = kernels::avg_pool2x(&x);
            let input = Tensor::concat_channels(&[&coarse_high(), &pooled]);
            let refined = cdpm_forward(models.denoiser()?, &input)?.coarse;
            recombine(coarse.as_ref().expect("mode C has a coarse model"), &refined)?
        }
        PipelineMode::Full => {
            let c = coarse_out.as_ref().expect("mode D has a coarse model");
            let cond_high = coarse_high().scale(models.state_scale as f32);
            let bundle = ConditioningBundle::new(&cond_high, &x, c.features.clone())?;
            let shape = [1, HIGH_BANDS, h / 2, w / 2];
            let high = sample_loop(models.denoiser()?, &bundle, &shape, &models.schedule, &mut rng, stride)?
                .scale(1.0 / models.state_scale as f32);
            recombine(coarse.as_ref().expect("mode D has a coarse model"), &high)?
        }
    };
    if normalized.values().iter().any(|v| !v.is_finite()) {
        return Err(FddmError::Numeric(format!("prediction for {} is not finite", sample.id)));
    }
    let dose = normalized.map(|v| denormalize_dose(v, sample.prescription).max(0.0));
    Ok(Prediction {
        id: sample.id.clone(),
        normalized,
        dose,
        coarse,
    })
}
