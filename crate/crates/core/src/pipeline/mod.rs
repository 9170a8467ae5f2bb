//! Training, inference and benchmarking for the four pipeline modes.

mod bench;
mod config;
mod infer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{FddmError, Result};
use crate::networks::{build_cdpm, build_hfrm, build_plain_denoiser, Checkpoint, Model, ScheduleSpec};
use crate::phantom::{PlanningSample, Structure};

pub use bench::{benchmark_step_cost, BenchReport, BenchRow};
pub use config::{PipelineMode, RunConfig, TrainConfig, HIGH_BANDS, INPUT_CHANNELS};
pub use infer::{predict, Prediction};
pub use train::{FitOptions, LossReport, Trainer, LOSS_LOG_HEADER};

/// Doses are scaled so that 1.1× the prescription maps to +1.
pub const DOSE_HEADROOM: f64 = 1.1;

pub fn normalize_dose(dose: f64, prescription: f64) -> f64 {
    dose / (DOSE_HEADROOM * prescription) * 2.0 - 1.0
}

pub fn denormalize_dose(value: f64, prescription: f64) -> f64 {
    (value + 1.0) / 2.0 * DOSE_HEADROOM * prescription
}

/// Windowed CT in [0, 1] mapped to [-1, 1].
pub fn normalize_ct(ct: f64) -> f64 {
    ct * 2.0 - 1.0
}

fn check_batch(samples: &[&PlanningSample]) -> Result<(usize, usize)> {
    let Some(first) = samples.first() else {
        return Err(FddmError::Parameter("empty batch".into()));
    };
    let dims = first.dims();
    if let Some(s) = samples.iter().find(|s| s.dims() != dims) {
        return Err(FddmError::Dimension(format!(
            "sample {} is {:?}, batch is {dims:?}",
            s.id,
            s.dims()
        )));
    }
    Ok(dims)
}

/// `[N, 6, H, W]`: normalized CT followed by the five masks.
pub fn input_tensor(samples: &[&PlanningSample]) -> Result<Tensor<f32>> {
    let (h, w) = check_batch(samples)?;
    let mut data = Vec::with_capacity(samples.len() * INPUT_CHANNELS * h * w);
    for s in samples {
        data.extend(s.ct.values().iter().map(|&v| normalize_ct(v) as f32));
        for st in Structure::ALL {
            data.extend(s.mask(st).values().iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(&[samples.len(), INPUT_CHANNELS, h, w], data))
}

/// `[N, 1, H, W]` normalized dose.
pub fn target_tensor(samples: &[&PlanningSample]) -> Result<Tensor<f32>> {
    let (h, w) = check_batch(samples)?;
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend(s.dose.values().iter().map(|&v| normalize_dose(v, s.prescription) as f32));
    }
    Ok(Tensor::from_vec(&[samples.len(), 1, h, w], data))
}

/// `1 / rms` of what the diffusion model of `mode` generates over `samples`:
/// the normalized dose for B, its high bands for D.
pub fn unit_state_scale(mode: PipelineMode, samples: &[&PlanningSample]) -> Result<f64> {
    let y = target_tensor(samples)?;
    let state = match mode {
        PipelineMode::Full => crate::autograd::kernels::haar_forward(&y).slice_channels(1, HIGH_BANDS),
        _ => y,
    };
    let rms = (state.sq_norm() / state.len() as f64).sqrt();
    Ok(if rms > 1e-12 && rms.is_finite() { 1.0 / rms } else { 1.0 })
}

// RNG domains; each stream is (seed, domain, index).
pub(crate) const RNG_CDPM_INIT: u64 = 1;
pub(crate) const RNG_DENOISER_INIT: u64 = 2;
pub(crate) const RNG_TRAIN_STEP: u64 = 3;
pub(crate) const RNG_EPOCH_ORDER: u64 = 4;
pub(crate) const RNG_PREDICT: u64 = 5;

pub(crate) fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub(crate) fn derived_seed(seed: u64, domain: u64) -> u64 {
    use rand::RngCore;
    derived_rng(seed, domain, 0).next_u64()
}

/// The networks of one mode plus the noise schedule they were trained with.
pub struct Models {
    pub mode: PipelineMode,
    pub cdpm: Option<Model<f32>>,
    pub denoiser: Option<Model<f32>>,
    pub schedule: NoiseSchedule,
    pub schedule_spec: ScheduleSpec,
    /// Diffusion state = `state_scale` × target.
    pub state_scale: f64,
}

impl Models {
    pub fn build(run: &RunConfig, mode: PipelineMode) -> Result<Self> {
        run.validate(mode)?;
        let seed = run.train.seed;
        let cdpm_cfg = run.cdpm_config();
        let cdpm = if mode.uses_cdpm() {
            Some(build_cdpm(&cdpm_cfg, derived_seed(seed, RNG_CDPM_INIT))?)
        } else {
            None
        };
        let denoiser = match run.denoiser_config(mode) {
            None => None,
            Some(cfg) => Some(build_denoiser(mode, &cfg, &cdpm_cfg, derived_seed(seed, RNG_DENOISER_INIT))?),
        };
        let (beta_start, beta_end) = run.train.betas();
        let schedule_spec = ScheduleSpec {
            steps: run.train.timesteps,
            beta_start,
            beta_end,
            kind: "linear".into(),
        };
        Ok(Self {
            mode,
            cdpm,
            denoiser,
            schedule: schedule_from_spec(&schedule_spec)?,
            schedule_spec,
            state_scale: run.train.state_scale.unwrap_or(1.0),
        })
    }

    /// Rebuilds the networks named in a checkpoint and loads their weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        let mode: PipelineMode = ck.mode.parse()?;
        let run: RunConfig = serde_json::from_value(ck.extra.get("run").cloned().unwrap_or_default())
            .map_err(|e| FddmError::Corrupt(format!("checkpoint run config: {e}")))?;
        let mut models = Self::build(&run, mode)?;
        if ck.schedule != models.schedule_spec {
            return Err(FddmError::Corrupt("checkpoint schedule disagrees with its run config".into()));
        }
        let roles: Vec<(&str, Option<&mut Model<f32>>)> = vec![
            ("cdpm", models.cdpm.as_mut()),
            (mode.denoiser_role().unwrap_or(""), models.denoiser.as_mut()),
        ];
        for (role, model) in roles {
            let Some(model) = model else { continue };
            let entry = ck
                .network(role)
                .ok_or_else(|| FddmError::Corrupt(format!("checkpoint has no `{role}` network")))?;
            if &entry.config != model.config() {
                return Err(FddmError::Corrupt(format!("`{role}` config differs from the run config")));
            }
            model
                .params
                .load_from(entry.params.names(), entry.params.tensors().to_vec())
                .map_err(|e| FddmError::Corrupt(format!("`{role}` weights: {e}")))?;
        }
        Ok((models, run))
    }

    pub fn cdpm(&self) -> Result<&Model<f32>> {
        self.cdpm
            .as_ref()
            .ok_or_else(|| FddmError::Contract(format!("mode {} has no coarse model", self.mode)))
    }

    pub fn denoiser(&self) -> Result<&Model<f32>> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| FddmError::Contract(format!("mode {} has no second network", self.mode)))
    }
}

fn build_denoiser(
    mode: PipelineMode,
    cfg: &crate::networks::NetworkConfig,
    coarse: &crate::networks::NetworkConfig,
    seed: u64,
) -> Result<Model<f32>> {
    match mode {
        PipelineMode::Full => build_hfrm(cfg, coarse, seed),
        PipelineMode::DiffusionDirect => build_plain_denoiser(cfg, seed),
        // The refiner is a time-free regression UNet with no feature ports.
        _ => build_cdpm(cfg, seed),
    }
}

pub fn schedule_from_spec(spec: &ScheduleSpec) -> Result<NoiseSchedule> {
    if spec.kind != "linear" {
        return Err(FddmError::Config(format!("unsupported schedule kind `{}`", spec.kind)));
    }
    make_schedule(spec.steps, spec.beta_start, spec.beta_end, ScheduleKind::Linear)
}
