use std::fmt::Write as _;
use std::time::Instant;

use super::{derived_rng, Models, PipelineMode, RunConfig, HIGH_BANDS, INPUT_CHANNELS, RNG_PREDICT};
use crate::autograd::{kernels, Tensor};
use crate::diffusion::{standard_normal, Denoiser};
use crate::error::{FddmError, Result};
use crate::networks::{cdpm_forward, ConditioningBundle, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub domain: &'static str,
    pub height: usize,
    pub width: usize,
    pub state_channels: usize,
    /// Spatial elements per state channel.
    pub spatial_elements: usize,
    pub median_step_ms: f64,
    /// Sum over `sampling_steps` consecutive denoiser evaluations.
    pub total_sampling_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: [BenchRow; 2],
    pub trials: usize,
    pub sampling_steps: usize,
    /// Image-domain median over wavelet-domain median.
    pub speedup: f64,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out =
            String::from("domain,height,width,state_channels,spatial_elements,median_step_ms,total_sampling_ms,speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4},{:.4}",
                r.domain,
                r.height,
                r.width,
                r.state_channels,
                r.spatial_elements,
                r.median_step_ms,
                r.total_sampling_ms,
                self.speedup
            );
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_denoiser(
    model: &Model<f32>,
    cond: &ConditioningBundle<f32>,
    x_t: &Tensor<f32>,
    timesteps: usize,
    trials: usize,
    sampling_steps: usize,
) -> Result<(f64, f64)> {
    // Warm-up evaluation, not timed.
    model.predict_noise(cond, x_t, timesteps)?;
    let mut times = Vec::with_capacity(trials);
    for k in 0..trials {
        let t = timesteps - k % timesteps;
        let start = Instant::now();
        std::hint::black_box(model.predict_noise(cond, x_t, t)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let start = Instant::now();
    for k in 0..sampling_steps {
        std::hint::black_box(model.predict_noise(cond, x_t, timesteps - k % timesteps)?);
    }
    Ok((median(times), start.elapsed().as_secs_f64() * 1e3))
}

/// Times one denoiser evaluation on an `h × w` slice in the image domain
/// (the direct model of mode B) against the wavelet domain (the refinement
/// model of mode D), using the widths in `run`.
pub fn benchmark_step_cost(
    run: &RunConfig,
    (h, w): (usize, usize),
    trials: usize,
    sampling_steps: usize,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(FddmError::Parameter("benchmark needs at least one trial".into()));
    }
    let mut rng = derived_rng(run.train.seed, RNG_PREDICT, u64::MAX);
    let x = standard_normal::<f32>(&[1, INPUT_CHANNELS, h, w], &mut rng);
    let t_max = run.train.timesteps;

    let direct = Models::build(run, PipelineMode::DiffusionDirect)?;
    let image_cond = ConditioningBundle {
        image_cond: x.clone(),
        feature_cond: Vec::new(),
    };
    let x_img = standard_normal::<f32>(&[1, 1, h, w], &mut rng);
    let (img_med, img_total) = time_denoiser(direct.denoiser()?, &image_cond, &x_img, t_max, trials, sampling_steps)?;
    drop(direct);

    let full = Models::build(run, PipelineMode::Full)?;
    let coarse = cdpm_forward(full.cdpm()?, &x)?;
    let high = kernels::haar_forward(&coarse.coarse).slice_channels(1, HIGH_BANDS);
    let bundle = ConditioningBundle::new(&high, &x, coarse.features)?;
    let x_wav = standard_normal::<f32>(&[1, HIGH_BANDS, h / 2, w / 2], &mut rng);
    let (wav_med, wav_total) = time_denoiser(full.denoiser()?, &bundle, &x_wav, t_max, trials, sampling_steps)?;

    Ok(BenchReport {
        rows: [
            BenchRow {
                domain: "image",
                height: h,
                width: w,
                state_channels: 1,
                spatial_elements: h * w,
                median_step_ms: img_med,
                total_sampling_ms: img_total,
            },
            BenchRow {
                domain: "wavelet",
                height: h / 2,
                width: w / 2,
                state_channels: HIGH_BANDS,
                spatial_elements: (h / 2) * (w / 2),
                median_step_ms: wav_med,
                total_sampling_ms: wav_total,
            },
        ],
        trials,
        sampling_steps,
        speedup: img_med / wav_med,
    })
}
