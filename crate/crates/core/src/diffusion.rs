//! DDPM machinery: variance schedule, forward noising, reverse steps and the
//! noise-prediction loss.
//!
//! Timesteps are 1-based (`1..=T`) everywhere in the public API. States are
//! dense `[N, C, H, W]` tensors; in the wavelet domain `C = 3` (see
//! [`BandStack`]).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::{FddmError, Result};
use crate::wavelet::{Grid2D, SubbandSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step tables for `t = 1..=T` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(FddmError::Parameter("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(FddmError::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(FddmError::Parameter("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(FddmError::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        Ok(Self {
            sigma2: beta.clone(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(FddmError::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// Schedule over the timesteps `stride, 2·stride, …, T`, with betas chosen
    /// so each retained `alpha_bar` is unchanged. Returns the original
    /// timestep for every respaced step.
    pub fn respaced(&self, stride: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        if stride == 0 || !self.steps().is_multiple_of(stride) {
            return Err(FddmError::Parameter(format!(
                "stride {stride} does not divide {} steps",
                self.steps()
            )));
        }
        let kept: Vec<usize> = (1..=self.steps() / stride).map(|k| k * stride).collect();
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(kept.len());
        for &t in &kept {
            let ab = self.alpha_bar(t);
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok((NoiseSchedule::from_betas(beta)?, kept))
    }
}

/// Diffusion state in the wavelet domain: channels (LH, HL, HH).
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack<T>(Tensor<T>);

impl<T: Scalar> BandStack<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 4 || t.dim(1) != 3 {
            return Err(FddmError::Dimension(format!(
                "band stack must be [N, 3, h, w], got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(FddmError::Parameter("band stack holds non-finite values".into()));
        }
        Ok(Self(t))
    }

    /// High bands of one subband set as a batch of one.
    pub fn from_subbands(bands: &SubbandSet) -> Self {
        let (h, w) = bands.band_dims();
        let mut data = Vec::with_capacity(3 * h * w);
        for g in bands.high() {
            data.extend(g.values().iter().map(|&v| T::from_f64(v)));
        }
        Self(Tensor::from_vec(&[1, 3, h, w], data))
    }

    /// Grids of batch item `index` in (LH, HL, HH) order.
    pub fn item_grids(&self, index: usize) -> [Grid2D; 3] {
        let (h, w) = (self.0.dim(2), self.0.dim(3));
        let plane = h * w;
        let base = index * 3 * plane;
        let grid = |c: usize| {
            let v = self.0.data()[base + c * plane..base + (c + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            Grid2D::new(h, w, v).expect("band stack values are finite")
        };
        [grid(0), grid(1), grid(2)]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Standard-normal draws plus the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample<T> {
    pub noise: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> NoiseSample<T> {
    pub fn draw(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            noise: standard_normal(shape, &mut rng),
            seed,
        }
    }
}

pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data)
}

fn check_same(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FddmError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Closed-form marginal `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps`.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let i = s.index(t)?;
    check_same(x0, eps, "q_sample")?;
    let a = T::from_f64(s.alpha_bar[i].sqrt());
    let b = T::from_f64((1.0 - s.alpha_bar[i]).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// [`q_sample`] with one timestep per batch item.
pub fn q_sample_per_item<T: Scalar>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_same(x0, eps, "q_sample")?;
    if ts.len() != x0.dim(0) {
        return Err(FddmError::Dimension(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            x0.dim(0)
        )));
    }
    let per = x0.len() / ts.len();
    let mut out = Tensor::zeros(x0.shape());
    for (b, &t) in ts.iter().enumerate() {
        let i = s.index(t)?;
        let a = T::from_f64(s.alpha_bar[i].sqrt());
        let c = T::from_f64((1.0 - s.alpha_bar[i]).sqrt());
        let r = b * per..(b + 1) * per;
        for ((o, &x), &e) in out.data_mut()[r.clone()]
            .iter_mut()
            .zip(&x0.data()[r.clone()])
            .zip(&eps.data()[r])
        {
            *o = a * x + c * e;
        }
    }
    Ok(out)
}

/// One forward transition `sqrt(1-β_t)·x_prev + sqrt(β_t)·z`.
pub fn q_step<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let i = s.index(t)?;
    let z = standard_normal::<T>(x_prev.shape(), rng);
    let a = T::from_f64((1.0 - s.beta[i]).sqrt());
    let b = T::from_f64(s.beta[i].sqrt());
    Ok(x_prev.zip_map(&z, |x, z| a * x + b * z))
}

/// `(x_t - (1-α_t)/sqrt(1-ᾱ_t) · eps_pred) / sqrt(α_t)`.
pub fn reverse_mean<T: Scalar>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let i = s.index(t)?;
    check_same(x_t, eps_pred, "reverse_mean")?;
    let inv_sqrt_alpha = 1.0 / s.alpha[i].sqrt();
    let coef = (1.0 - s.alpha[i]) / (1.0 - s.alpha_bar[i]).sqrt();
    let (k1, k2) = (T::from_f64(inv_sqrt_alpha), T::from_f64(inv_sqrt_alpha * coef));
    Ok(x_t.zip_map(eps_pred, |x, e| k1 * x - k2 * e))
}

/// Noise predictor `ε_θ(cond, x_t, t)`.
pub trait Denoiser<T: Scalar> {
    type Cond: ?Sized;

    fn predict_noise(&self, cond: &Self::Cond, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

fn p_sample_mapped<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    cond: &D::Cond,
    x_t: &Tensor<T>,
    t: usize,
    model_t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let eps = denoiser.predict_noise(cond, x_t, model_t)?;
    if eps.shape() != x_t.shape() {
        return Err(FddmError::Contract(format!(
            "denoiser returned {:?} for a state of {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    let mean = reverse_mean(x_t, &eps, t, s)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = T::from_f64(s.sigma2(t).sqrt());
    let z = standard_normal::<T>(x_t.shape(), rng);
    Ok(mean.zip_map(&z, |m, z| m + sigma * z))
}

/// One reverse transition; deterministic at `t = 1`.
pub fn p_sample<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    cond: &D::Cond,
    x_t: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(FddmError::Parameter("p_sample needs t >= 1".into()));
    }
    p_sample_mapped(denoiser, cond, x_t, t, t, s, rng)
}

/// Ancestral sampling from `N(0, I)` at timesteps `T, T-stride, …, stride`.
///
/// `stride = 1` is the plain DDPM chain. Larger strides run the chain on the
/// respaced schedule from [`NoiseSchedule::respaced`]; the denoiser always
/// sees the original timestep.
pub fn sample_loop<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    cond: &D::Cond,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut impl Rng,
    stride: usize,
) -> Result<Tensor<T>> {
    let mut x = standard_normal::<T>(shape, rng);
    if stride == 1 {
        for t in (1..=s.steps()).rev() {
            x = p_sample_mapped(denoiser, cond, &x, t, t, s, rng)?;
        }
        return Ok(x);
    }
    let (respaced, timesteps) = s.respaced(stride)?;
    for k in (1..=respaced.steps()).rev() {
        x = p_sample_mapped(denoiser, cond, &x, k, timesteps[k - 1], &respaced, rng)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

/// Mean absolute error between true and predicted noise.
pub fn hfrm_loss<T: Scalar>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<f64> {
    noise_loss(eps_true, eps_pred, LossNorm::L1)
}

pub fn noise_loss<T: Scalar>(
    eps_true: &Tensor<T>,
    eps_pred: &Tensor<T>,
    norm: LossNorm,
) -> Result<f64> {
    check_same(eps_true, eps_pred, "noise loss")?;
    let n = eps_true.len() as f64;
    let it = eps_true.data().iter().zip(eps_pred.data());
    Ok(match norm {
        LossNorm::L1 => it.map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / n,
        LossNorm::L2 => it.map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n,
    })
}
