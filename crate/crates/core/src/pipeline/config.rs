use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::diffusion::LossNorm;
use crate::error::{FddmError, Result};
use crate::networks::NetworkConfig;

/// Planning input channels: CT plus five structure masks.
pub const INPUT_CHANNELS: usize = 6;
/// High-frequency subbands per slice.
pub const HIGH_BANDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineMode {
    /// A: coarse model only.
    CoarseOnly,
    /// B: diffusion straight on the full-resolution dose.
    DiffusionDirect,
    /// C: coarse model plus a second regression UNet on the high bands.
    CoarseCnnRefine,
    /// D: coarse model plus subband diffusion refinement.
    Full,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [Self::CoarseOnly, Self::DiffusionDirect, Self::CoarseCnnRefine, Self::Full];

    pub fn letter(self) -> &'static str {
        match self {
            Self::CoarseOnly => "A",
            Self::DiffusionDirect => "B",
            Self::CoarseCnnRefine => "C",
            Self::Full => "D",
        }
    }

    pub fn uses_cdpm(self) -> bool {
        self != Self::DiffusionDirect
    }

    /// Role name of the second network, if any.
    pub fn denoiser_role(self) -> Option<&'static str> {
        match self {
            Self::CoarseOnly => None,
            Self::DiffusionDirect => Some("direct"),
            Self::CoarseCnnRefine => Some("refiner"),
            Self::Full => Some("hfrm"),
        }
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, Self::DiffusionDirect | Self::Full)
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for PipelineMode {
    type Err = FddmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "COARSEONLY" => Ok(Self::CoarseOnly),
            "B" | "DIFFUSIONDIRECT" => Ok(Self::DiffusionDirect),
            "C" | "COARSECNNREFINE" => Ok(Self::CoarseCnnRefine),
            "D" | "FULL" => Ok(Self::Full),
            _ => Err(FddmError::Config(format!("unknown mode `{s}` (expected A, B, C or D)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub timesteps: usize,
    /// Linear endpoints; default 1e-4 and 0.02 whatever `timesteps` is.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub seed: u64,
    pub end_to_end: bool,
    pub sample_stride: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss_norm: LossNorm,
    /// Multiplier applied to the diffusion state (dose or high bands) so it
    /// has roughly unit scale. `fit` derives it from the training set when
    /// unset; single steps outside `fit` use 1.
    pub state_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1300,
            steps: None,
            learning_rate: 1e-4,
            batch_size: 16,
            timesteps: 1000,
            beta_start: None,
            beta_end: None,
            seed: 0,
            end_to_end: true,
            sample_stride: 20,
            checkpoint_every: 0,
            loss_norm: LossNorm::L1,
            state_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn betas(&self) -> (f64, f64) {
        (self.beta_start.unwrap_or(1e-4), self.beta_end.unwrap_or(0.02))
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * train_len.div_ceil(self.batch_size.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FddmError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.timesteps == 0 {
            return fail("timesteps must be positive");
        }
        if self.steps.is_none() && self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.sample_stride == 0 || !self.timesteps.is_multiple_of(self.sample_stride) {
            return Err(FddmError::Config(format!(
                "sample_stride {} must divide timesteps {}",
                self.sample_stride, self.timesteps
            )));
        }
        if let Some(k) = self.state_scale {
            if !(k > 0.0 && k.is_finite()) {
                return fail("state_scale must be positive");
            }
        }
        let (b0, b1) = self.betas();
        if !(b0 > 0.0 && b0 <= b1 && b1 < 1.0) {
            return Err(FddmError::Config(format!("invalid beta range [{b0}, {b1}]")));
        }
        Ok(())
    }
}

/// Everything a training run needs apart from the dataset and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cdpm: NetworkConfig,
    /// Widths for the second network; channel counts come from the mode.
    pub denoiser: NetworkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            cdpm: NetworkConfig::cdpm_default(),
            denoiser: NetworkConfig::hfrm_default(),
        }
    }
}

impl RunConfig {
    pub fn cdpm_config(&self) -> NetworkConfig {
        NetworkConfig {
            in_channels: INPUT_CHANNELS,
            out_channels: 1,
            time_embedding_dim: None,
            ..self.cdpm.clone()
        }
    }

    pub fn denoiser_config(&self, mode: PipelineMode) -> Option<NetworkConfig> {
        let base = self.denoiser.clone();
        let time = base.time_embedding_dim.or(Some(4 * base.base_channels));
        match mode {
            PipelineMode::CoarseOnly => None,
            PipelineMode::DiffusionDirect => Some(NetworkConfig {
                in_channels: 1 + INPUT_CHANNELS,
                out_channels: 1,
                time_embedding_dim: time,
                ..base
            }),
            PipelineMode::CoarseCnnRefine => Some(NetworkConfig {
                in_channels: HIGH_BANDS + INPUT_CHANNELS,
                out_channels: HIGH_BANDS,
                time_embedding_dim: None,
                ..base
            }),
            PipelineMode::Full => Some(NetworkConfig {
                in_channels: 2 * HIGH_BANDS + INPUT_CHANNELS,
                out_channels: HIGH_BANDS,
                time_embedding_dim: time,
                ..base
            }),
        }
    }

    pub fn validate(&self, mode: PipelineMode) -> Result<()> {
        self.train.validate()?;
        self.cdpm_config().validate()?;
        if let Some(d) = self.denoiser_config(mode) {
            d.validate()?;
        }
        Ok(())
    }

    /// Applies `key = value` overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::default();
        let t = &mut cfg.train;
        kv.take_into("epochs", &mut t.epochs)?;
        if let Some(s) = kv.take::<usize>("steps")? {
            t.steps = Some(s);
        }
        kv.take_into("learning_rate", &mut t.learning_rate)?;
        kv.take_into("batch_size", &mut t.batch_size)?;
        kv.take_into("timesteps", &mut t.timesteps)?;
        if let Some(b) = kv.take::<f64>("beta_start")? {
            t.beta_start = Some(b);
        }
        if let Some(b) = kv.take::<f64>("beta_end")? {
            t.beta_end = Some(b);
        }
        kv.take_into("seed", &mut t.seed)?;
        kv.take_into("end_to_end", &mut t.end_to_end)?;
        kv.take_into("sample_stride", &mut t.sample_stride)?;
        kv.take_into("checkpoint_every", &mut t.checkpoint_every)?;
        if let Some(k) = kv.take::<f64>("state_scale")? {
            t.state_scale = Some(k);
        }
        if let Some(n) = kv.take::<String>("loss_norm")? {
            t.loss_norm = match n.to_ascii_lowercase().as_str() {
                "l1" => LossNorm::L1,
                "l2" => LossNorm::L2,
                _ => return Err(FddmError::Config(format!("loss_norm must be l1 or l2, got `{n}`"))),
            };
        }
        for (prefix, net) in [("cdpm", &mut cfg.cdpm), ("denoiser", &mut cfg.denoiser)] {
            parse_network(&mut kv, prefix, net)?;
        }
        kv.finish()?;
        Ok(cfg)
    }
}

fn parse_network(kv: &mut KeyValues, prefix: &str, net: &mut NetworkConfig) -> Result<()> {
    let key = |k: &str| format!("{prefix}.{k}");
    kv.take_into(&key("levels"), &mut net.levels)?;
    kv.take_into(&key("base_channels"), &mut net.base_channels)?;
    if let Some(m) = kv.take_list::<usize>(&key("channel_multipliers"))? {
        net.channel_multipliers = m;
    }
    kv.take_into(&key("groupnorm_groups"), &mut net.groupnorm_groups)?;
    kv.take_into(&key("attention_heads"), &mut net.attention_heads)?;
    if let Some(a) = kv.take::<bool>(&key("attention"))? {
        if !a {
            return Err(FddmError::Config(format!("{prefix}.attention is fixed to true")));
        }
    }
    if let Some(d) = kv.take::<usize>(&key("time_embedding_dim"))? {
        if prefix == "cdpm" {
            return Err(FddmError::Config("cdpm.time_embedding_dim: the coarse model takes no timestep".into()));
        }
        net.time_embedding_dim = Some(d);
    }
    // Channel counts are fixed by the data layout and mode; accept them only
    // as consistency declarations.
    for (k, fixed) in [("in_channels", net.in_channels), ("out_channels", net.out_channels)] {
        if let Some(v) = kv.take::<usize>(&key(k))? {
            if prefix == "cdpm" && v != fixed {
                return Err(FddmError::Config(format!(
                    "{prefix}.{k} = {v} conflicts with the planning layout ({fixed})"
                )));
            }
        }
    }
    Ok(())
}
