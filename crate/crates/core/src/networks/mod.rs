//! CDPM and HFRM UNets plus the checkpoint container.

mod checkpoint;
pub mod layers;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, Graph, ParamStore, Scalar, Tensor, Var};
use crate::diffusion::Denoiser;
use crate::error::{FddmError, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetworkEntry, ScheduleSpec, CHECKPOINT_VERSION};
pub use unet::{ConditionPort, PortSpec, UNet, UNetOutput, FIRST_CROSS_ATTENTION_LEVEL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub groupnorm_groups: usize,
    pub attention_heads: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_embedding_dim: Option<usize>,
}

impl NetworkConfig {
    /// Coarse model defaults: 6 input channels (CT + 5 masks), 1 dose channel.
    pub fn cdpm_default() -> Self {
        Self {
            levels: 5,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4, 4],
            groupnorm_groups: 8,
            attention_heads: 1,
            in_channels: 6,
            out_channels: 1,
            time_embedding_dim: None,
        }
    }

    /// Subband denoiser defaults: state (3) + Ŷ_high (3) + pooled X (6) in, 3 out.
    pub fn hfrm_default() -> Self {
        Self {
            in_channels: 12,
            out_channels: 3,
            time_embedding_dim: Some(128),
            ..Self::cdpm_default()
        }
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FddmError::Config(m));
        if self.levels < 2 {
            return fail(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.channel_multipliers.len() != self.levels {
            return fail(format!(
                "expected {} channel multipliers, got {}",
                self.levels,
                self.channel_multipliers.len()
            ));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("in/out channel counts must be positive".into());
        }
        if self.groupnorm_groups == 0 || self.attention_heads == 0 {
            return fail("group and head counts must be positive".into());
        }
        for c in self.level_channels() {
            if c % self.groupnorm_groups != 0 {
                return fail(format!(
                    "channel width {c} is not divisible by {} groups",
                    self.groupnorm_groups
                ));
            }
            if c % self.attention_heads != 0 {
                return fail(format!(
                    "channel width {c} is not divisible by {} heads",
                    self.attention_heads
                ));
            }
        }
        if let Some(d) = self.time_embedding_dim {
            if d < 2 || d % 2 != 0 {
                return fail(format!("time embedding dim must be even and >= 2, got {d}"));
            }
        }
        Ok(())
    }

    /// Spatial sizes must survive `levels - 1` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(FddmError::Dimension(format!(
                "input {h}x{w} is not divisible by 2^{} = {f}",
                self.levels - 1
            )));
        }
        Ok(())
    }
}

/// Where a denoiser level draws its coarse-model feature from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub source_level: usize,
    pub pool_steps: usize,
}

/// Denoiser level `i` runs at half the coarse model's resolution, so it pairs
/// with coarse level `i + 1`. Past the coarse model's deepest level the
/// deepest feature is average-pooled down to size.
pub fn conditioning_alignment(denoiser: &NetworkConfig, coarse: &NetworkConfig) -> Vec<Alignment> {
    (0..denoiser.levels)
        .map(|i| {
            let source_level = (i + 1).min(coarse.levels - 1);
            Alignment {
                source_level,
                pool_steps: i + 1 - source_level,
            }
        })
        .collect()
}

/// Architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub arch: UNet,
    pub params: ParamStore<T>,
    alignment: Vec<Alignment>,
}

impl<T: Scalar> Model<T> {
    fn build(cfg: &NetworkConfig, coarse: Option<&NetworkConfig>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let alignment = match coarse {
            Some(c) => {
                c.validate()?;
                conditioning_alignment(cfg, c)
            }
            None => Vec::new(),
        };
        let specs: Vec<Option<PortSpec>> = match coarse {
            Some(c) => {
                let chans = c.level_channels();
                alignment
                    .iter()
                    .map(|a| {
                        Some(PortSpec {
                            source_channels: chans[a.source_level],
                            pool_steps: a.pool_steps,
                        })
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = UNet::build(cfg, &specs, &mut params, &mut rng);
        Ok(Self { arch, params, alignment })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.arch.config()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn is_feature_conditioned(&self) -> bool {
        !self.alignment.is_empty()
    }

    pub fn alignment(&self) -> &[Alignment] {
        &self.alignment
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            alignment: self.alignment.clone(),
        }
    }

    fn check_input_tensor(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config().in_channels {
            return Err(FddmError::Dimension(format!(
                "{what}: expected [N, {}, H, W], got {shape:?}",
                self.config().in_channels
            )));
        }
        self.config().check_input(shape[2], shape[3])
    }

    /// Tape-level forward. `features` are the raw coarse-model encoder
    /// features; pooling and projection happen here.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ts: Option<&[usize]>,
        features: &[Var],
    ) -> Result<UNetOutput> {
        self.check_input_tensor(g.shape(x), "network input")?;
        if self.config().time_embedding_dim.is_some() != ts.is_some() {
            return Err(FddmError::Contract(
                "timestep must be supplied exactly when the network has a time embedding".into(),
            ));
        }
        let cond = if self.is_feature_conditioned() {
            self.align_features(g, x, features)?
        } else {
            Vec::new()
        };
        Ok(self.arch.forward(g, &self.params, x, ts, &cond))
    }

    fn align_features(&self, g: &mut Graph<T>, x: Var, features: &[Var]) -> Result<Vec<Option<Var>>> {
        let xs = g.shape(x).to_vec();
        let mut out = Vec::with_capacity(self.alignment.len());
        for (i, a) in self.alignment.iter().enumerate() {
            let Some(&src) = features.get(a.source_level) else {
                return Err(FddmError::Contract(format!(
                    "denoiser level {i} needs coarse feature {}, only {} supplied",
                    a.source_level,
                    features.len()
                )));
            };
            let fs = g.shape(src).to_vec();
            let factor = 1usize << (a.pool_steps + i);
            let (eh, ew) = (xs[2] / (1 << i), xs[3] / (1 << i));
            if fs.len() != 4 || fs[0] != xs[0] || fs[2] != eh * (1 << a.pool_steps) || fs[3] != ew * (1 << a.pool_steps)
            {
                return Err(FddmError::Contract(format!(
                    "coarse feature {} has shape {fs:?}; level {i} expects {eh}x{ew} after {} pool(s) (×{factor} from input)",
                    a.source_level, a.pool_steps
                )));
            }
            let expected_c = self.arch.ports()[i].map(|p| p.source_channels).unwrap_or(0);
            if fs[1] != expected_c {
                return Err(FddmError::Contract(format!(
                    "coarse feature {} has {} channels, port expects {expected_c}",
                    a.source_level, fs[1]
                )));
            }
            let mut v = src;
            for _ in 0..a.pool_steps {
                v = g.avg_pool2x(v);
            }
            out.push(Some(v));
        }
        Ok(out)
    }
}

pub fn build_cdpm<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    if cfg.time_embedding_dim.is_some() {
        return Err(FddmError::Config("the coarse model takes no timestep".into()));
    }
    Model::build(cfg, None, seed)
}

/// Time-conditioned denoiser with feature ports aligned to `coarse`.
pub fn build_hfrm<T: Scalar>(cfg: &NetworkConfig, coarse: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    if cfg.time_embedding_dim.is_none() {
        return Err(FddmError::Config("the denoiser needs a time embedding dim".into()));
    }
    Model::build(cfg, Some(coarse), seed)
}

/// Time-conditioned denoiser without feature ports.
pub fn build_plain_denoiser<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    if cfg.time_embedding_dim.is_none() {
        return Err(FddmError::Config("the denoiser needs a time embedding dim".into()));
    }
    Model::build(cfg, None, seed)
}

pub struct CdpmOutput<T> {
    pub coarse: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

pub fn cdpm_forward<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<CdpmOutput<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = model.forward_graph(&mut g, xv, None, &[])?;
    Ok(CdpmOutput {
        coarse: g.value(out.output).clone(),
        features: out.features.iter().map(|&f| g.value(f).clone()).collect(),
    })
}

/// One coarse-model feature map tagged with its resolution.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub resolution: (usize, usize),
    pub tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        let s = tensor.shape();
        Self {
            resolution: (s[2], s[3]),
            tensor,
        }
    }
}

/// Everything the denoiser conditions on besides x_t and t.
#[derive(Debug, Clone)]
pub struct ConditioningBundle<T> {
    pub image_cond: Tensor<T>,
    pub feature_cond: Vec<FeatureMap<T>>,
}

impl<T: Scalar> ConditioningBundle<T> {
    /// `high` are the coarse high bands at half resolution and `x` the
    /// full-resolution planning stack, which is average-pooled ×2.
    pub fn new(high: &Tensor<T>, x: &Tensor<T>, features: Vec<Tensor<T>>) -> Result<Self> {
        let (hs, xs) = (high.shape(), x.shape());
        if hs.len() != 4 || xs.len() != 4 || hs[0] != xs[0] || xs[2] != 2 * hs[2] || xs[3] != 2 * hs[3] {
            return Err(FddmError::Contract(format!(
                "high bands {hs:?} are not at half the resolution of X {xs:?}"
            )));
        }
        let pooled = kernels::avg_pool2x(x);
        Ok(Self {
            image_cond: Tensor::concat_channels(&[high, &pooled]),
            feature_cond: features.into_iter().map(FeatureMap::new).collect(),
        })
    }

    /// Same shapes, all values zero.
    pub fn zeroed(&self) -> Self {
        Self {
            image_cond: Tensor::zeros(self.image_cond.shape()),
            feature_cond: self
                .feature_cond
                .iter()
                .map(|f| FeatureMap::new(Tensor::zeros(f.tensor.shape())))
                .collect(),
        }
    }

    pub fn batch_item(&self, index: usize) -> Self {
        Self {
            image_cond: self.image_cond.batch_item(index),
            feature_cond: self
                .feature_cond
                .iter()
                .map(|f| FeatureMap::new(f.tensor.batch_item(index)))
                .collect(),
        }
    }
}

/// Everything produced by one denoiser evaluation.
pub struct DenoiseOutput<T> {
    pub noise: Tensor<T>,
    pub cross_weights: Vec<Tensor<T>>,
}

pub fn hfrm_denoise_detailed<T: Scalar>(
    model: &Model<T>,
    cond: &ConditioningBundle<T>,
    x_t: &Tensor<T>,
    t: usize,
) -> Result<DenoiseOutput<T>> {
    let (xs, cs) = (x_t.shape(), cond.image_cond.shape());
    if xs.len() != 4 || cs.len() != 4 || xs[0] != cs[0] || xs[2..] != cs[2..] {
        return Err(FddmError::Contract(format!(
            "image condition {cs:?} does not match state {xs:?}"
        )));
    }
    for (i, a) in model.alignment().iter().enumerate() {
        if let Some(f) = cond.feature_cond.get(a.source_level) {
            let want = ((xs[2] >> i) << a.pool_steps, (xs[3] >> i) << a.pool_steps);
            if f.resolution != want {
                return Err(FddmError::Contract(format!(
                    "feature {} tagged {:?}, level {i} needs {want:?}",
                    a.source_level, f.resolution
                )));
            }
        }
    }
    let mut g = Graph::new();
    let input = Tensor::concat_channels(&[x_t, &cond.image_cond]);
    let xv = g.input(input);
    let feats: Vec<Var> = cond.feature_cond.iter().map(|f| g.input(f.tensor.clone())).collect();
    let ts = vec![t; xs[0]];
    let out = model.forward_graph(&mut g, xv, Some(&ts), &feats)?;
    Ok(DenoiseOutput {
        noise: g.value(out.output).clone(),
        cross_weights: out.cross_weights.iter().map(|&w| g.value(w).clone()).collect(),
    })
}

pub fn hfrm_denoise<T: Scalar>(
    model: &Model<T>,
    cond: &ConditioningBundle<T>,
    x_t: &Tensor<T>,
    t: usize,
) -> Result<Tensor<T>> {
    let noise = hfrm_denoise_detailed(model, cond, x_t, t)?.noise;
    if noise.shape() != x_t.shape() {
        return Err(FddmError::Contract(format!(
            "denoiser emits {:?} for a state of {:?}",
            noise.shape(),
            x_t.shape()
        )));
    }
    Ok(noise)
}

impl<T: Scalar> Denoiser<T> for Model<T> {
    type Cond = ConditioningBundle<T>;

    fn predict_noise(&self, cond: &Self::Cond, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        hfrm_denoise(self, cond, x_t, t)
    }
}
