use rand::Rng;

use super::layers::{Attention, Conv, Norm, ResBlock, TimeEmbedding};
use super::NetworkConfig;
use crate::autograd::{Graph, ParamStore, Scalar, Var};

/// How a denoiser encoder level consumes the aligned coarse-model feature.
#[derive(Debug, Clone)]
pub enum ConditionPort {
    Add { proj: Conv },
    CrossAttention { proj: Conv, attn: Attention },
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    res: ResBlock,
    port: Option<ConditionPort>,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    res1: ResBlock,
    res2: ResBlock,
    up: Option<Conv>,
}

/// Per-level specification of feature conditioning: source channel count and
/// how many ×2 average pools bring it to this level's resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortSpec {
    pub source_channels: usize,
    pub pool_steps: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: NetworkConfig,
    stem: Conv,
    encoder: Vec<EncoderLevel>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    decoder: Vec<DecoderLevel>,
    head_norm: Norm,
    head: Conv,
    time: Option<TimeEmbedding>,
    ports: Vec<Option<PortSpec>>,
}

/// Result of one forward pass on a tape.
pub struct UNetOutput {
    pub output: Var,
    pub features: Vec<Var>,
    /// Attention weights for every cross-attention port, in level order.
    pub cross_weights: Vec<Var>,
}

/// Encoder levels at or beyond this index use cross-attention instead of addition.
pub const FIRST_CROSS_ATTENTION_LEVEL: usize = 2;

impl UNet {
    pub(crate) fn build<T: Scalar>(
        cfg: &NetworkConfig,
        ports: &[Option<PortSpec>],
        p: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let chans = cfg.level_channels();
        let groups = cfg.groupnorm_groups;
        let tdim = cfg.time_embedding_dim;
        let time = tdim.map(|d| TimeEmbedding::new(p, "time", d, rng));
        let stem = Conv::new(p, "stem", cfg.in_channels, chans[0], 3, 1, rng);

        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut prev = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            let res = ResBlock::new(p, &format!("enc.{i}.res"), prev, c, groups, tdim, rng);
            let port = ports.get(i).copied().flatten().map(|spec| {
                let proj = Conv::new(p, &format!("enc.{i}.port.proj"), spec.source_channels, c, 1, 1, rng);
                if i < FIRST_CROSS_ATTENTION_LEVEL {
                    ConditionPort::Add { proj }
                } else {
                    let attn = Attention::new(p, &format!("enc.{i}.port.attn"), c, groups, cfg.attention_heads, rng);
                    ConditionPort::CrossAttention { proj, attn }
                }
            });
            let down = (i + 1 < cfg.levels).then(|| Conv::new(p, &format!("enc.{i}.down"), c, c, 3, 2, rng));
            encoder.push(EncoderLevel { res, port, down });
            prev = c;
        }

        let deep = *chans.last().expect("levels >= 2");
        let mid1 = ResBlock::new(p, "mid.res1", deep, deep, groups, tdim, rng);
        let mid_attn = Attention::new(p, "mid.attn", deep, groups, cfg.attention_heads, rng);
        let mid2 = ResBlock::new(p, "mid.res2", deep, deep, groups, tdim, rng);

        let mut decoder = Vec::with_capacity(cfg.levels);
        for i in (0..cfg.levels).rev() {
            let c = chans[i];
            let res1 = ResBlock::new(p, &format!("dec.{i}.res1"), 2 * c, c, groups, tdim, rng);
            let res2 = ResBlock::new(p, &format!("dec.{i}.res2"), c, c, groups, tdim, rng);
            let up = (i > 0).then(|| Conv::new(p, &format!("dec.{i}.up"), c, chans[i - 1], 1, 1, rng));
            decoder.push(DecoderLevel { res1, res2, up });
        }

        let head_norm = Norm::new(p, "head.norm", chans[0], groups);
        let head = Conv::new(p, "head.conv", chans[0], cfg.out_channels, 3, 1, rng);
        Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            mid1,
            mid_attn,
            mid2,
            decoder,
            head_norm,
            head,
            time,
            ports: ports.to_vec(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn ports(&self) -> &[Option<PortSpec>] {
        &self.ports
    }

    pub fn port_count(&self) -> usize {
        self.ports.iter().filter(|p| p.is_some()).count()
    }

    /// `cond[i]` must be the already-pooled source feature for level `i` when
    /// that level has a port. Callers validate shapes before reaching here.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        ts: Option<&[usize]>,
        cond: &[Option<Var>],
    ) -> UNetOutput {
        let temb = match (&self.time, ts) {
            (Some(te), Some(ts)) => Some(te.forward(g, p, ts)),
            _ => None,
        };
        let mut h = self.stem.forward(g, p, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cross_weights = Vec::new();
        for (i, level) in self.encoder.iter().enumerate() {
            h = level.res.forward(g, p, h, temb);
            if let (Some(port), Some(Some(src))) = (&level.port, cond.get(i)) {
                match port {
                    ConditionPort::Add { proj } => {
                        let f = proj.forward(g, p, *src);
                        h = g.add(h, f);
                    }
                    ConditionPort::CrossAttention { proj, attn } => {
                        let f = proj.forward(g, p, *src);
                        let (out, w) = attn.forward_with_weights(g, p, h, Some(f));
                        h = out;
                        cross_weights.push(w);
                    }
                }
            }
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.forward(g, p, h);
            }
        }
        h = self.mid1.forward(g, p, h, temb);
        h = self.mid_attn.forward(g, p, h, None);
        h = self.mid2.forward(g, p, h, temb);
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = g.concat_channels(&[h, *skip]);
            h = level.res1.forward(g, p, h, temb);
            h = level.res2.forward(g, p, h, temb);
            if let Some(up) = &level.up {
                h = g.upsample2x(h);
                h = up.forward(g, p, h);
            }
        }
        h = self.head_norm.forward(g, p, h);
        h = g.swish(h);
        let output = self.head.forward(g, p, h);
        UNetOutput {
            output,
            features: skips,
            cross_weights,
        }
    }
}
