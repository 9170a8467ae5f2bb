use rand::Rng;

use crate::autograd::{ConvGeometry, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeometry,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = p.add_uniform(format!("{name}.w"), &[cout, cin, kernel, kernel], fan_in, rng);
        let b = p.add_uniform(format!("{name}.b"), &[cout], fan_in, rng);
        Self {
            w,
            b,
            geom: ConvGeometry {
                kernel,
                stride,
                pad: kernel / 2,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (p.var(g, self.w), p.var(g, self.b));
        g.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    pub fn new<T: Scalar>(p: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: p.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: p.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (gamma, beta) = (p.var(g, self.gamma), p.var(g, self.beta));
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(p: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: p.add_uniform(format!("{name}.w"), &[fout, fin], fin, rng),
            b: p.add_uniform(format!("{name}.b"), &[fout], fin, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (p.var(g, self.w), p.var(g, self.b));
        g.linear(x, w, Some(b))
    }
}

/// 3×3 conv → GroupNorm → Swish.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv,
    norm: Norm,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv::new(p, &format!("{name}.conv"), cin, cout, 3, 1, rng),
            norm: Norm::new(p, &format!("{name}.norm"), cout, groups),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(g, p, x);
        let h = self.norm.forward(g, p, h);
        g.swish(h)
    }
}

/// Two conv blocks with a residual connection; the optional time embedding
/// is added as a per-channel bias between them.
#[derive(Debug, Clone)]
pub struct ResBlock {
    block1: ConvBlock,
    block2: ConvBlock,
    time: Option<Linear>,
    skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        time_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let block1 = ConvBlock::new(p, &format!("{name}.block1"), cin, cout, groups, rng);
        let time = time_dim.map(|d| Linear::new(p, &format!("{name}.time"), d, cout, rng));
        let block2 = ConvBlock::new(p, &format!("{name}.block2"), cout, cout, groups, rng);
        let skip = (cin != cout).then(|| Conv::new(p, &format!("{name}.skip"), cin, cout, 1, 1, rng));
        Self {
            block1,
            block2,
            time,
            skip,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        temb: Option<Var>,
    ) -> Var {
        let mut h = self.block1.forward(g, p, x);
        if let (Some(lin), Some(temb)) = (&self.time, temb) {
            let act = g.swish(temb);
            let bias = lin.forward(g, p, act);
            h = g.add_channel_bias(h, bias);
        }
        let h = self.block2.forward(g, p, h);
        let shortcut = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(h, shortcut)
    }
}

/// Multi-head dot-product attention over spatial positions. Keys and values
/// come from `context` when given (cross-attention), otherwise from `x`.
#[derive(Debug, Clone)]
pub struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
    heads: usize,
    channels: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm: Norm::new(p, &format!("{name}.norm"), channels, groups),
            q: Conv::new(p, &format!("{name}.q"), channels, channels, 1, 1, rng),
            k: Conv::new(p, &format!("{name}.k"), channels, channels, 1, 1, rng),
            v: Conv::new(p, &format!("{name}.v"), channels, channels, 1, 1, rng),
            out: Conv::new(p, &format!("{name}.out"), channels, channels, 1, 1, rng),
            heads,
            channels,
        }
    }

    /// Returns the residual output and the `[N·heads, Lq, Lk]` attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
    ) -> (Var, Var) {
        let xs = g.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        debug_assert_eq!(c, self.channels);
        let hn = self.norm.forward(g, p, x);
        let src = context.unwrap_or(hn);
        let ss = g.shape(src).to_vec();
        let lk = ss[2] * ss[3];
        let dh = c / self.heads;
        let q = self.q.forward(g, p, hn);
        let k = self.k.forward(g, p, src);
        let v = self.v.forward(g, p, src);
        let q = g.reshape(q, &[n * self.heads, dh, h * w]);
        let k = g.reshape(k, &[n * self.heads, dh, lk]);
        let v = g.reshape(v, &[n * self.heads, dh, lk]);
        let scores = g.matmul(q, true, k, false);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_last(scores);
        let mixed = g.matmul(v, false, weights, true);
        let mixed = g.reshape(mixed, &[n, c, h, w]);
        let proj = self.out.forward(g, p, mixed);
        (g.add(x, proj), weights)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
    ) -> Var {
        self.forward_with_weights(g, p, x, context).0
    }
}

/// Sinusoidal timestep features `[sin(t·f_i), cos(t·f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); ts.len() * dim];
    for (row, &t) in data.chunks_mut(dim).zip(ts) {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = T::from_f64((t as f64 * f).sin());
            row[half + i] = T::from_f64((t as f64 * f).cos());
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Sinusoidal features → Linear → Swish → Linear.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Scalar>(p: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            fc1: Linear::new(p, &format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(p, &format!("{name}.fc2"), dim, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ts: &[usize]) -> Var {
        let feats = g.input(timestep_features(ts, self.dim));
        let h = self.fc1.forward(g, p, feats);
        let h = g.swish(h);
        self.fc2.forward(g, p, h)
    }
}
