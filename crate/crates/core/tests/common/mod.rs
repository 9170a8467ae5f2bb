#![allow(dead_code)]

use fddm_core::autograd::{Graph, ParamId, Tensor, Var};
use fddm_core::diffusion::{make_schedule, q_sample, standard_normal, ScheduleKind};
use fddm_core::networks::{build_cdpm, build_hfrm, Model, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_cdpm() -> NetworkConfig {
    NetworkConfig {
        levels: 3,
        base_channels: 2,
        channel_multipliers: vec![1, 2, 2],
        groupnorm_groups: 2,
        attention_heads: 1,
        in_channels: 6,
        out_channels: 1,
        time_embedding_dim: None,
    }
}

pub fn micro_hfrm() -> NetworkConfig {
    NetworkConfig {
        in_channels: 12,
        out_channels: 3,
        time_embedding_dim: Some(4),
        ..micro_cdpm()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(shape, &mut rng)
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseNorm {
    L1,
    L2,
}

/// A small joint problem: the coarse model regresses a target dose and the
/// denoiser predicts the noise of a band stack, conditioned on the coarse
/// model's high bands and encoder features.
pub struct JointProblem {
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
    pub x_t: Tensor<f64>,
    pub eps: Tensor<f64>,
    pub t: usize,
    pub norm: NoiseNorm,
    pub coarse_weight: f64,
    pub noise_weight: f64,
}

impl JointProblem {
    pub fn new(size: usize, norm: NoiseNorm, seed: u64) -> Self {
        let s = make_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let x0 = random_tensor(&[1, 3, size / 2, size / 2], seed + 2);
        let eps = random_tensor(&[1, 3, size / 2, size / 2], seed + 3);
        let t = 7;
        Self {
            x: random_tensor(&[1, 6, size, size], seed),
            target: random_tensor(&[1, 1, size, size], seed + 1),
            x_t: q_sample(&x0, t, &eps, &s).unwrap(),
            eps,
            t,
            norm,
            coarse_weight: 1.0,
            noise_weight: 1.0,
        }
    }

    pub fn loss(&self, g: &mut Graph<f64>, models: &[Model<f64>]) -> Var {
        let (cdpm, hfrm) = (&models[0], &models[1]);
        let x = g.input(self.x.clone());
        let out = cdpm.forward_graph(g, x, None, &[]).unwrap();
        let target = g.input(self.target.clone());
        let diff = g.sub(out.output, target);
        let coarse = g.mean_abs(diff);

        let bands = g.haar(out.output);
        let high = g.slice_channels(bands, 1, 3);
        let pooled = g.avg_pool2x(x);
        let x_t = g.input(self.x_t.clone());
        let input = g.concat_channels(&[x_t, high, pooled]);
        let pred = hfrm
            .forward_graph(g, input, Some(&[self.t]), &out.features)
            .unwrap();
        let eps = g.input(self.eps.clone());
        let diff = g.sub(pred.output, eps);
        let noise = match self.norm {
            NoiseNorm::L1 => g.mean_abs(diff),
            NoiseNorm::L2 => g.mean_square(diff),
        };
        let a = g.scale(coarse, self.coarse_weight);
        let b = g.scale(noise, self.noise_weight);
        g.add(a, b)
    }
}

pub fn micro_models(seed: u64) -> Vec<Model<f64>> {
    vec![
        build_cdpm(&micro_cdpm(), seed).unwrap(),
        build_hfrm(&micro_hfrm(), &micro_cdpm(), seed + 100).unwrap(),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Central finite differences on `samples` randomly chosen scalars drawn from
/// every model in `models`.
pub fn grad_check(
    models: &mut [Model<f64>],
    loss: impl Fn(&mut Graph<f64>, &[Model<f64>]) -> Var,
    samples: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let l = loss(&mut g, models);
    let grads = g.backward(l);
    let analytic: Vec<Vec<Option<Tensor<f64>>>> = models.iter().map(|m| m.params.grads(&g, &grads)).collect();
    drop(g);

    let mut slots = Vec::new();
    for (m, model) in models.iter().enumerate() {
        for (i, t) in model.params.tensors().iter().enumerate() {
            for j in 0..t.len() {
                slots.push((m, i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |models: &[Model<f64>]| {
        let mut g = Graph::new();
        let l = loss(&mut g, models);
        g.value(l).item()
    };
    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    for _ in 0..samples {
        let (m, i, j) = slots[rng.random_range(0..slots.len())];
        let orig = models[m].params.get(ParamId(i)).data()[j];
        models[m].params.get_mut(ParamId(i)).data_mut()[j] = orig + step;
        let up = eval(models);
        models[m].params.get_mut(ParamId(i)).data_mut()[j] = orig - step;
        let down = eval(models);
        models[m].params.get_mut(ParamId(i)).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[m][i].as_ref().map_or(0.0, |t| t.data()[j]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        out.checked += 1;
        if rel <= tol {
            out.passed += 1;
        }
        out.worst = out.worst.max(rel);
    }
    out
}

pub mod oracles;
