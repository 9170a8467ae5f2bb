use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{derived_rng, input_tensor, target_tensor, Models, PipelineMode, RunConfig, HIGH_BANDS, RNG_EPOCH_ORDER, RNG_TRAIN_STEP};
use crate::autograd::{kernels, Adam, AdamConfig, Graph, Var};
use crate::diffusion::{q_sample_per_item, standard_normal, LossNorm};
use crate::error::{FddmError, Result};
use crate::networks::{save_checkpoint, Checkpoint, Model, NetworkEntry};
use crate::phantom::PlanningSample;

pub const LOSS_LOG_HEADER: &str = "step,epoch,l_cdpm,l_hfrm,l_total";

/// Losses of one optimizer step. `l_hfrm` holds the second network's loss
/// whatever its role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub l_cdpm: f64,
    pub l_hfrm: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.l_cdpm, self.l_hfrm, self.l_total)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Loss CSV, appended to so resumed runs continue the same log.
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Where a diagnostic dump goes when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

pub struct Trainer {
    pub run: RunConfig,
    pub models: Models,
    opt_cdpm: Option<Adam<f32>>,
    opt_denoiser: Option<Adam<f32>>,
    pub step: u64,
    pub epoch: usize,
}

struct StepLosses {
    cdpm: Option<Var>,
    second: Option<Var>,
}

impl Trainer {
    pub fn new(run: RunConfig, mode: PipelineMode) -> Result<Self> {
        let models = Models::build(&run, mode)?;
        let adam = AdamConfig {
            lr: run.train.learning_rate,
            ..AdamConfig::default()
        };
        Ok(Self {
            opt_cdpm: models.cdpm.as_ref().map(|m| Adam::new(adam, &m.params)),
            opt_denoiser: models.denoiser.as_ref().map(|m| Adam::new(adam, &m.params)),
            run,
            models,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (models, run) = Models::from_checkpoint(ck)?;
        let mut t = Self::new(run, models.mode)?;
        t.models = models;
        let roles = [("cdpm", &mut t.opt_cdpm), (t.models.mode.denoiser_role().unwrap_or(""), &mut t.opt_denoiser)];
        for (role, slot) in roles {
            let Some(opt) = slot else { continue };
            let saved = ck.network(role).and_then(|n| n.optimizer.clone());
            match saved {
                Some(s) if s.first.len() == opt.first.len() => *opt = s,
                Some(_) => return Err(FddmError::Corrupt(format!("`{role}` optimizer state has the wrong size"))),
                None => return Err(FddmError::Corrupt(format!("`{role}` has no optimizer state to resume"))),
            }
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn mode(&self) -> PipelineMode {
        self.models.mode
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut networks = Vec::new();
        let entry = |role: &str, m: &Model<f32>, opt: &Option<Adam<f32>>| NetworkEntry {
            role: role.into(),
            config: m.config().clone(),
            params: m.params.clone(),
            optimizer: opt.clone(),
        };
        if let Some(m) = &self.models.cdpm {
            networks.push(entry("cdpm", m, &self.opt_cdpm));
        }
        if let (Some(m), Some(role)) = (&self.models.denoiser, self.mode().denoiser_role()) {
            networks.push(entry(role, m, &self.opt_denoiser));
        }
        Checkpoint {
            mode: self.mode().letter().into(),
            schedule: self.models.schedule_spec.clone(),
            step: self.step,
            networks,
            extra: serde_json::json!({ "run": self.run }),
        }
    }

    /// One joint step on `l_cdpm + l_hfrm`.
    pub fn train_step(&mut self, batch: &[&PlanningSample]) -> Result<LossReport> {
        self.step_impl(batch, true)
    }

    /// Optimizes the second network's loss alone. With end-to-end training
    /// its gradient still reaches the coarse model through the conditioning.
    pub fn denoiser_step(&mut self, batch: &[&PlanningSample]) -> Result<LossReport> {
        if self.models.denoiser.is_none() {
            return Err(FddmError::Contract(format!("mode {} has no second network", self.mode())));
        }
        self.step_impl(batch, false)
    }

    fn step_impl(&mut self, batch: &[&PlanningSample], include_cdpm: bool) -> Result<LossReport> {
        let x = input_tensor(batch)?;
        let y = target_tensor(batch)?;
        let mut rng = derived_rng(self.run.train.seed, RNG_TRAIN_STEP, self.step);
        let mut g = Graph::<f32>::new();
        let losses = self.build_losses(&mut g, &x, &y, &mut rng)?;

        let value = |v: Option<Var>| v.map(|v| g.value(v).item() as f64);
        let l_cdpm = value(losses.cdpm).unwrap_or(0.0);
        let l_second = value(losses.second).unwrap_or(0.0);
        let objective = match (losses.cdpm.filter(|_| include_cdpm), losses.second) {
            (Some(a), Some(b)) => g.add(a, b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(FddmError::Contract("step has no loss to optimize".into())),
        };
        let l_total = if include_cdpm { l_cdpm + l_second } else { l_second };
        let report = LossReport {
            step: self.step,
            epoch: self.epoch,
            l_cdpm: if include_cdpm { l_cdpm } else { 0.0 },
            l_hfrm: l_second,
            l_total,
        };
        if !l_total.is_finite() || !l_cdpm.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
            return Err(FddmError::Numeric(format!(
                "non-finite loss at step {} (epoch {}): l_cdpm={l_cdpm} l_hfrm={l_second}; batch [{}]",
                self.step,
                self.epoch,
                ids.join(", ")
            )));
        }

        let grads = g.backward(objective);
        if let (Some(m), Some(opt)) = (self.models.cdpm.as_mut(), self.opt_cdpm.as_mut()) {
            let gr = m.params.grads(&g, &grads);
            opt.step(&mut m.params, &gr);
        }
        if let (Some(m), Some(opt)) = (self.models.denoiser.as_mut(), self.opt_denoiser.as_mut()) {
            let gr = m.params.grads(&g, &grads);
            opt.step(&mut m.params, &gr);
        }
        self.step += 1;
        Ok(report)
    }

    fn build_losses(
        &self,
        g: &mut Graph<f32>,
        x: &crate::autograd::Tensor<f32>,
        y: &crate::autograd::Tensor<f32>,
        rng: &mut impl Rng,
    ) -> Result<StepLosses> {
        let mode = self.mode();
        let norm = self.run.train.loss_norm;
        let e2e = self.run.train.end_to_end;
        let scale = self.models.state_scale as f32;
        let n = x.dim(0);
        let xv = g.input(x.clone());
        let mut out = StepLosses { cdpm: None, second: None };

        let mut coarse = None;
        if let Some(cdpm) = &self.models.cdpm {
            let o = cdpm.forward_graph(g, xv, None, &[])?;
            let yv = g.input(y.clone());
            let d = g.sub(o.output, yv);
            out.cdpm = Some(g.mean_abs(d));
            coarse = Some(o);
        }
        let Some(den) = &self.models.denoiser else {
            return Ok(out);
        };

        let coarse_high = |g: &mut Graph<f32>, v: Var| {
            let bands = g.haar(v);
            let high = g.slice_channels(bands, 1, HIGH_BANDS);
            if e2e {
                high
            } else {
                g.detach(high)
            }
        };
        let s = &self.models.schedule;
        let timesteps = |rng: &mut dyn rand::RngCore| -> Vec<usize> {
            (0..n).map(|_| rng.random_range(1..=s.steps())).collect()
        };
        let noise_term = |g: &mut Graph<f32>, pred: Var, eps: Var| {
            let d = g.sub(pred, eps);
            match norm {
                LossNorm::L1 => g.mean_abs(d),
                LossNorm::L2 => g.mean_square(d),
            }
        };

        out.second = Some(match mode {
            PipelineMode::CoarseOnly => unreachable!("mode A has no second network"),
            PipelineMode::DiffusionDirect => {
                let ts = timesteps(rng);
                let eps = standard_normal::<f32>(y.shape(), rng);
                let x0 = y.scale(scale);
                let x_t = q_sample_per_item(&x0, &ts, &eps, s)?;
                let xt = g.input(x_t);
                let input = g.concat_channels(&[xt, xv]);
                let pred = den.forward_graph(g, input, Some(&ts), &[])?;
                let ev = g.input(eps);
                noise_term(g, pred.output, ev)
            }
            PipelineMode::CoarseCnnRefine => {
                let c = coarse.as_ref().expect("mode C has a coarse model");
                let high = coarse_high(g, c.output);
                let pooled = g.avg_pool2x(xv);
                let input = g.concat_channels(&[high, pooled]);
                let pred = den.forward_graph(g, input, None, &[])?;
                let target = kernels::haar_forward(y).slice_channels(1, HIGH_BANDS);
                let tv = g.input(target);
                let d = g.sub(pred.output, tv);
                g.mean_abs(d)
            }
            PipelineMode::Full => {
                let c = coarse.as_ref().expect("mode D has a coarse model");
                // Conditioning bands share the state's units.
                let high = coarse_high(g, c.output);
                let high = g.scale(high, scale as f64);
                let features: Vec<Var> = if e2e {
                    c.features.clone()
                } else {
                    c.features.iter().map(|&f| g.detach(f)).collect()
                };
                let y_high = kernels::haar_forward(y).slice_channels(1, HIGH_BANDS).scale(scale);
                let ts = timesteps(rng);
                let eps = standard_normal::<f32>(y_high.shape(), rng);
                let x_t = q_sample_per_item(&y_high, &ts, &eps, s)?;
                let xt = g.input(x_t);
                let pooled = g.avg_pool2x(xv);
                let input = g.concat_channels(&[xt, high, pooled]);
                let pred = den.forward_graph(g, input, Some(&ts), &features)?;
                let ev = g.input(eps);
                noise_term(g, pred.output, ev)
            }
        });
        Ok(out)
    }

    /// Visiting order of the training set in `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derived_rng(self.run.train.seed, RNG_EPOCH_ORDER, epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Trains until the configured step budget, resuming from `self.step`.
    pub fn fit(
        &mut self,
        train: &[&PlanningSample],
        opts: &FitOptions,
        mut progress: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        if train.is_empty() {
            return Err(FddmError::Dataset("training split is empty".into()));
        }
        let bs = self.run.train.batch_size;
        let per_epoch = train.len().div_ceil(bs);
        let total = self.run.train.total_steps(train.len()) as u64;
        if self.mode().is_diffusion() && self.run.train.state_scale.is_none() {
            let k = super::unit_state_scale(self.mode(), train)?;
            self.run.train.state_scale = Some(k);
            self.models.state_scale = k;
        }
        let mut log = match &opts.log {
            Some(p) => Some(open_log(p)?),
            None => None,
        };
        let every = self.run.train.checkpoint_every as u64;
        let mut reports = Vec::new();
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.step < total {
            self.epoch = (self.step / per_epoch as u64) as usize;
            if order_epoch != self.epoch {
                order = self.epoch_order(train.len(), self.epoch);
                order_epoch = self.epoch;
            }
            let k = (self.step % per_epoch as u64) as usize;
            let batch: Vec<&PlanningSample> = order[k * bs..((k + 1) * bs).min(train.len())]
                .iter()
                .map(|&i| train[i])
                .collect();
            let report = match self.train_step(&batch) {
                Ok(r) => r,
                Err(e @ FddmError::Numeric(_)) => {
                    if let Some(dir) = &opts.dump_dir {
                        self.write_dump(dir, &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((path, f)) = log.as_mut() {
                writeln!(f, "{}", report.csv_row()).map_err(|e| io_err(path, e))?;
            }
            progress(&report);
            reports.push(report);
            if let Some(p) = &opts.checkpoint {
                if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                    save_checkpoint(p, &self.checkpoint())?;
                }
            }
        }
        if let Some(p) = &opts.checkpoint {
            save_checkpoint(p, &self.checkpoint())?;
        }
        Ok(reports)
    }

    fn write_dump(&self, dir: &Path, err: &FddmError) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(format!("nan_step{}.json", self.step));
        let nonfinite = |m: &Option<Model<f32>>| {
            m.as_ref()
                .map(|m| {
                    m.params
                        .iter()
                        .filter(|(_, t)| !t.all_finite())
                        .map(|(n, _)| n.to_string())
                        .collect::<Vec<_>>()
                })
                .unwrap_or_default()
        };
        let dump = serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "error": err.to_string(),
            "nonfinite_cdpm_params": nonfinite(&self.models.cdpm),
            "nonfinite_denoiser_params": nonfinite(&self.models.denoiser),
            "run": self.run,
        });
        let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> FddmError {
    FddmError::io(path, source)
}

fn open_log(path: &Path) -> Result<(PathBuf, fs::File)> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    if fresh {
        writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| io_err(path, e))?;
    }
    Ok((path.to_path_buf(), f))
}
