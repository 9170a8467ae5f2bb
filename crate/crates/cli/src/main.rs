mod predictions;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fddm_core::metrics::{delta_report, dvh};
use fddm_core::networks::load_checkpoint;
use fddm_core::phantom::{generate_dataset, read_dataset, split_dataset, write_dataset, PhantomConfig, Split, Structure};
use fddm_core::pipeline::{benchmark_step_cost, predict, FitOptions, Models, PipelineMode, RunConfig, Trainer};
use fddm_core::{FddmError, Result};

use predictions::{PredictedCase, PredictionManifest};

const SEED_ENV: &str = "FDDM_SEED";

#[derive(Parser)]
#[command(name = "fddm", version, about = "Coarse-to-fine dose prediction with subband diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenData),
    /// Train the networks of one mode.
    Train(Train),
    /// Predict doses for one split of a dataset.
    Predict(Predict),
    /// Compare predictions against ground truth.
    Evaluate(Evaluate),
    /// Write DVH curves for one case as SVG and CSV.
    PlotDvh(PlotDvh),
    /// Time image-domain against wavelet-domain denoiser steps.
    Bench(Bench),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Train, val and test proportions.
    #[arg(long, default_value = "0.75,0.125,0.125")]
    split_ratios: String,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: PipelineMode,
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many steps (0 silences it).
    #[arg(long, default_value_t = 50)]
    progress_every: u64,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Summary CSV; per-case rows go next to it as `<stem>_cases.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotDvh {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated structure names.
    #[arg(long, default_value = "PTV,ST,FHL,FHR,BLD")]
    structures: String,
    /// Case id; defaults to the first predicted case.
    #[arg(long)]
    case: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    bin_width: f64,
    /// SVG path; the CSV goes next to it with a `.csv` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bench {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "160x160", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Denoiser evaluations in the total-sampling column; defaults to T / stride.
    #[arg(long)]
    sampling_steps: Option<usize>,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let bad = || format!("size must look like HxW, got `{s}`");
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| FddmError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
    }
}

/// Flag first, then the environment, then whatever the config says.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(config),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| FddmError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FddmError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| FddmError::io(path, e))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read_text(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PhantomConfig::parse(&read_text(p)?)?,
        None => PhantomConfig::default(),
    };
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let r: Vec<f64> = a
        .split_ratios
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| FddmError::Config(format!("split ratios `{}` are not numbers", a.split_ratios)))?;
    let [tr, va, te] = r[..] else {
        return Err(FddmError::Config("split ratios need three values".into()));
    };
    let samples = generate_dataset(&cfg, a.count)?;
    let splits = split_dataset(a.count, (tr, va, te), cfg.seed)?;
    write_dataset(&samples, &splits.labels, &a.out)?;
    eprintln!(
        "wrote {} slices to {} (train {}, val {}, test {})",
        a.count,
        a.out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let train_set = data.subset(Split::Train);
    let mut trainer = if a.resume {
        let ck = load_checkpoint(&a.out)?;
        let mut t = Trainer::from_checkpoint(&ck)?;
        if t.mode() != a.mode {
            return Err(FddmError::Config(format!(
                "checkpoint was trained in mode {}, not {}",
                t.mode(),
                a.mode
            )));
        }
        if let Some(p) = &a.config {
            let mut want = run_config(Some(p))?;
            want.train.seed = resolve_seed(a.seed, want.train.seed)?;
            let budget = (want.train.epochs, want.train.steps, want.train.checkpoint_every);
            want.train.epochs = t.run.train.epochs;
            want.train.steps = t.run.train.steps;
            want.train.checkpoint_every = t.run.train.checkpoint_every;
            // An unset scale was derived by the first run; keep it.
            if want.train.state_scale.is_none() {
                want.train.state_scale = t.run.train.state_scale;
            }
            if want != t.run {
                return Err(FddmError::Config(
                    "config differs from the checkpoint in more than the step budget".into(),
                ));
            }
            (t.run.train.epochs, t.run.train.steps, t.run.train.checkpoint_every) = budget;
        }
        t
    } else {
        let mut run = run_config(a.config.as_deref())?;
        run.train.seed = resolve_seed(a.seed, run.train.seed)?;
        Trainer::new(run, a.mode)?
    };
    let log = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FddmError::io(dir, e))?;
    }
    let opts = FitOptions {
        log: Some(log),
        checkpoint: Some(a.out.clone()),
        dump_dir: a.out.parent().map(Path::to_path_buf),
    };
    let total = trainer.run.train.total_steps(train_set.len());
    let every = a.progress_every;
    let reports = trainer.fit(&train_set, &opts, |r| {
        if every > 0 && (r.step + 1) % every == 0 {
            eprintln!(
                "step {}/{total} epoch {} l_cdpm {:.5} l_hfrm {:.5} l_total {:.5}",
                r.step + 1,
                r.epoch,
                r.l_cdpm,
                r.l_hfrm,
                r.l_total
            );
        }
    })?;
    eprintln!("trained {} steps; checkpoint at {}", reports.len(), a.out.display());
    Ok(())
}

fn predict_cmd(a: Predict) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (models, run) = Models::from_checkpoint(&ck)?;
    let data = read_dataset(&a.data)?;
    let split = Split::parse(&a.split).ok_or_else(|| FddmError::Config(format!("unknown split `{}`", a.split)))?;
    let stride = match (models.mode.is_diffusion(), a.stride) {
        (true, s) => s.unwrap_or(1),
        (false, Some(s)) => {
            eprintln!("warning: mode {} does not sample; ignoring --stride {s}", models.mode);
            1
        }
        (false, None) => 1,
    };
    if models.mode.is_diffusion() && (stride == 0 || run.train.timesteps % stride != 0) {
        return Err(FddmError::Config(format!(
            "stride {stride} must divide the {} training timesteps",
            run.train.timesteps
        )));
    }
    let seed = resolve_seed(a.seed, run.train.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| FddmError::io(&a.out, e))?;
    let mut cases: Vec<PredictedCase> = Vec::new();
    for s in data.subset(split) {
        let p = predict(&models, s, stride, seed)?;
        cases.push(predictions::write_case(&a.out, &s.id, &p.dose)?);
    }
    predictions::write_manifest(
        &a.out,
        &PredictionManifest {
            schema_version: predictions::SCHEMA,
            mode: models.mode.letter().into(),
            seed,
            stride,
            split: split.name().into(),
            checkpoint_step: ck.step,
            cases,
        },
    )?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn evaluate(a: Evaluate) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let (pred, gt) = predictions::load_pairs(&a.pred, &data)?;
    let report = delta_report(&pred, &gt, &Structure::ALL)?;
    write_text(&a.out, &report.summary_csv())?;
    write_text(&sibling(&a.out, "_cases", "csv"), &report.cases_csv())?;
    Ok(())
}

fn plot_dvh(a: PlotDvh) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let (pred, gt) = predictions::load_pairs(&a.pred, &data)?;
    let index = match &a.case {
        None if pred.is_empty() => return Err(FddmError::Dataset("prediction set is empty".into())),
        None => 0,
        Some(id) => pred
            .iter()
            .position(|c| &c.id == id)
            .ok_or_else(|| FddmError::Unpaired(format!("no prediction for case {id}")))?,
    };
    let (p, g) = (&pred[index], &gt[index]);
    let structures: Vec<Structure> = a
        .structures
        .split(',')
        .map(|n| Structure::parse(n.trim()).ok_or_else(|| FddmError::Config(format!("unknown structure `{}`", n.trim()))))
        .collect::<Result<_>>()?;
    let max = p.dose.iter().chain(&g.dose).fold(0.0f64, |m, &v| m.max(v));
    let mut curves = Vec::new();
    let mut csv = String::from("structure,source,dose_gy,volume_fraction\n");
    for &s in &structures {
        let mask = &g.masks[&s];
        let truth = dvh(&g.dose, mask, a.bin_width, max)?;
        let prediction = dvh(&p.dose, mask, a.bin_width, max)?;
        for (source, c) in [("truth", &truth), ("prediction", &prediction)] {
            for (d, v) in c.dose_bins.iter().zip(&c.volume_fraction) {
                csv.push_str(&format!("{},{source},{d},{v}\n", s.name()));
            }
        }
        curves.push((s, truth, prediction));
    }
    let pairs: Vec<svg::CurvePair> = curves
        .iter()
        .map(|(s, t, p)| svg::CurvePair {
            label: s.name(),
            truth: t,
            prediction: p,
        })
        .collect();
    write_text(&a.out, &svg::dvh_svg(&format!("DVH {}", p.id), &pairs, max))?;
    write_text(&a.out.with_extension("csv"), &csv)?;
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let run = run_config(a.config.as_deref())?;
    let steps = a
        .sampling_steps
        .unwrap_or(run.train.timesteps / run.train.sample_stride.max(1));
    let report = benchmark_step_cost(&run, a.size, a.trials, steps)?;
    let csv = report.csv();
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "image {:.3} ms/step, wavelet {:.3} ms/step, speedup {:.2}x",
        report.rows[0].median_step_ms, report.rows[1].median_step_ms, report.speedup
    );
    Ok(())
}

/// Error code slug and process exit status.
fn classify(e: &FddmError) -> (&'static str, u8) {
    match e {
        FddmError::Config(_) => ("config", 1),
        FddmError::Parameter(_) => ("parameter", 1),
        FddmError::Dimension(_) => ("dimension", 1),
        FddmError::Contract(_) => ("contract", 1),
        FddmError::Generation(_) => ("generation", 1),
        FddmError::EmptyMask(_) => ("empty-mask", 1),
        FddmError::Io { .. } => ("io", 2),
        FddmError::Version { .. } => ("version", 2),
        FddmError::Corrupt(_) => ("corrupt", 2),
        FddmError::Checksum { .. } => ("checksum", 2),
        FddmError::Dataset(_) => ("dataset", 2),
        FddmError::Unpaired(_) => ("unpaired", 2),
        FddmError::Numeric(_) => ("numeric", 3),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::PlotDvh(a) => plot_dvh(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, status) = classify(&e);
            eprintln!("error[{code}]: {}", one_line(&e.to_string()));
            ExitCode::from(status)
        }
    }
}
