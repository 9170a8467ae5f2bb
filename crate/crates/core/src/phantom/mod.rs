//! Synthetic pelvic planning slices: CT, structure masks and an additive
//! multi-beam dose with hard, penumbra-blurred field edges.

mod dataset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FddmError, Result};
use crate::wavelet::Grid2D;

pub use dataset::{read_array, read_dataset, write_array, write_dataset, Dataset, ARRAY_MAGIC, MANIFEST_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    Ptv,
    St,
    Fhl,
    Fhr,
    Bld,
}

impl Structure {
    pub const ALL: [Structure; 5] = [Self::Ptv, Self::St, Self::Fhl, Self::Fhr, Self::Bld];
    pub const OARS: [Structure; 4] = [Self::St, Self::Fhl, Self::Fhr, Self::Bld];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ptv => "PTV",
            Self::St => "ST",
            Self::Fhl => "FHL",
            Self::Fhr => "FHR",
            Self::Bld => "BLD",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name().eq_ignore_ascii_case(s))
    }
}

/// HU window mapped onto [0, 1] for the CT channel.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 1000.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    /// Levels of the network the slices feed; the size must survive their halvings.
    pub network_levels: usize,
    pub beams: usize,
    pub prescription_min: f64,
    pub prescription_max: f64,
    /// Gaussian sigma of the lateral field edge, in voxels.
    pub penumbra: f64,
    /// Linear attenuation per voxel of depth.
    pub attenuation: f64,
    /// Scale on all organ placement and size jitter.
    pub jitter: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            network_levels: 5,
            beams: 7,
            prescription_min: 45.0,
            prescription_max: 55.0,
            penumbra: 1.0,
            attenuation: 0.02,
            jitter: 1.0,
            max_retries: 64,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// `key = value` overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = crate::config::KeyValues::parse(text)?;
        let mut c = Self::default();
        kv.take_into("size", &mut c.size)?;
        kv.take_into("network_levels", &mut c.network_levels)?;
        kv.take_into("beams", &mut c.beams)?;
        kv.take_into("prescription_min", &mut c.prescription_min)?;
        kv.take_into("prescription_max", &mut c.prescription_max)?;
        kv.take_into("penumbra", &mut c.penumbra)?;
        kv.take_into("attenuation", &mut c.attenuation)?;
        kv.take_into("jitter", &mut c.jitter)?;
        kv.take_into("max_retries", &mut c.max_retries)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FddmError::Config(m));
        let f = 1usize << self.network_levels.saturating_sub(1);
        if self.size < 8 || !self.size.is_multiple_of(2) || !self.size.is_multiple_of(f) {
            return fail(format!("slice size {} must be even, >= 8 and divisible by {f}", self.size));
        }
        if self.beams == 0 {
            return fail("beam count must be positive".into());
        }
        if !(self.prescription_min > 0.0 && self.prescription_max >= self.prescription_min)
            || !self.prescription_max.is_finite()
        {
            return fail(format!(
                "prescription range [{}, {}] is invalid",
                self.prescription_min, self.prescription_max
            ));
        }
        for (name, v) in [("penumbra", self.penumbra), ("attenuation", self.attenuation)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("jitter must be non-negative, got {}", self.jitter));
        }
        if self.max_retries == 0 {
            return fail("max_retries must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningSample {
    pub id: String,
    pub seed: u64,
    pub index: usize,
    pub ct: Grid2D,
    /// Indexed by [`Structure::index`].
    pub masks: [Grid2D; 5],
    pub dose: Grid2D,
    pub prescription: f64,
}

impl PlanningSample {
    pub fn mask(&self, s: Structure) -> &Grid2D {
        &self.masks[s.index()]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ct.dims()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let x = c * du + s * dv;
        let y = -s * du + c * dv;
        (x / self.a).powi(2) + (y / self.b).powi(2) <= 1.0
    }
}

struct Geometry {
    body: Ellipse,
    organs: [Ellipse; 5],
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn rasterize(e: &Ellipse, n: usize) -> Grid2D {
    Grid2D::from_fn(n, n, |y, x| if e.contains(coord(x, n), coord(y, n)) { 1.0 } else { 0.0 })
}

fn draw_geometry(rng: &mut impl Rng, jitter: f64) -> Geometry {
    let mut j = |r: f64| if jitter > 0.0 { rng.random_range(-r..=r) * jitter } else { 0.0 };
    let body = Ellipse {
        cx: j(0.03),
        cy: j(0.03),
        a: 0.88 + j(0.04),
        b: 0.68 + j(0.04),
        angle: 0.0,
    };
    let ptv = Ellipse {
        cx: j(0.12),
        cy: 0.02 + j(0.1),
        a: 0.21 + j(0.05),
        b: 0.165 + j(0.035),
        angle: j(0.5),
    };
    let st = Ellipse {
        cx: j(0.1),
        cy: -0.52 + j(0.04),
        a: 0.3 + j(0.05),
        b: 0.085 + j(0.015),
        angle: j(0.15),
    };
    let r_left = 0.135 + j(0.015);
    let fhl = Ellipse {
        cx: 0.58 + j(0.04),
        cy: 0.1 + j(0.05),
        a: r_left,
        b: r_left,
        angle: 0.0,
    };
    let r_right = 0.135 + j(0.015);
    let fhr = Ellipse {
        cx: -0.58 + j(0.04),
        cy: 0.1 + j(0.05),
        a: r_right,
        b: r_right,
        angle: 0.0,
    };
    let bld = Ellipse {
        cx: j(0.06),
        cy: -0.3 + j(0.05),
        a: 0.17 + j(0.03),
        b: 0.11 + j(0.02),
        angle: j(0.2),
    };
    Geometry {
        body,
        organs: [ptv, st, fhl, fhr, bld],
    }
}

fn overlaps(a: &Grid2D, b: &Grid2D) -> bool {
    a.values().iter().zip(b.values()).any(|(&p, &q)| p > 0.5 && q > 0.5)
}

fn inside(inner: &Grid2D, outer: &Grid2D) -> bool {
    inner.values().iter().zip(outer.values()).all(|(&p, &q)| p < 0.5 || q > 0.5)
}

/// Separable Gaussian blur with zero padding, radius ceil(3σ).
fn gaussian_blur(g: &Grid2D, sigma: f64) -> Grid2D {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = g.dims();
    let pass = |src: &Grid2D, horizontal: bool| {
        Grid2D::from_fn(h, w, |y, x| {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let o = ki as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, x as isize + o)
                } else {
                    (y as isize + o, x as isize)
                };
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += k * src.get(yy as usize, xx as usize);
                }
            }
            acc
        })
    };
    pass(&pass(g, true), false)
}

/// Distance travelled inside `body` by a ray arriving at (u, v) along `d`.
fn depth_in_body(body: &Ellipse, u: f64, v: f64, d: (f64, f64)) -> f64 {
    let (px, py) = ((u - body.cx) / body.a, (v - body.cy) / body.b);
    let (dx, dy) = (-d.0 / body.a, -d.1 / body.b);
    let a = dx * dx + dy * dy;
    let b = 2.0 * (px * dx + py * dy);
    let c = px * px + py * py - 1.0;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    ((-b + disc.sqrt()) / (2.0 * a)).max(0.0)
}

fn quantize(g: &Grid2D) -> Grid2D {
    g.map(|v| v as f32 as f64)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_sample(cfg: &PhantomConfig, index: usize) -> Result<PlanningSample> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = sample_rng(cfg.seed, index);

    let mut accepted = None;
    for _ in 0..cfg.max_retries {
        let geo = draw_geometry(&mut rng, cfg.jitter);
        let body = rasterize(&geo.body, n);
        let masks = geo.organs.map(|e| rasterize(&e, n));
        let ok = masks.iter().all(|m| m.values().iter().any(|&v| v > 0.5) && inside(m, &body))
            && (0..5).all(|i| (i + 1..5).all(|k| !overlaps(&masks[i], &masks[k])));
        if ok {
            accepted = Some((geo, body, masks));
            break;
        }
    }
    let Some((geo, body, masks)) = accepted else {
        return Err(FddmError::Generation(format!(
            "sample {index}: no valid geometry after {} attempts",
            cfg.max_retries
        )));
    };
    let prescription = if cfg.prescription_max > cfg.prescription_min {
        rng.random_range(cfg.prescription_min..cfg.prescription_max)
    } else {
        cfg.prescription_min
    };

    let hu_noise = Normal::new(0.0, 10.0).expect("valid sigma");
    let hu_of = |y: usize, x: usize, rng: &mut ChaCha8Rng| {
        if body.get(y, x) < 0.5 {
            return HU_WINDOW.0;
        }
        let base = if masks[Structure::Fhl.index()].get(y, x) > 0.5 || masks[Structure::Fhr.index()].get(y, x) > 0.5 {
            700.0
        } else if masks[Structure::Bld.index()].get(y, x) > 0.5 {
            10.0
        } else if masks[Structure::St.index()].get(y, x) > 0.5 {
            -60.0
        } else if masks[Structure::Ptv.index()].get(y, x) > 0.5 {
            50.0
        } else {
            35.0
        };
        base + hu_noise.sample(rng)
    };
    let mut ct = Grid2D::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let hu = hu_of(y, x, &mut rng);
            ct.set(y, x, ((hu - HU_WINDOW.0) / (HU_WINDOW.1 - HU_WINDOW.0)).clamp(0.0, 1.0));
        }
    }

    let ptv = &masks[Structure::Ptv.index()];
    let ptv_pts: Vec<(f64, f64)> = (0..n)
        .flat_map(|y| (0..n).map(move |x| (y, x)))
        .filter(|&(y, x)| ptv.get(y, x) > 0.5)
        .map(|(y, x)| (coord(x, n), coord(y, n)))
        .collect();
    let centroid = {
        let k = ptv_pts.len() as f64;
        let (su, sv) = ptv_pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
        (su / k, sv / k)
    };
    let phase = rng.random_range(0.0..std::f64::consts::TAU / cfg.beams as f64);
    let half_voxel = 1.0 / n as f64;
    let mut raw = Grid2D::zeros(n, n);
    for k in 0..cfg.beams {
        let theta = phase + std::f64::consts::TAU * k as f64 / cfg.beams as f64;
        let d = (theta.cos(), theta.sin());
        let perp = (-d.1, d.0);
        let lateral = |p: &(f64, f64)| (p.0 - centroid.0) * perp.0 + (p.1 - centroid.1) * perp.1;
        let (lo, hi) = ptv_pts
            .iter()
            .map(lateral)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
        let (lo, hi) = (lo - half_voxel, hi + half_voxel);
        for y in 0..n {
            for x in 0..n {
                if body.get(y, x) < 0.5 {
                    continue;
                }
                let p = (coord(x, n), coord(y, n));
                let l = lateral(&p);
                if l < lo || l > hi {
                    continue;
                }
                let depth = depth_in_body(&geo.body, p.0, p.1, d) * n as f64 / 2.0;
                let cur = raw.get(y, x);
                raw.set(y, x, cur + (-cfg.attenuation * depth).exp());
            }
        }
    }
    let blurred = gaussian_blur(&raw, cfg.penumbra);
    let ptv_mean = mean_in(&blurred, ptv);
    if !(ptv_mean > 0.0) {
        return Err(FddmError::Generation(format!("sample {index}: PTV received no dose")));
    }
    let dose = quantize(&blurred.map(|v| (v * prescription / ptv_mean).max(0.0)));

    Ok(PlanningSample {
        id: sample_id(index),
        seed: cfg.seed,
        index,
        ct: quantize(&ct),
        masks,
        dose,
        prescription: prescription as f32 as f64,
    })
}

fn mean_in(g: &Grid2D, mask: &Grid2D) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for (&v, &m) in g.values().iter().zip(mask.values()) {
        if m > 0.5 {
            s += v;
            k += 1;
        }
    }
    s / k as f64
}

pub fn generate_dataset(cfg: &PhantomConfig, count: usize) -> Result<Vec<PlanningSample>> {
    (0..count).map(|i| generate_sample(cfg, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

/// Per-index split labels plus the grouped index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub labels: Vec<Split>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ratios are proportions; when they sum to `n_total` they are exact counts.
/// Rounding remainders go to the largest fractional parts, ties to the
/// earlier split.
pub fn split_dataset(n_total: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let r = [ratios.0, ratios.1, ratios.2];
    let sum: f64 = r.iter().sum();
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(sum > 0.0) {
        return Err(FddmError::Parameter(format!("infeasible split ratios {ratios:?}")));
    }
    let exact: Vec<f64> = r.iter().map(|v| v / sum * n_total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut k = 0;
    while counts.iter().sum::<usize>() < n_total {
        counts[order[k % 3]] += 1;
        k += 1;
    }
    let mut perm: Vec<usize> = (0..n_total).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Train; n_total];
    let (train, rest) = perm.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    let mut out = SplitAssignment {
        labels: Vec::new(),
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    };
    for &i in &out.val {
        labels[i] = Split::Val;
    }
    for &i in &out.test {
        labels[i] = Split::Test;
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    out.labels = labels;
    Ok(out)
}
