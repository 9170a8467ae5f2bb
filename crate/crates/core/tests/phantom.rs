use fddm_core::phantom::{
    generate_dataset, generate_sample, read_dataset, split_dataset, write_dataset, PhantomConfig, Split, Structure,
};
use fddm_core::wavelet::{dwt2, Grid2D};
use fddm_core::FddmError;
use proptest::prelude::*;

fn masked_mean(g: &Grid2D, m: &Grid2D) -> f64 {
    let v: Vec<f64> = g.values().iter().zip(m.values()).filter(|(_, &m)| m > 0.5).map(|(&d, _)| d).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn box_blur2(g: &Grid2D) -> Grid2D {
    Grid2D::from_fn(g.height(), g.width(), |y, x| {
        let (y0, x0) = (y & !1, x & !1);
        (g.get(y0, x0) + g.get(y0 + 1, x0) + g.get(y0, x0 + 1) + g.get(y0 + 1, x0 + 1)) / 4.0
    })
}

fn high_fraction(g: &Grid2D) -> f64 {
    dwt2(g).unwrap().high_energy() / g.energy()
}

#[test]
fn deterministic_per_seed_and_index() {
    let cfg = PhantomConfig::default();
    assert_eq!(generate_sample(&cfg, 3).unwrap(), generate_sample(&cfg, 3).unwrap());
    assert_ne!(generate_sample(&cfg, 3).unwrap().dose, generate_sample(&cfg, 4).unwrap().dose);
    let other = PhantomConfig { seed: 1, ..cfg.clone() };
    assert_ne!(generate_sample(&cfg, 3).unwrap().dose, generate_sample(&other, 3).unwrap().dose);
}

#[test]
fn sample_invariants_hold() {
    let cfg = PhantomConfig::default();
    for s in generate_dataset(&cfg, 40).unwrap() {
        assert_eq!(s.dims(), (64, 64));
        for m in &s.masks {
            assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(s.mask(Structure::Ptv).values().contains(&1.0));
        assert!(s.dose.values().iter().all(|&d| d >= 0.0));
        assert!(s.ct.values().iter().all(|&c| (0.0..=1.0).contains(&c)));
        for oar in Structure::OARS {
            let overlap = s
                .mask(oar)
                .values()
                .iter()
                .zip(s.mask(Structure::Ptv).values())
                .any(|(&a, &b)| a > 0.5 && b > 0.5);
            assert!(!overlap, "{} overlaps the PTV in {}", oar.name(), s.id);
        }
        let mean = masked_mean(&s.dose, s.mask(Structure::Ptv));
        assert!((mean - s.prescription).abs() / s.prescription <= 0.005, "{mean} vs {}", s.prescription);
    }
}

#[test]
fn dose_carries_high_frequency_detail() {
    let cfg = PhantomConfig::default();
    for i in 0..10 {
        let s = generate_sample(&cfg, i).unwrap();
        let sharp = high_fraction(&s.dose);
        let blurred = high_fraction(&box_blur2(&s.dose));
        assert!(sharp > 0.0 && sharp > blurred, "{sharp} vs {blurred}");
    }
}

#[test]
fn dose_is_confined_and_peaks_in_target() {
    let cfg = PhantomConfig::default();
    let n = cfg.size;
    let margin = (3.0 * cfg.penumbra).ceil() as isize;
    let mut peaks_in_ptv = 0;
    let total = 200;
    for i in 0..total {
        let s = generate_sample(&cfg, i).unwrap();
        // Body voxels are exactly those with CT above air.
        let body = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n && s.ct.get(y as usize, x as usize) > 0.05
        };
        for y in 0..n as isize {
            for x in 0..n as isize {
                let near = (-margin..=margin).any(|dy| (-margin..=margin).any(|dx| body(y + dy, x + dx)));
                if !near {
                    assert_eq!(s.dose.get(y as usize, x as usize), 0.0, "{} leaks at ({y},{x})", s.id);
                }
            }
        }
        let (argmax, _) = s
            .dose
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if s.mask(Structure::Ptv).values()[argmax] > 0.5 {
            peaks_in_ptv += 1;
        }
    }
    assert!(peaks_in_ptv * 100 >= 95 * total, "{peaks_in_ptv}/{total}");
}

#[test]
fn config_validation() {
    for bad in [
        PhantomConfig { size: 63, ..Default::default() },
        PhantomConfig { size: 40, ..Default::default() },
        PhantomConfig { beams: 0, ..Default::default() },
        PhantomConfig { penumbra: 0.0, ..Default::default() },
        PhantomConfig { attenuation: -1.0, ..Default::default() },
        PhantomConfig { prescription_min: 60.0, prescription_max: 50.0, ..Default::default() },
    ] {
        assert!(matches!(generate_sample(&bad, 0), Err(FddmError::Config(_))), "{bad:?}");
    }
}

#[test]
fn impossible_geometry_is_a_generation_error() {
    // Jitter this wide scatters organs outside the body or onto the target.
    let cfg = PhantomConfig {
        jitter: 40.0,
        max_retries: 3,
        ..Default::default()
    };
    assert!(matches!(generate_sample(&cfg, 0), Err(FddmError::Generation(_))));
}

#[test]
fn split_matches_reported_partition() {
    let s = split_dataset(130, (98.0, 10.0, 22.0), 7).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (98, 10, 22));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..130).collect::<Vec<_>>());
    let t = split_dataset(130, (98.0, 10.0, 22.0), 8).unwrap();
    assert_ne!(s.labels, t.labels);
    assert_eq!(t.test.len(), 22);

    let all_train = split_dataset(17, (1.0, 0.0, 0.0), 0).unwrap();
    assert!(all_train.labels.iter().all(|&l| l == Split::Train));
    assert!(split_dataset(10, (0.0, 0.0, 0.0), 0).is_err());
    assert!(split_dataset(10, (-1.0, 2.0, 0.0), 0).is_err());
}

proptest! {
    #[test]
    fn split_is_exhaustive_partition(n in 0usize..200, a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.1f64..5.0, seed: u64) {
        let s = split_dataset(n, (a, b, c), seed).unwrap();
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        for (i, l) in s.labels.iter().enumerate() {
            let list = match l { Split::Train => &s.train, Split::Val => &s.val, Split::Test => &s.test };
            prop_assert!(list.binary_search(&i).is_ok());
        }
        let exact = a / (a + b + c) * n as f64;
        prop_assert!((s.train.len() as f64 - exact).abs() < 1.0 + 1e-9);
    }
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let cfg = PhantomConfig { size: 32, ..Default::default() };
    let samples = generate_dataset(&cfg, 5).unwrap();
    let split = split_dataset(5, (3.0, 1.0, 1.0), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples, &split.labels, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.samples, samples);
    assert_eq!(back.splits, split.labels);
    let dirs = std::fs::read_dir(dir.path().join("samples")).unwrap().count();
    assert_eq!(dirs, back.samples.len());
    for (a, b) in samples.iter().zip(&back.samples) {
        let bits = |g: &Grid2D| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.dose), bits(&b.dose));
        assert_eq!(bits(&a.ct), bits(&b.ct));
    }
}

#[test]
fn dataset_integrity_errors() {
    let cfg = PhantomConfig { size: 32, ..Default::default() };
    let samples = generate_dataset(&cfg, 3).unwrap();
    let labels = vec![Split::Train; 3];
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples, &labels, dir.path()).unwrap();

    let dose = dir.path().join("samples/s00001/dose.arr");
    let mut bytes = std::fs::read(&dose).unwrap();
    let original = bytes.clone();
    bytes[40] ^= 0x01;
    std::fs::write(&dose, &bytes).unwrap();
    match read_dataset(dir.path()) {
        Err(FddmError::Checksum { id, .. }) => assert!(id.contains("s00001"), "{id}"),
        other => panic!("expected checksum error, got {other:?}"),
    }
    std::fs::write(&dose, &original).unwrap();

    let mask = dir.path().join("samples/s00002/mask_bld.arr");
    std::fs::remove_file(&mask).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(FddmError::Dataset(_))));

    std::fs::remove_dir_all(dir.path().join("samples/s00002")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(FddmError::Dataset(_))));
}
