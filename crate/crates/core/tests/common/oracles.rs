//! Brute-force reference implementations of the dose metrics.

use rand::Rng;

/// Largest in-mask value `c` with at least `⌈m·N/100⌉` voxels ≥ `c`, for integral `m`.
pub fn percentile(dose: &[f64], mask: &[f64], m: u32) -> f64 {
    let vals: Vec<f64> = dose.iter().zip(mask).filter(|(_, &k)| k > 0.5).map(|(&d, _)| d).collect();
    let n = vals.len() as u64;
    let need = (m as u64 * n).div_ceil(100).max(1);
    let mut best = f64::NEG_INFINITY;
    for &c in &vals {
        let count = vals.iter().filter(|&&v| v >= c).count() as u64;
        if count >= need && c > best {
            best = c;
        }
    }
    best
}

pub fn mean(dose: &[f64], mask: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..dose.len() {
        if mask[i] > 0.5 {
            s += dose[i];
            n += 1.0;
        }
    }
    s / n
}

pub fn conformity(dose: &[f64], ptv: &[f64], presc: f64) -> f64 {
    let ptv_set: Vec<usize> = (0..dose.len()).filter(|&i| ptv[i] > 0.5).collect();
    let iso_set: Vec<usize> = (0..dose.len()).filter(|&i| dose[i] >= presc).collect();
    let both = ptv_set.iter().filter(|i| iso_set.contains(i)).count();
    if iso_set.is_empty() {
        return 0.0;
    }
    (both * both) as f64 / (ptv_set.len() * iso_set.len()) as f64
}

pub fn dvh_fractions(dose: &[f64], mask: &[f64], width: f64, edges: usize) -> Vec<f64> {
    let vals: Vec<f64> = dose.iter().zip(mask).filter(|(_, &k)| k > 0.5).map(|(&d, _)| d).collect();
    (0..edges)
        .map(|k| {
            let e = k as f64 * width;
            vals.iter().filter(|&&v| v >= e).count() as f64 / vals.len() as f64
        })
        .collect()
}

/// A random masked grid of at most 8×8 with a non-empty mask. Doses are
/// drawn from a coarse lattice so ties are common.
pub fn random_case(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let n = h * w;
    let dose: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 * 1.5).collect();
    let mut mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let forced = rng.random_range(0..n);
    mask[forced] = 1.0;
    (dose, mask)
}
