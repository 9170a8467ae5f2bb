//! Single-level orthonormal 2D Haar analysis and synthesis.
//!
//! For every non-overlapping 2×2 block `[a b; c d]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthogonal, so synthesis is its transpose and the total
//! energy of the four bands equals the energy of the input.

use crate::error::{FddmError, Result};

/// Row-major real scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FddmError::Dimension(format!(
                "grid must be non-empty, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(FddmError::Dimension(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FddmError::Parameter(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The four Haar subbands of a grid, each half-size in both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: Grid2D,
    pub lh: Grid2D,
    pub hl: Grid2D,
    pub hh: Grid2D,
}

impl SubbandSet {
    pub fn new(ll: Grid2D, lh: Grid2D, hl: Grid2D, hh: Grid2D) -> Result<Self> {
        let d = ll.dims();
        if lh.dims() != d || hl.dims() != d || hh.dims() != d {
            return Err(FddmError::Dimension(format!(
                "subband shapes differ: ll {:?}, lh {:?}, hl {:?}, hh {:?}",
                d,
                lh.dims(),
                hl.dims(),
                hh.dims()
            )));
        }
        Ok(Self { ll, lh, hl, hh })
    }

    pub fn band_dims(&self) -> (usize, usize) {
        self.ll.dims()
    }

    /// High-frequency group in (LH, HL, HH) order.
    pub fn high(&self) -> [&Grid2D; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    pub fn high_energy(&self) -> f64 {
        self.high().iter().map(|g| g.energy()).sum()
    }

    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.high_energy()
    }
}

pub fn dwt2(image: &Grid2D) -> Result<SubbandSet> {
    let (h, w) = image.dims();
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(FddmError::Dimension(format!(
            "haar analysis needs even dimensions >= 2, got {h}x{w}"
        )));
    }
    let (bh, bw) = (h / 2, w / 2);
    let mut ll = Grid2D::zeros(bh, bw);
    let mut lh = Grid2D::zeros(bh, bw);
    let mut hl = Grid2D::zeros(bh, bw);
    let mut hh = Grid2D::zeros(bh, bw);
    for y in 0..bh {
        for x in 0..bw {
            let a = image.get(2 * y, 2 * x);
            let b = image.get(2 * y, 2 * x + 1);
            let c = image.get(2 * y + 1, 2 * x);
            let d = image.get(2 * y + 1, 2 * x + 1);
            ll.set(y, x, (a + b + c + d) * 0.5);
            hl.set(y, x, (a - b + c - d) * 0.5);
            lh.set(y, x, (a + b - c - d) * 0.5);
            hh.set(y, x, (a - b - c + d) * 0.5);
        }
    }
    Ok(SubbandSet { ll, lh, hl, hh })
}

pub fn iwt2(bands: &SubbandSet) -> Result<Grid2D> {
    let d = bands.ll.dims();
    if bands.lh.dims() != d || bands.hl.dims() != d || bands.hh.dims() != d {
        return Err(FddmError::Dimension("subband shapes differ".into()));
    }
    let (bh, bw) = d;
    let mut out = Grid2D::zeros(2 * bh, 2 * bw);
    for y in 0..bh {
        for x in 0..bw {
            let ll = bands.ll.get(y, x);
            let lh = bands.lh.get(y, x);
            let hl = bands.hl.get(y, x);
            let hh = bands.hh.get(y, x);
            out.set(2 * y, 2 * x, (ll + hl + lh + hh) * 0.5);
            out.set(2 * y, 2 * x + 1, (ll - hl + lh - hh) * 0.5);
            out.set(2 * y + 1, 2 * x, (ll + hl - lh - hh) * 0.5);
            out.set(2 * y + 1, 2 * x + 1, (ll - hl - lh + hh) * 0.5);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, v: &[f64]) -> Grid2D {
        Grid2D::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn constant_block_has_only_low_band() {
        let b = dwt2(&grid(2, 2, &[1.0; 4])).unwrap();
        assert_eq!(b.ll.values(), &[2.0]);
        assert_eq!(b.lh.values(), &[0.0]);
        assert_eq!(b.hl.values(), &[0.0]);
        assert_eq!(b.hh.values(), &[0.0]);
    }

    #[test]
    fn hand_computed_block() {
        // ll = 10/2, hl = (1-2+3-4)/2, lh = (1+2-3-4)/2, hh = (1-2-3+4)/2
        let b = dwt2(&grid(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(b.ll.values(), &[5.0]);
        assert_eq!(b.hl.values(), &[-1.0]);
        assert_eq!(b.lh.values(), &[-2.0]);
        assert_eq!(b.hh.values(), &[0.0]);
    }

    #[test]
    fn four_by_four_gives_two_by_two_bands() {
        let b = dwt2(&Grid2D::from_fn(4, 4, |y, x| (y * 4 + x) as f64)).unwrap();
        for band in [&b.ll, &b.lh, &b.hl, &b.hh] {
            assert_eq!(band.dims(), (2, 2));
        }
    }

    #[test]
    fn inverse_of_pure_low_band() {
        let z = grid(1, 1, &[0.0]);
        let bands = SubbandSet::new(grid(1, 1, &[2.0]), z.clone(), z.clone(), z).unwrap();
        assert_eq!(iwt2(&bands).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn odd_dimensions_rejected() {
        let g = Grid2D::zeros(3, 4);
        assert!(matches!(dwt2(&g), Err(FddmError::Dimension(_))));
        let g = Grid2D::zeros(4, 5);
        assert!(matches!(dwt2(&g), Err(FddmError::Dimension(_))));
    }

    #[test]
    fn mismatched_bands_rejected() {
        let a = Grid2D::zeros(2, 2);
        let b = Grid2D::zeros(2, 3);
        assert!(SubbandSet::new(a.clone(), a.clone(), a.clone(), b.clone()).is_err());
        let bad = SubbandSet {
            ll: a.clone(),
            lh: a.clone(),
            hl: b,
            hh: a,
        };
        assert!(matches!(iwt2(&bad), Err(FddmError::Dimension(_))));
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(Grid2D::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    fn even_grid() -> impl Strategy<Value = Grid2D> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            prop::collection::vec(-100.0f64..100.0, 4 * h * w)
                .prop_map(move |v| Grid2D::new(2 * h, 2 * w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(x in even_grid()) {
            let bands = dwt2(&x).unwrap();
            let back = iwt2(&bands).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-10);
            let e = x.energy();
            prop_assert!((bands.energy() - e).abs() <= 1e-8 * e.max(1e-300));
        }

        #[test]
        fn synthesis_then_analysis_is_identity(x in even_grid()) {
            // Random bands built from a random grid's shape.
            let (h, w) = (x.height() / 2, x.width() / 2);
            let v = x.values();
            let part = |k: usize| Grid2D::new(h, w, v[k * h * w..(k + 1) * h * w].to_vec()).unwrap();
            let bands = SubbandSet::new(part(0), part(1), part(2), part(3)).unwrap();
            let again = dwt2(&iwt2(&bands).unwrap()).unwrap();
            prop_assert!(again.ll.max_abs_diff(&bands.ll) <= 1e-10);
            prop_assert!(again.lh.max_abs_diff(&bands.lh) <= 1e-10);
            prop_assert!(again.hl.max_abs_diff(&bands.hl) <= 1e-10);
            prop_assert!(again.hh.max_abs_diff(&bands.hh) <= 1e-10);
        }

        #[test]
        fn linearity(x in even_grid(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let y = x.map(|v| (v * 0.37).sin() * 10.0);
            let combo = Grid2D::from_fn(x.height(), x.width(), |r, c| alpha * x.get(r, c) + beta * y.get(r, c));
            let (bx, by, bc) = (dwt2(&x).unwrap(), dwt2(&y).unwrap(), dwt2(&combo).unwrap());
            for (c, (a, b)) in [(&bc.ll, (&bx.ll, &by.ll)), (&bc.lh, (&bx.lh, &by.lh)), (&bc.hl, (&bx.hl, &by.hl)), (&bc.hh, (&bx.hh, &by.hh))] {
                for i in 0..c.values().len() {
                    let want = alpha * a.values()[i] + beta * b.values()[i];
                    prop_assert!((c.values()[i] - want).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn constant_image_has_zero_detail(h in 1usize..6, w in 1usize..6, c in -50.0f64..50.0) {
            let b = dwt2(&Grid2D::from_fn(2 * h, 2 * w, |_, _| c)).unwrap();
            prop_assert_eq!(b.high_energy(), 0.0);
        }
    }
}
