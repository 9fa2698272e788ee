//! Image similarity and steering-grid primitives shared by both monitors.
//!
//! SSIM here is the box-window variant: uniform `k × k` averaging, stride 1,
//! no border padding, constants `C1 = (0.01 L)²` and `C2 = (0.03 L)²` with
//! dynamic range `L = 1`. Multi-channel frames are scored per channel and
//! averaged.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::kernels;
use crate::scalar::Scalar;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Default SSIM window used by the video-prediction monitor.
pub const SSIM_KERNEL: usize = 5;

fn check_kernel(kernel: usize, h: usize, w: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("ssim kernel must be odd, got {kernel}")));
    }
    if kernel > h.min(w) {
        return Err(Error::invalid(format!("ssim kernel {kernel} larger than image {h}x{w}")));
    }
    Ok(())
}

/// Mean SSIM of two single-channel `h × w` images.
pub fn ssim_plane<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, kernel: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::invalid(format!(
            "ssim plane sizes {} and {} vs {h}x{w}",
            a.len(),
            b.len()
        )));
    }
    check_kernel(kernel, h, w)?;
    // Window sums are accumulated in f64 regardless of T.
    let to64 = |s: &[T]| s.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let (a, b) = (to64(a), to64(b));
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let n = (h + 1 - kernel) * (w + 1 - kernel);
    let mut sums = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (src, dst) in [&a, &b, &aa, &bb, &ab].into_iter().zip(sums.iter_mut()) {
        kernels::box_sum_forward(1, h, w, kernel, src, dst);
    }
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let mu_a = sums[0][i] * inv;
        let mu_b = sums[1][i] * inv;
        let var_a = sums[2][i] * inv - mu_a * mu_a;
        let var_b = sums[3][i] * inv - mu_b * mu_b;
        let cov = sums[4][i] * inv - mu_a * mu_b;
        total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Mean SSIM of two frames, averaged over channels.
pub fn ssim<T: Scalar>(a: &Frame<T>, b: &Frame<T>, kernel: usize) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "ssim shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (c, h, w) = a.dims();
    let mut acc = 0.0;
    for ch in 0..c {
        acc += ssim_plane(a.plane(ch), b.plane(ch), h, w, kernel)?;
    }
    Ok(acc / c as f64)
}

/// Structural dissimilarity `(1 - SSIM) / 2`, in `[0, 1]`.
pub fn dssim<T: Scalar>(a: &Frame<T>, b: &Frame<T>, kernel: usize) -> Result<f64> {
    Ok(((1.0 - ssim(a, b, kernel)?) / 2.0).clamp(0.0, 1.0))
}

/// `N` equally spaced candidate steering commands, endpoints inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrid {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl ActionGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::invalid(format!("action grid needs lo < hi, got [{lo}, {hi}]")));
        }
        if n < 2 {
            return Err(Error::invalid(format!("action grid needs at least 2 points, got {n}")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut values: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        values[n - 1] = hi;
        Ok(ActionGrid { lo, hi, values })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.values.len() - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Shorthand for [`ActionGrid::new`].
pub fn make_action_grid(lo: f64, hi: f64, n: usize) -> Result<ActionGrid> {
    ActionGrid::new(lo, hi, n)
}

/// Index of the grid value closest to `u`; ties go to the lower index and
/// out-of-range commands clamp to an endpoint.
pub fn nearest_action_index(u: f64, grid: &ActionGrid) -> usize {
    // Distances within this slack count as ties so exact midpoints resolve low.
    const TIE: f64 = 1e-12;
    let mut best = 0;
    let mut best_d = (u - grid.values[0]).abs();
    for (i, &v) in grid.values.iter().enumerate().skip(1) {
        let d = (u - v).abs();
        if d < best_d - TIE {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Index of the smallest score; ties go to the lower index.
pub fn argmin_lower(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s >= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Window-by-window SSIM with explicit double loops; shares nothing with
    /// the running-sum implementation.
    fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize, k: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let px = |img: &[f64], di: usize, dj: usize| img[(i + di) * w + j + dj];
                let n = (k * k) as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        ma += px(a, di, dj);
                        mb += px(b, di, dj);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let da = px(a, di, dj) - ma;
                        let db = px(b, di, dj) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Frame::new(3, 12, 9, random_plane(&mut rng, 3 * 12 * 9)).unwrap();
        assert!((ssim(&a, &a, 5).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(dssim(&a, &a, 5).unwrap(), 0.0);
    }

    #[test]
    fn zeros_vs_ones_matches_oracle() {
        let zeros = vec![0.0; 256];
        let ones = vec![1.0; 256];
        let oracle = naive_ssim(&zeros, &ones, 16, 16, 5);
        // Constant windows reduce to C1 / (1 + C1).
        assert!((oracle - 9.999_000_099_990_001e-5).abs() < 1e-15);
        let got = ssim_plane(&zeros, &ones, 16, 16, 5).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        let fa = Frame::new(1, 16, 16, zeros).unwrap();
        let fb = Frame::new(1, 16, 16, ones).unwrap();
        assert!((dssim(&fa, &fb, 5).unwrap() - (1.0 - oracle) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random_plane(&mut rng, 20 * 17);
            let b = random_plane(&mut rng, 20 * 17);
            for k in [3, 5, 7] {
                let got = ssim_plane(&a, &b, 20, 17, k).unwrap();
                assert!((got - naive_ssim(&a, &b, 20, 17, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Frame::new(3, 10, 10, random_plane(&mut rng, 300)).unwrap();
            let b = Frame::new(3, 10, 10, random_plane(&mut rng, 300)).unwrap();
            assert_eq!(ssim(&a, &b, 5).unwrap(), ssim(&b, &a, 5).unwrap());
        }
    }

    #[test]
    fn argument_errors() {
        let a = Frame::<f64>::filled(1, 8, 8, 0.5).unwrap();
        let b = Frame::<f64>::filled(1, 8, 7, 0.5).unwrap();
        assert!(matches!(ssim(&a, &b, 5), Err(Error::InvalidArgument(_))));
        assert!(ssim(&a, &a, 4).is_err());
        assert!(ssim(&a, &a, 9).is_err());
        assert!(dssim(&a, &b, 5).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = make_action_grid(-0.24, 0.28, 15).unwrap();
        assert_eq!(g.values()[0], -0.24);
        assert_eq!(g.values()[14], 0.28);
        assert!((g.step() - 0.52 / 14.0).abs() < 1e-15);
        assert!((g.step() - 0.037_142_857).abs() < 1e-9);
        assert_eq!(make_action_grid(0.0, 1.0, 2).unwrap().values(), &[0.0, 1.0]);
        let u = make_action_grid(-0.52, 0.56, 15).unwrap();
        assert_eq!(u.len(), 15);
        assert!((u.step() - 1.08 / 14.0).abs() < 1e-15);
        assert!(make_action_grid(1.0, 1.0, 5).is_err());
        assert!(make_action_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn nearest_index_examples() {
        let g = make_action_grid(-0.24, 0.28, 15).unwrap();
        assert_eq!(nearest_action_index(-0.24, &g), 0);
        assert_eq!(nearest_action_index(0.30, &g), 14);
        assert_eq!(nearest_action_index(-5.0, &g), 0);
        let mid = (g.values()[3] + g.values()[4]) / 2.0;
        assert_eq!(nearest_action_index(mid, &g), 3);
    }

    #[test]
    fn argmin_prefers_lower_index() {
        assert_eq!(argmin_lower(&[3.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin_lower(&[1.0, 1.0, 1.0]), Some(0));
        assert_eq!(argmin_lower(&[]), None);
    }

    proptest! {
        #[test]
        fn grid_spacing_uniform(lo in -2.0f64..2.0, span in 0.01f64..3.0, n in 2usize..64) {
            let g = make_action_grid(lo, lo + span, n).unwrap();
            let step = g.step();
            for w in g.values().windows(2) {
                prop_assert!(((w[1] - w[0]) - step).abs() < 1e-12);
            }
            for (i, &v) in g.values().iter().enumerate() {
                prop_assert_eq!(nearest_action_index(v, &g), i);
            }
        }

        #[test]
        fn dssim_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Frame::new(1, 9, 9, random_plane(&mut rng, 81)).unwrap();
            let b = Frame::new(1, 9, 9, random_plane(&mut rng, 81)).unwrap();
            let d = dssim(&a, &b, 5).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
