//! Orthonormal 2D Haar analysis and per-scale binning distances.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::metrics::tree::sbd_against;
use crate::tensor::Tensor;

/// Coefficients of a square dyadic image in standard in-place layout: after
/// `levels` steps the approximation occupies the top-left `side / 2^levels`
/// block and level `ℓ` details sit in the three blocks adjoining the level
/// `ℓ` approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarPyramid {
    side: usize,
    levels: usize,
    coeffs: Vec<f64>,
}

fn forward_pairs(src: &[f64], dst: &mut [f64]) {
    let h = src.len() / 2;
    for k in 0..h {
        dst[k] = (src[2 * k] + src[2 * k + 1]) * FRAC_1_SQRT_2;
        dst[h + k] = (src[2 * k] - src[2 * k + 1]) * FRAC_1_SQRT_2;
    }
}

fn inverse_pairs(src: &[f64], dst: &mut [f64]) {
    let h = src.len() / 2;
    for k in 0..h {
        dst[2 * k] = (src[k] + src[h + k]) * FRAC_1_SQRT_2;
        dst[2 * k + 1] = (src[k] - src[h + k]) * FRAC_1_SQRT_2;
    }
}

/// Applies `f` to every row, then every column, of the top-left `n x n` block.
fn sweep(c: &mut [f64], side: usize, n: usize, f: fn(&[f64], &mut [f64])) {
    let mut src = vec![0.0; n];
    let mut dst = vec![0.0; n];
    for r in 0..n {
        src.copy_from_slice(&c[r * side..r * side + n]);
        f(&src, &mut dst);
        c[r * side..r * side + n].copy_from_slice(&dst);
    }
    for col in 0..n {
        for r in 0..n {
            src[r] = c[r * side + col];
        }
        f(&src, &mut dst);
        for r in 0..n {
            c[r * side + col] = dst[r];
        }
    }
}

fn check_image(image: &Tensor) -> Result<usize> {
    let s = image.shape();
    if s.len() != 2 || s[0] != s[1] || !s[0].is_power_of_two() {
        return Err(Error::contract(format!("Haar needs a square dyadic image, got {s:?}")));
    }
    Ok(s[0])
}

pub fn haar_transform(image: &Tensor, levels: usize) -> Result<HaarPyramid> {
    let side = check_image(image)?;
    let max = side.trailing_zeros() as usize;
    if levels > max {
        return Err(Error::contract(format!("{levels} levels exceed log2({side}) = {max}")));
    }
    let mut coeffs = image.data().to_vec();
    let mut n = side;
    for _ in 0..levels {
        sweep(&mut coeffs, side, n, forward_pairs);
        n /= 2;
    }
    Ok(HaarPyramid { side, levels, coeffs })
}

pub fn inverse_haar(p: &HaarPyramid) -> Tensor {
    let mut c = p.coeffs.clone();
    for l in (0..p.levels).rev() {
        let n = p.side >> l;
        // undo columns, then rows: the reverse of the forward order
        let mut src = vec![0.0; n];
        let mut dst = vec![0.0; n];
        for col in 0..n {
            for r in 0..n {
                src[r] = c[r * p.side + col];
            }
            inverse_pairs(&src, &mut dst);
            for r in 0..n {
                c[r * p.side + col] = dst[r];
            }
        }
        for r in 0..n {
            src.copy_from_slice(&c[r * p.side..r * p.side + n]);
            inverse_pairs(&src, &mut dst);
            c[r * p.side..r * p.side + n].copy_from_slice(&dst);
        }
    }
    Tensor::new(vec![p.side, p.side], c).expect("shape preserved")
}

impl HaarPyramid {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    fn block(&self, r0: usize, c0: usize, h: usize, out: &mut Vec<f64>) {
        for r in r0..r0 + h {
            out.extend_from_slice(&self.coeffs[r * self.side + c0..r * self.side + c0 + h]);
        }
    }

    /// Detail coefficients of level `level` (1 = finest), flattened as the
    /// horizontal, vertical and diagonal blocks in turn.
    pub fn band(&self, level: usize) -> Result<Vec<f64>> {
        if level == 0 || level > self.levels {
            return Err(Error::contract(format!("level {level} outside 1..={}", self.levels)));
        }
        let h = self.side >> level;
        let mut out = Vec::with_capacity(3 * h * h);
        self.block(0, h, h, &mut out);
        self.block(h, 0, h, &mut out);
        self.block(h, h, h, &mut out);
        Ok(out)
    }

    pub fn approximation(&self) -> Vec<f64> {
        let h = self.side >> self.levels;
        let mut out = Vec::with_capacity(h * h);
        self.block(0, 0, h, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleSbd {
    /// SBD of each detail band, finest first.
    pub per_level: Vec<f64>,
    pub mean: f64,
}

fn band_matrix(images: &[Tensor], level: usize, levels: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = 0;
    for img in images {
        let b = haar_transform(img, levels)?.band(level)?;
        width = b.len();
        data.extend(b);
    }
    if images.is_empty() {
        return Err(Error::contract("no images"));
    }
    Tensor::new(vec![images.len(), width], data)
}

/// For each level, bins that level's detail coefficients with a tree built on
/// the real images and compares the two histograms.
pub fn multiscale_sbd(real: &[Tensor], fake: &[Tensor], depth: usize, levels: usize) -> Result<MultiscaleSbd> {
    if levels == 0 {
        return Err(Error::contract("at least one Haar level is required"));
    }
    let mut per_level = Vec::with_capacity(levels);
    for level in 1..=levels {
        let r = band_matrix(real, level, levels)?;
        let f = band_matrix(fake, level, levels)?;
        if r.cols() != f.cols() {
            return Err(Error::dim("multiscale_sbd", "real and fake images differ in size"));
        }
        per_level.push(sbd_against(&r, &f, depth)?);
    }
    let mean = per_level.iter().sum::<f64>() / levels as f64;
    Ok(MultiscaleSbd { per_level, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_image_has_no_detail() {
        let p = haar_transform(&Tensor::filled(&[8, 8], 3.0), 3).unwrap();
        for l in 1..=3 {
            assert!(p.band(l).unwrap().iter().all(|c| c.abs() < 1e-12));
        }
        assert!((p.approximation()[0] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn one_row_pair() {
        let (a, b) = (3.0, 1.0);
        let img = Tensor::from_rows(&[[a, b], [0.0, 0.0]]).unwrap();
        let mut c = img.data().to_vec();
        let mut row = [0.0; 2];
        forward_pairs(&c[0..2], &mut row);
        c[0..2].copy_from_slice(&row);
        assert!((row[0] - (a + b) / 2f64.sqrt()).abs() < 1e-15);
        assert!((row[1] - (a - b) / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_dyadic() {
        assert!(haar_transform(&Tensor::zeros(&[6, 6]), 1).is_err());
        assert!(haar_transform(&Tensor::zeros(&[4, 8]), 1).is_err());
        assert!(haar_transform(&Tensor::zeros(&[4, 4]), 3).is_err());
    }

    #[test]
    fn random_8x8_round_trip() {
        let img = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[8, 8], 1.0);
        let back = inverse_haar(&haar_transform(&img, 3).unwrap());
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(log_side in 0u32..6, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let side = 1usize << log_side;
            let levels = ((log_side as f64 + 1.0) * frac) as usize;
            let img = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[side, side], 1.0);
            let p = haar_transform(&img, levels.min(log_side as usize)).unwrap();
            prop_assert!((norm(p.coefficients()) - norm(img.data())).abs() < 1e-10);
            let back = inverse_haar(&p);
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn smooth_images(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
                let data = (0..64)
                    .map(|i| a * (i / 8) as f64 + b * (i % 8) as f64 + c * rng.random::<f64>())
                    .collect();
                Tensor::new(vec![8, 8], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_zero_at_every_level() {
        let imgs = smooth_images(&mut ChaCha8Rng::seed_from_u64(1), 128);
        let m = multiscale_sbd(&imgs, &imgs, 3, 3).unwrap();
        assert_eq!(m.per_level, vec![0.0; 3]);
        assert_eq!(m.mean, 0.0);
    }

    #[test]
    fn checkerboard_noise_shows_at_the_finest_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = smooth_images(&mut rng, 256);
        let fake: Vec<Tensor> = smooth_images(&mut rng, 256)
            .into_iter()
            .map(|t| {
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + if (i / 8 + i % 8) % 2 == 0 { 2.0 } else { -2.0 })
                    .collect();
                Tensor::new(vec![8, 8], data).unwrap()
            })
            .collect();
        let m = multiscale_sbd(&real, &fake, 3, 3).unwrap();
        assert!(m.per_level[0] > m.per_level[2], "{:?}", m.per_level);
        let mean = m.per_level.iter().sum::<f64>() / 3.0;
        assert!((m.mean - mean).abs() < 1e-15);
    }
}
