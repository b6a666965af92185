//! PSNR, SSIM and the per-image evaluation protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::image::{make_ilr, rgb_to_luminance, DegradationSpec, Image};
use crate::model::Model;

/// Side of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}x{}x{}", a.width(), a.height(), a.channels()),
            found: format!("{}x{}x{}", b.width(), b.height(), b.channels()),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "mse")?;
    if a.samples().is_empty() {
        return Err(Error::contract("mse of empty images"));
    }
    let sum: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.samples().len() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `f64::INFINITY` when the images are equal.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(peak * peak / mse)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Valid-window separable filter of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut mid = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            mid[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * mid[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every position where the full 11x11 Gaussian window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    if a.channels() != 1 {
        return Err(Error::contract(format!(
            "ssim needs single-channel images, got {} channels",
            a.channels()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.samples().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.samples().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &taps));
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ma, mb) = (mx[i], my[i]);
        let va = sxx[i] - ma * ma;
        let vb = syy[i] - mb * mb;
        let cov = sxy[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mx.len() as f64)
}

/// `"34.19/0.8941"`; infinite PSNR prints as `inf`.
pub struct PsnrSsim(pub f64, pub f64);

impl fmt::Display for PsnrSsim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf/{:.4}", self.1)
        } else {
            write!(f, "{:.2}/{:.4}", self.0, self.1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    pub scale: usize,
    pub method: String,
    pub rows: Vec<EvalRow>,
}

impl EvalResult {
    /// Arithmetic mean of the rows; infinite if any row is.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn cell(&self) -> PsnrSsim {
        PsnrSsim(self.mean_psnr(), self.mean_ssim())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Model and bicubic rows over one test set, plus images that could not be
/// evaluated and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub model: EvalResult,
    pub bicubic: EvalResult,
    pub failures: Vec<(String, String)>,
}

/// Scores one image: synthesizes the ILR input, runs the model, clamps the
/// output and compares both against the cropped ground truth on the channel
/// layout the model consumes (luminance for single-channel models).
pub fn evaluate_image(model: &Model<f32>, hr: &Image, spec: DegradationSpec) -> Result<(EvalRow, EvalRow)> {
    let hr = match (model.config().input_channels, hr.channels()) {
        (1, 3) => rgb_to_luminance(hr)?,
        (m, c) if m == c => hr.clone(),
        (m, c) => return Err(Error::contract(format!("model takes {m} channel(s), image has {c}"))),
    };
    let (ilr, hr) = make_ilr(&hr, spec)?;
    let out = model.forward(&ilr.to_tensor())?;
    let sr = Image::from_tensor(&out, 0)?.clamped();
    let row = |img: &Image| -> Result<EvalRow> {
        Ok(EvalRow {
            image: String::new(),
            psnr: psnr(img, &hr, 1.0)?,
            ssim: mean_channel_ssim(img, &hr)?,
        })
    };
    Ok((row(&sr)?, row(&ilr)?))
}

fn mean_channel_ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.channels() == 1 {
        return ssim(a, b);
    }
    let mut total = 0.0;
    for c in 0..a.channels() {
        total += ssim(&a.channel(c)?, &b.channel(c)?)?;
    }
    Ok(total / a.channels() as f64)
}

/// Evaluates `(name, image)` pairs; per-image failures are recorded rather
/// than aborting the run.
pub fn evaluate(
    model: &Model<f32>,
    images: &[(String, Image)],
    spec: DegradationSpec,
    dataset: &str,
    method: &str,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::contract("empty test set"));
    }
    let result = |method: &str| EvalResult {
        dataset: String::from(dataset),
        scale: spec.scale(),
        method: String::from(method),
        rows: Vec::new(),
    };
    let mut eval = Evaluation {
        model: result(method),
        bicubic: result("Bicubic"),
        failures: Vec::new(),
    };
    for (name, img) in images {
        match evaluate_image(model, img, spec) {
            Ok((mut m, mut b)) => {
                m.image.clone_from(name);
                b.image.clone_from(name);
                eval.model.rows.push(m);
                eval.bicubic.rows.push(b);
            }
            Err(e) => eval.failures.push((name.clone(), format!("{e}"))),
        }
    }
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 1, |_, _, _| rng.random::<f32>()).unwrap()
    }

    /// Non-separable SSIM: an explicit 2-D window at every valid position.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let n = 11;
        let mut win = vec![vec![0.0f64; n]; n];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..=a.height() - n {
            for x in 0..=a.width() - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = win[i][j] / total;
                        ma += w * a.get(x + j, y + i, 0) as f64;
                        mb += w * b.get(x + j, y + i, 0) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = win[i][j] / total;
                        let da = a.get(x + j, y + i, 0) as f64 - ma;
                        let db = b.get(x + j, y + i, 0) as f64 - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn psnr_of_a_uniform_16_level_shift() {
        let a = Image::filled(8, 8, 1, 100.0).unwrap();
        let b = Image::filled(8, 8, 1, 116.0).unwrap();
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 24.0494).abs() < 1e-3, "{p}");
        let expect = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((p - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_identical_images_is_flagged_infinite() {
        let a = random_image(1, 9, 9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format!("{}", PsnrSsim(f64::INFINITY, 1.0)), "inf/1.0000");
    }

    #[test]
    fn halving_peak_costs_six_db() {
        let (a, b) = (random_image(2, 16, 16), random_image(3, 16, 16));
        let d = psnr(&a, &b, 1.0).unwrap() - psnr(&a, &b, 0.5).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((d - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let (a, b) = (random_image(2, 16, 16), random_image(3, 16, 15));
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        for seed in 0..5 {
            let a = random_image(seed, 20 + seed as usize, 13);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_matches_the_windowed_oracle() {
        for seed in 0..3 {
            let a = random_image(10 + seed, 24, 19);
            let b = random_image(20 + seed, 24, 19);
            let (fast, slow) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn anti_correlated_images_have_negative_ssim() {
        let a = Image::from_fn(32, 32, 1, |x, y, _| if (x / 2 + y / 2) % 2 == 0 { 0.9 } else { 0.1 }).unwrap();
        let inv = Image::from_fn(32, 32, 1, |x, y, _| 1.0 - a.get(x, y, 0)).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_needs_a_full_window() {
        let a = random_image(1, 10, 30);
        assert!(ssim(&a, &a).is_err());
        let rgb = Image::filled(16, 16, 3, 0.5).unwrap();
        assert!(ssim(&rgb, &rgb).is_err());
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn table_cell_format() {
        assert_eq!(format!("{}", PsnrSsim(34.1912, 0.894_13)), "34.19/0.8941");
    }

    fn identity_model() -> Model<f32> {
        let cfg = ModelConfig {
            channels: 4,
            blocks_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut m = Model::build(&cfg).unwrap();
        m.zero_residual_branches();
        m
    }

    #[test]
    fn identity_model_rows_equal_bicubic_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::from_fn(100, 104, 3, |_, _, _| rng.random::<f32>()).unwrap();
        let spec = DegradationSpec::new(2).unwrap();
        let eval = evaluate(&identity_model(), &[(String::from("only"), img)], spec, "set", "DMCN").unwrap();
        assert_eq!(eval.model.rows.len(), 1);
        assert_eq!(eval.model.rows[0].psnr, eval.bicubic.rows[0].psnr);
        assert_eq!(eval.model.rows[0].ssim, eval.bicubic.rows[0].ssim);
        assert_eq!(eval.model.mean_psnr(), eval.model.rows[0].psnr);
        assert!(eval.bicubic.mean_psnr() > 0.0 && eval.bicubic.mean_psnr().is_finite());
    }

    #[test]
    fn small_images_fail_without_aborting() {
        let spec = DegradationSpec::new(2).unwrap();
        let ok = Image::filled(96, 96, 1, 0.5).unwrap();
        let tiny = Image::filled(20, 20, 1, 0.5).unwrap();
        let eval = evaluate(
            &identity_model(),
            &[(String::from("ok"), ok), (String::from("tiny"), tiny)],
            spec,
            "set",
            "DMCN",
        )
        .unwrap();
        assert_eq!(eval.model.rows.len(), 1);
        assert_eq!(eval.failures.len(), 1);
        assert_eq!(eval.failures[0].0, "tiny");
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_are_symmetric(s1 in 0u64..500, s2 in 0u64..500) {
            let (a, b) = (random_image(s1, 16, 14), random_image(s2 + 1000, 16, 14));
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
