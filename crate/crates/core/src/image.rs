//! Images in `[0, 1]`, bicubic resampling and the degradation pipeline that
//! turns a high-resolution image into the network's interpolated input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Side of a training patch.
pub const PATCH_SIZE: usize = 48;

/// Interleaved row-major samples, `channels` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if samples.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                op: "Image::new",
                expected: format!("{} samples for {width}x{height}x{channels}", width * height * channels),
                found: format!("{} samples", samples.len()),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// `f(x, y, channel)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, samples)
    }

    /// 8-bit samples scaled by `1/255`.
    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Rounds to the nearest 8-bit level after clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.samples
            .iter()
            .map(|&s| libm::roundf(s.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// The `w x h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::contract(format!(
                "crop {w}x{h} at ({x}, {y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut samples = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            samples.extend_from_slice(&self.samples[start..start + w * c]);
        }
        Image::new(w, h, c, samples)
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Result<Image> {
        if c >= self.channels {
            return Err(Error::contract(format!(
                "channel {c} of a {}-channel image",
                self.channels
            )));
        }
        let samples = self.samples.iter().skip(c).step_by(self.channels).copied().collect();
        Image::new(self.width, self.height, 1, samples)
    }

    /// Interleaves equally sized single-channel images.
    pub fn merge(planes: &[&Image]) -> Result<Image> {
        let first = planes.first().ok_or_else(|| Error::contract("no planes to merge"))?;
        if planes
            .iter()
            .any(|p| p.channels != 1 || p.width != first.width || p.height != first.height)
        {
            return Err(Error::contract(
                "merged planes must be single-channel and equally sized",
            ));
        }
        let n = first.width * first.height;
        let mut samples = Vec::with_capacity(n * planes.len());
        for i in 0..n {
            samples.extend(planes.iter().map(|p| p.samples[i]));
        }
        Image::new(first.width, first.height, planes.len(), samples)
    }

    pub fn clamped(&self) -> Image {
        Image {
            samples: self.samples.iter().map(|s| s.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// A `1 x channels x height x width` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, self.channels, self.height, self.width), |_, c, y, x| {
            T::from_f64(self.get(x, y, c) as f64)
        })
    }

    /// Batch item `n` of a `N x C x H x W` tensor, `C` in `{1, 3}`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::contract(format!("batch item {n} of {s}")));
        }
        Image::from_fn(s.w, s.h, s.c, |x, y, c| t.get(n, c, y, x).to_f64() as f32)
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four source indices (edge-clamped) and weights for each output index,
/// with output centers mapped by `src = (dst + 0.5) * in / out - 0.5`.
fn contributions(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let base = libm::floor(src) as isize - 1;
            let mut idx = [0usize; 4];
            let mut w = [0.0f64; 4];
            for k in 0..4 {
                let i = base + k as isize;
                idx[k] = i.clamp(0, input as isize - 1) as usize;
                w[k] = cubic_weight(src - i as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling, edge-clamped, with the result clamped to
/// `[0, 1]`. No low-pass prefilter is applied when shrinking.
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::contract(format!(
            "bicubic target {out_w}x{out_h} has a zero dimension"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::contract("cannot resample an empty image"));
    }
    let c = img.channels;
    let cols = contributions(img.width, out_w);
    let rows = contributions(img.height, out_h);
    // horizontal pass, kept in f64
    let mut mid = vec![0.0f64; img.height * out_w * c];
    for y in 0..img.height {
        for (x, (idx, w)) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * img.get(idx[k], y, ch) as f64;
                }
                mid[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    let mut samples = vec![0.0f32; out_w * out_h * c];
    for (y, (idx, w)) in rows.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * mid[(idx[k] * out_w + x) * c + ch];
                }
                samples[(y * out_w + x) * c + ch] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_w, out_h, c, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradationSpec {
    scale: usize,
}

impl DegradationSpec {
    pub fn new(scale: usize) -> Result<Self> {
        if !(2..=4).contains(&scale) {
            return Err(Error::contract(format!("scale must be 2, 3 or 4, got {scale}")));
        }
        Ok(DegradationSpec { scale })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Cropped dims are multiples of this: the scale and the hourglass
    /// divisor 4.
    pub fn crop_multiple(&self) -> usize {
        let s = self.scale;
        s * 4 / gcd(s, 4)
    }

    /// Smallest accepted side of a high-resolution image.
    pub fn min_side(&self) -> usize {
        self.scale * PATCH_SIZE
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Top-left crop to dims that are multiples of `m`.
pub fn crop_to_multiple(img: &Image, m: usize) -> Result<Image> {
    let (w, h) = (img.width / m * m, img.height / m * m);
    if w == 0 || h == 0 {
        return Err(Error::contract(format!(
            "{}x{} image has no {m}x{m} aligned region",
            img.width, img.height
        )));
    }
    img.crop(0, 0, w, h)
}

/// Low-resolution image and its bicubic re-enlargement.
#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub lr: Image,
    pub ilr: Image,
}

/// Bicubic downscale of `hr` by the scale, then bicubic upscale back to the
/// size of `hr`, whose dims must be multiples of the scale.
pub fn degrade(hr: &Image, spec: DegradationSpec) -> Result<Degraded> {
    let s = spec.scale;
    if !hr.width.is_multiple_of(s) || !hr.height.is_multiple_of(s) {
        return Err(Error::contract(format!(
            "{}x{} is not divisible by scale {s}",
            hr.width, hr.height
        )));
    }
    let lr = bicubic_resize(hr, hr.width / s, hr.height / s)?;
    let ilr = bicubic_resize(&lr, hr.width, hr.height)?;
    Ok(Degraded { lr, ilr })
}

/// Crops `hr` to [`DegradationSpec::crop_multiple`] and synthesizes its
/// interpolated low-resolution counterpart. Returns `(ilr, hr_cropped)`.
pub fn make_ilr(hr: &Image, spec: DegradationSpec) -> Result<(Image, Image)> {
    let min = spec.min_side();
    if hr.width < min || hr.height < min {
        return Err(Error::contract(format!(
            "{}x{} image is too small for scale {}: minimum size is {min}x{min}",
            hr.width, hr.height, spec.scale
        )));
    }
    let cropped = crop_to_multiple(hr, spec.crop_multiple())?;
    let Degraded { ilr, .. } = degrade(&cropped, spec)?;
    Ok((ilr, cropped))
}

/// A high-resolution patch and the interpolated patch at the same offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hr: Image,
    pub ilr: Image,
    pub source: String,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<PatchPair>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn extend(&mut self, other: PatchSet) {
        self.patches.extend(other.patches);
    }
}

/// Non-overlapping `size x size` tiles from the top-left, row by row;
/// partial tiles at the right and bottom edges are dropped.
pub fn extract_patches(hr: &Image, ilr: &Image, size: usize, source: &str) -> Result<PatchSet> {
    if (hr.width, hr.height, hr.channels) != (ilr.width, ilr.height, ilr.channels) {
        return Err(Error::ShapeMismatch {
            op: "extract_patches",
            expected: format!("{}x{}x{}", hr.width, hr.height, hr.channels),
            found: format!("{}x{}x{}", ilr.width, ilr.height, ilr.channels),
        });
    }
    if size == 0 {
        return Err(Error::contract("patch size must be positive"));
    }
    let mut patches = Vec::new();
    for ty in 0..hr.height / size {
        for tx in 0..hr.width / size {
            let (x, y) = (tx * size, ty * size);
            patches.push(PatchPair {
                hr: hr.crop(x, y, size, size)?,
                ilr: ilr.crop(x, y, size, size)?,
                source: String::from(source),
                x,
                y,
            });
        }
    }
    Ok(PatchSet { patches })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit<P> {
    pub train: Vec<P>,
    pub test: Vec<P>,
    pub seed: u64,
}

/// Shuffles the sorted paths with a ChaCha stream keyed by `seed` and sends
/// the first `round(ratio * N)` to training. Both lists come back sorted.
pub fn split_dataset<P: Clone + Ord>(paths: &[P], ratio: f64, seed: u64) -> Result<DatasetSplit<P>> {
    if paths.is_empty() {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order = paths.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::round(ratio * order.len() as f64) as usize;
    let mut test = order.split_off(n_train);
    let mut train = order;
    train.sort();
    test.sort();
    Ok(DatasetSplit { train, test, seed })
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_luminance(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::contract(format!(
            "luminance needs an RGB image, got {} channel(s)",
            img.channels
        )));
    }
    let samples = img
        .samples
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    Image::new(img.width, img.height, 1, samples)
}

/// Full-range YCbCr with chroma centered on 0.5; the luma plane equals
/// [`rgb_to_luminance`].
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    let y = rgb_to_luminance(img)?;
    let mut samples = Vec::with_capacity(img.samples.len());
    for (p, &l) in img.samples.chunks_exact(3).zip(&y.samples) {
        samples.push(l);
        samples.push(0.5 + (p[2] - l) / (2.0 * (1.0 - LUMA[2])));
        samples.push(0.5 + (p[0] - l) / (2.0 * (1.0 - LUMA[0])));
    }
    Image::new(img.width, img.height, 3, samples)
}

/// Inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::contract("YCbCr conversion needs 3 channels"));
    }
    let mut samples = Vec::with_capacity(img.samples.len());
    for p in img.samples.chunks_exact(3) {
        let (l, cb, cr) = (p[0], p[1] - 0.5, p[2] - 0.5);
        let r = l + 2.0 * (1.0 - LUMA[0]) * cr;
        let b = l + 2.0 * (1.0 - LUMA[2]) * cb;
        let g = (l - LUMA[0] * r - LUMA[2] * b) / LUMA[1];
        samples.extend([r, g, b].map(|v| v.clamp(0.0, 1.0)));
    }
    Image::new(img.width, img.height, 3, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random::<f32>()).unwrap()
    }

    /// Direct 2-D summation over the 4x4 neighbourhood of every output
    /// sample, with its own coordinate mapping and kernel.
    fn bicubic_oracle(img: &Image, out_w: usize, out_h: usize) -> Vec<f64> {
        fn keys(x: f64) -> f64 {
            let x = x.abs();
            let a = -0.5;
            if x < 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        }
        let (sx, sy) = (img.width() as f64 / out_w as f64, img.height() as f64 / out_h as f64);
        let mut out = Vec::new();
        for oy in 0..out_h {
            for ox in 0..out_w {
                for c in 0..img.channels() {
                    let (fx, fy) = ((ox as f64 + 0.5) * sx - 0.5, (oy as f64 + 0.5) * sy - 0.5);
                    let mut acc = 0.0;
                    for j in (fy.floor() as i64 - 1)..=(fy.floor() as i64 + 2) {
                        for i in (fx.floor() as i64 - 1)..=(fx.floor() as i64 + 2) {
                            let xi = i.clamp(0, img.width() as i64 - 1) as usize;
                            let yj = j.clamp(0, img.height() as i64 - 1) as usize;
                            acc += keys(fx - i as f64) * keys(fy - j as f64) * img.get(xi, yj, c) as f64;
                        }
                    }
                    out.push(acc.clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    #[test]
    fn kernel_weights_partition_unity() {
        for i in 0..100 {
            let f = i as f64 / 100.0;
            let s: f64 = (-1..=2).map(|k| cubic_weight(f - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(37, 23, 3, 0.4).unwrap();
        for (w, h) in [(74, 46), (12, 7), (37, 23), (1, 1), (100, 3)] {
            let out = bicubic_resize(&img, w, h).unwrap();
            assert_eq!((out.width(), out.height()), (w, h));
            assert!(out.samples().iter().all(|&s| s == 0.4), "{w}x{h}");
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        let img = Image::from_fn(32, 8, 1, |x, _, _| 0.1 + 0.02 * x as f32).unwrap();
        let out = bicubic_resize(&img, 64, 8).unwrap();
        // output x maps to source x/2 - 0.25; taps reach 2 further out
        for y in 0..8 {
            for x in 4..60 {
                let expect = 0.1 + 0.02 * (x as f64 / 2.0 - 0.25);
                assert!((out.get(x, y, 0) as f64 - expect).abs() < 1e-5, "x {x}");
            }
        }
    }

    #[test]
    fn matches_direct_summation() {
        let img = random_image(3, 29, 17, 3);
        for (w, h) in [(58, 34), (9, 5), (29, 51), (14, 17)] {
            let fast = bicubic_resize(&img, w, h).unwrap();
            let oracle = bicubic_oracle(&img, w, h);
            for (a, b) in fast.samples().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() < 1e-6, "{w}x{h}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let img = Image::filled(4, 4, 1, 0.0).unwrap();
        assert!(bicubic_resize(&img, 0, 4).is_err());
        assert!(bicubic_resize(&img, 4, 0).is_err());
    }

    #[test]
    fn round_trip_sizing_for_scale_three() {
        let img = random_image(1, 256, 256, 1);
        let lr = bicubic_resize(&img, 256 / 3, 256 / 3).unwrap();
        assert_eq!((lr.width(), lr.height()), (85, 85));
        let back = bicubic_resize(&lr, lr.width() * 3, lr.height() * 3).unwrap();
        assert_eq!((back.width(), back.height()), (255, 255));
    }

    #[test]
    fn make_ilr_scale_two() {
        let img = random_image(2, 256, 256, 1);
        let spec = DegradationSpec::new(2).unwrap();
        let (ilr, hr) = make_ilr(&img, spec).unwrap();
        assert_eq!((ilr.width(), ilr.height()), (256, 256));
        assert_eq!(hr, img);
        let d = degrade(&hr, spec).unwrap();
        assert_eq!((d.lr.width(), d.lr.height()), (128, 128));
        assert_eq!(d.ilr, ilr);
    }

    #[test]
    fn make_ilr_crops_for_scale_and_hourglass() {
        let img = random_image(4, 151, 160, 1);
        let spec = DegradationSpec::new(3).unwrap();
        let (ilr, hr) = make_ilr(&img, spec).unwrap();
        assert_eq!((hr.width(), hr.height()), (144, 156));
        assert_eq!((ilr.width(), ilr.height()), (144, 156));
        assert_eq!(hr.width() % 12, 0);
    }

    #[test]
    fn make_ilr_of_constant_is_exact() {
        let img = Image::filled(100, 100, 1, 0.73).unwrap();
        let (ilr, hr) = make_ilr(&img, DegradationSpec::new(2).unwrap()).unwrap();
        assert_eq!(ilr, hr);
    }

    #[test]
    fn make_ilr_names_the_minimum() {
        let img = Image::filled(100, 200, 1, 0.0).unwrap();
        let err = make_ilr(&img, DegradationSpec::new(3).unwrap()).unwrap_err();
        assert!(format!("{err}").contains("144x144"), "{err}");
    }

    #[test]
    fn scales_outside_two_to_four_are_rejected() {
        for s in [0, 1, 5, 8] {
            assert!(DegradationSpec::new(s).is_err());
        }
        assert_eq!(DegradationSpec::new(3).unwrap().crop_multiple(), 12);
        assert_eq!(DegradationSpec::new(2).unwrap().crop_multiple(), 4);
        assert_eq!(DegradationSpec::new(4).unwrap().crop_multiple(), 4);
    }

    #[test]
    fn patch_counts() {
        let img = random_image(5, 256, 256, 1);
        assert_eq!(extract_patches(&img, &img, 48, "a").unwrap().len(), 25);
        let one = random_image(6, 48, 48, 1);
        let set = extract_patches(&one, &one, 48, "b").unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.patches[0].hr, one);
        let thin = random_image(7, 47, 480, 1);
        assert!(extract_patches(&thin, &thin, 48, "c").unwrap().is_empty());
    }

    #[test]
    fn patches_must_pair_equal_dims() {
        let a = random_image(8, 96, 96, 1);
        let b = random_image(8, 96, 48, 1);
        assert!(extract_patches(&a, &b, 48, "x").is_err());
    }

    #[test]
    fn split_2100() {
        let paths: Vec<u32> = (0..2100).collect();
        let s = split_dataset(&paths, 0.8, 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1680, 420));
        assert_eq!(s, split_dataset(&paths, 0.8, 9).unwrap());
        assert_ne!(s.train, split_dataset(&paths, 0.8, 10).unwrap().train);
        let two = split_dataset(&["a", "b"], 0.5, 0).unwrap();
        assert_eq!((two.train.len(), two.test.len()), (1, 1));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_dataset::<u8>(&[], 0.8, 0).is_err());
        assert!(split_dataset(&[1, 2], 0.0, 0).is_err());
        assert!(split_dataset(&[1, 2], 1.0, 0).is_err());
    }

    #[test]
    fn luminance_readouts() {
        let white = Image::filled(2, 2, 3, 1.0).unwrap();
        assert!(rgb_to_luminance(&white)
            .unwrap()
            .samples()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-6));
        let green = Image::from_fn(1, 1, 3, |_, _, c| if c == 1 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(rgb_to_luminance(&green).unwrap().samples(), &[0.587]);
        let gray = Image::filled(3, 1, 3, 0.25).unwrap();
        for &v in rgb_to_luminance(&gray).unwrap().samples() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        assert!(rgb_to_luminance(&Image::filled(1, 1, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ycbcr_round_trip() {
        let img = random_image(11, 9, 7, 3);
        let ycc = rgb_to_ycbcr(&img).unwrap();
        assert_eq!(ycc.channel(0).unwrap(), rgb_to_luminance(&img).unwrap());
        let back = ycbcr_to_rgb(&ycc).unwrap();
        for (a, b) in back.samples().iter().zip(img.samples()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = random_image(12, 5, 4, 3);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), Shape::new(1, 3, 4, 5));
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn u8_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let img = Image::from_u8(16, 16, 1, &bytes).unwrap();
        assert_eq!(img.to_u8(), bytes);
    }

    proptest! {
        #[test]
        fn resized_samples_stay_in_unit_range(seed in 0u64..1000, w in 1usize..20, h in 1usize..20) {
            let img = random_image(seed, 7, 5, 1);
            let out = bicubic_resize(&img, w, h).unwrap();
            prop_assert!(out.samples().iter().all(|&s| (0.0..=1.0).contains(&s)));
        }

        #[test]
        fn patches_reassemble_the_covered_region(seed in 0u64..100, w in 1usize..150, h in 1usize..150) {
            let img = random_image(seed, w, h, 1);
            let set = extract_patches(&img, &img, 48, "p").unwrap();
            prop_assert_eq!(set.len(), (w / 48) * (h / 48));
            for p in &set.patches {
                for y in 0..48 {
                    for x in 0..48 {
                        prop_assert_eq!(p.hr.get(x, y, 0), img.get(p.x + x, p.y + y, 0));
                    }
                }
            }
        }

        #[test]
        fn split_partitions(n in 1usize..300, ratio in 0.01f64..0.99, seed in 0u64..50) {
            let paths: Vec<usize> = (0..n).collect();
            let s = split_dataset(&paths, ratio, seed).unwrap();
            prop_assert_eq!(s.train.len(), (ratio * n as f64).round() as usize);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, paths);
        }

        #[test]
        fn ilr_dims_satisfy_the_model(w in 96usize..200, h in 96usize..200, scale in 2usize..=4) {
            let spec = DegradationSpec::new(scale).unwrap();
            prop_assume!(w >= spec.min_side() && h >= spec.min_side());
            let img = Image::filled(w, h, 1, 0.5).unwrap();
            let (ilr, hr) = make_ilr(&img, spec).unwrap();
            prop_assert_eq!(ilr.width() % 4, 0);
            prop_assert_eq!(ilr.height() % 4, 0);
            prop_assert_eq!(hr.width() % scale, 0);
            prop_assert_eq!((ilr.width(), ilr.height()), (hr.width(), hr.height()));
        }
    }
}
