//! PNG decoding/encoding, directory listing, patch manifests and patch files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dmcn_core::image::{Image, PatchPair, PatchSet};
use dmcn_core::{Shape, Tensor};
use image::{DynamicImage, ExtendedColorType};

use crate::checkpoint::{StoredTensor, TensorFile};
use crate::error::{Error, Result};

/// Decodes a PNG as grayscale or RGB with samples in `[0, 1]`. Alpha is
/// dropped and 16-bit data is reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Image> {
    let err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let decoded = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => Image::from_u8(w, h, 1, img.to_luma8().as_raw()),
        _ => Image::from_u8(w, h, 3, img.to_rgb8().as_raw()),
    };
    decoded.map_err(|e| err(e.to_string()))
}

/// Writes an 8-bit grayscale or RGB PNG, rounding clamped samples.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    image::save_buffer_with_format(
        path,
        &img.to_u8(),
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `.png` files directly inside `dir`, sorted by path.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Test images given either as a directory of PNGs or as a text file with
/// one path per line.
pub fn resolve_images(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_dir() {
        list_pngs(source)
    } else {
        read_list(source)
    }
}

pub fn write_list(path: &Path, items: &[PathBuf]) -> Result<()> {
    let mut s = String::new();
    for p in items {
        writeln!(s, "{}", p.display()).expect("writing to a String");
    }
    std::fs::write(path, s).map_err(Error::io(path))
}

pub fn read_list(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(PathBuf::from)
        .collect())
}

/// One manifest line per patch: `source x y`.
pub fn manifest_text(set: &PatchSet) -> String {
    let mut s = String::new();
    for p in &set.patches {
        writeln!(s, "{} {} {}", p.source, p.x, p.y).expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: String,
    pub x: usize,
    pub y: usize,
}

/// Parses manifest text; the source path may contain spaces.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Config {
            line: i + 1,
            message: format!("manifest line {line:?} is not `path x y`"),
        };
        let mut parts = line.rsplitn(3, ' ');
        let y = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let x = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let source = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?.to_string();
        out.push(ManifestEntry { source, x, y });
    }
    Ok(out)
}

/// Stacks the patches into `hr` and `ilr` tensors of shape `N x C x S x S`.
pub fn patches_to_file(set: &PatchSet) -> Result<TensorFile> {
    let first = set.patches.first().ok_or_else(|| Error::usage("no patches to store"))?;
    let (c, s) = (first.hr.channels(), first.hr.width());
    let mut hr = Vec::with_capacity(set.len() * c * s * s);
    let mut ilr = Vec::with_capacity(hr.capacity());
    for p in &set.patches {
        hr.extend_from_slice(p.hr.to_tensor::<f32>().data());
        ilr.extend_from_slice(p.ilr.to_tensor::<f32>().data());
    }
    let dims = vec![set.len(), c, s, s];
    let mut file = TensorFile::default();
    file.push_meta("patches", set.len());
    file.tensors.push(StoredTensor::new("hr", dims.clone(), hr));
    file.tensors.push(StoredTensor::new("ilr", dims, ilr));
    Ok(file)
}

/// The `(ilr, hr)` tensors of a patch file.
pub fn patches_from_file(file: &TensorFile) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let get = |name: &str| -> Result<Tensor<f32>> {
        let t = file
            .tensor(name)
            .ok_or_else(|| Error::usage(format!("patch file lacks tensor {name}")))?;
        let [n, c, h, w] = t.dims[..] else {
            return Err(Error::TensorMismatch {
                tensor: name.into(),
                expected: "rank 4".into(),
                found: format!("rank {}", t.dims.len()),
            });
        };
        Ok(Tensor::from_vec(Shape::new(n, c, h, w), t.data.clone())?)
    };
    let (ilr, hr) = (get("ilr")?, get("hr")?);
    if ilr.shape() != hr.shape() {
        return Err(Error::TensorMismatch {
            tensor: "ilr".into(),
            expected: format!("{}", hr.shape()),
            found: format!("{}", ilr.shape()),
        });
    }
    Ok((ilr, hr))
}

/// Rebuilds patch pairs, e.g. for inspection; provenance comes from the
/// manifest.
pub fn patch_pairs(ilr: &Tensor<f32>, hr: &Tensor<f32>, manifest: &[ManifestEntry]) -> Result<PatchSet> {
    if manifest.len() != hr.shape().n {
        return Err(Error::usage(format!(
            "manifest lists {} patches, patch file holds {}",
            manifest.len(),
            hr.shape().n
        )));
    }
    let mut patches = Vec::with_capacity(manifest.len());
    for (i, m) in manifest.iter().enumerate() {
        patches.push(PatchPair {
            hr: Image::from_tensor(hr, i)?,
            ilr: Image::from_tensor(ilr, i)?,
            source: m.source.clone(),
            x: m.x,
            y: m.y,
        });
    }
    Ok(PatchSet { patches })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}
