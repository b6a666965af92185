//! The subcommands as library functions. Each writes its artifacts under an
//! output directory and returns what it would print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dmcn_core::image::{
    bicubic_resize, crop_to_multiple, degrade, extract_patches, make_ilr, rgb_to_luminance, rgb_to_ycbcr,
    split_dataset, ycbcr_to_rgb, DegradationSpec, Image, PatchSet, PATCH_SIZE,
};
use dmcn_core::metrics::{evaluate, Evaluation};
use dmcn_core::model::{estimate_flat_flops, estimate_flops, Model, ModelConfig};
use dmcn_core::training::{EpochRecord, Trainer, TrainingData};

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, TensorFile};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    ensure_dir, list_pngs, manifest_text, parse_manifest, patches_from_file, patches_to_file, read_png, resolve_images,
    write_list, write_png,
};
use crate::report::{self, aligned};

pub const MANIFEST: &str = "manifest.txt";
pub const PATCHES: &str = "patches.bin";
pub const SUMMARY: &str = "summary.txt";
pub const TRAIN_LIST: &str = "train.txt";
pub const TEST_LIST: &str = "test.txt";
pub const HISTORY: &str = "history.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// Progress sink for long-running commands.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Brings an image to the channel count a model consumes.
fn to_channels(img: Image, channels: usize) -> Result<Image> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img),
        (3, 1) => Ok(rgb_to_luminance(&img)?),
        (1, 3) => Ok(Image::merge(&[&img, &img, &img])?),
        (a, b) => Err(Error::usage(format!(
            "cannot convert {a}-channel image to {b} channels"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub images: usize,
    pub train: usize,
    pub test: usize,
    pub patches: usize,
    /// Training images that yielded nothing, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl PrepareSummary {
    pub fn text(&self, cfg: &RunConfig) -> String {
        format!(
            "images {}\ntrain {}\ntest {}\npatches {}\nskipped {}\nscale {}\nseed {}\n",
            self.images,
            self.train,
            self.test,
            self.patches,
            self.skipped.len(),
            cfg.scale,
            cfg.seed
        )
    }
}

/// Splits the PNGs of `in_dir`, cuts the training images into patch pairs
/// and writes the split lists, the manifest, the patch file and a summary.
pub fn prepare(cfg: &RunConfig, in_dir: &Path, out_dir: &Path) -> Result<PrepareSummary> {
    let spec = cfg.degradation()?;
    let model = cfg.model_config()?;
    let paths = list_pngs(in_dir)?;
    if paths.is_empty() {
        return Err(Error::usage(format!("no PNG images in {}", in_dir.display())));
    }
    let split = split_dataset(&paths, cfg.split_ratio, cfg.seed)?;
    ensure_dir(out_dir)?;
    write_list(&out_dir.join(TRAIN_LIST), &split.train)?;
    write_list(&out_dir.join(TEST_LIST), &split.test)?;
    let mut set = PatchSet::default();
    let mut skipped = Vec::new();
    for path in &split.train {
        let hr = to_channels(read_png(path)?, model.input_channels)?;
        match make_ilr(&hr, spec) {
            Ok((ilr, hr)) => set.extend(extract_patches(&hr, &ilr, PATCH_SIZE, &path.display().to_string())?),
            Err(e) => skipped.push((path.clone(), e.to_string())),
        }
    }
    std::fs::write(out_dir.join(MANIFEST), manifest_text(&set)).map_err(Error::io(out_dir.join(MANIFEST)))?;
    let file = if set.is_empty() {
        let mut f = TensorFile::default();
        f.push_meta("patches", 0);
        let dims = vec![0, model.input_channels, PATCH_SIZE, PATCH_SIZE];
        f.tensors
            .push(crate::checkpoint::StoredTensor::new("hr", dims.clone(), Vec::new()));
        f.tensors
            .push(crate::checkpoint::StoredTensor::new("ilr", dims, Vec::new()));
        f
    } else {
        patches_to_file(&set)?
    };
    file.write(&out_dir.join(PATCHES))?;
    let summary = PrepareSummary {
        images: paths.len(),
        train: split.train.len(),
        test: split.test.len(),
        patches: set.len(),
        skipped,
    };
    let path = out_dir.join(SUMMARY);
    std::fs::write(&path, summary.text(cfg)).map_err(Error::io(&path))?;
    Ok(summary)
}

/// Patches written by [`prepare`] into `dir`.
pub fn load_prepared(dir: &Path) -> Result<TrainingData> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::usage(format!(
            "missing patch manifest {}; run prepare first",
            manifest_path.display()
        )));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
    let manifest = parse_manifest(&text)?;
    let (ilr, hr) = patches_from_file(&TensorFile::read(&dir.join(PATCHES))?)?;
    if manifest.len() != hr.shape().n {
        return Err(Error::usage(format!(
            "manifest lists {} patches, {} holds {}",
            manifest.len(),
            PATCHES,
            hr.shape().n
        )));
    }
    if manifest.is_empty() {
        return Err(Error::usage(format!("{} lists no patches", manifest_path.display())));
    }
    Ok(TrainingData::new(ilr, hr)?)
}

fn check_data_channels(data: &TrainingData, model: &ModelConfig) -> Result<()> {
    let c = data.inputs.shape().c;
    if c != model.input_channels {
        return Err(Error::usage(format!(
            "patches have {c} channel(s), the model takes {}",
            model.input_channels
        )));
    }
    Ok(())
}

pub fn epoch_checkpoint(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.bin"))
}

/// Trains on the prepared patches in `data_dir`, optionally resuming from a
/// checkpoint. After every epoch it writes `checkpoints/epoch_NNNN.bin`,
/// `checkpoint.bin` (the latest) and `history.csv`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, log: Log<'_>) -> Result<Vec<EpochRecord>> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let data = load_prepared(cfg.require_data_dir()?)?;
    check_data_channels(&data, &model_cfg)?;
    let out = cfg.require_out_dir()?;
    ensure_dir(&out.join("checkpoints"))?;
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint_for(path, &model_cfg)?;
            ckpt.train_config.epochs = train_cfg.epochs;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(Model::build(&model_cfg)?, train_cfg)?,
    };
    log(&format!(
        "training on {} patches, {} parameters, {}",
        data.len(),
        trainer.model().parameter_count(),
        dmcn_core::training::describe(trainer.config())
    ));
    while trainer.epoch() < trainer.config().epochs {
        let r = trainer.run_epoch(&data, |_, _| {})?;
        let ckpt = trainer.checkpoint();
        save_checkpoint(&epoch_checkpoint(out, r.epoch + 1), &ckpt)?;
        save_checkpoint(&out.join(CHECKPOINT), &ckpt)?;
        report::write_history_csv(&out.join(HISTORY), trainer.history())?;
        log(&format!(
            "epoch {} lr {} loss {:.6} steps {}",
            r.epoch + 1,
            r.lr,
            r.loss,
            r.steps
        ));
    }
    Ok(trainer.history().to_vec())
}

/// Model stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(path)?;
    Ok(Model::with_params(&ckpt.model_config, ckpt.params)?)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub evaluation: Evaluation,
    pub table: String,
}

/// Scores a checkpoint against bicubic on the images in `source` (a PNG
/// directory or a list file). Writes `eval_images.csv`,
/// `eval_summary.csv` and `eval_table.txt` into `out_dir`.
pub fn eval(checkpoint: &Path, source: &Path, scale: usize, dataset: &str, out_dir: &Path) -> Result<EvalOutcome> {
    let model = load_model(checkpoint)?;
    let spec = DegradationSpec::new(scale)?;
    let paths = resolve_images(source)?;
    if paths.is_empty() {
        return Err(Error::usage(format!("no test images in {}", source.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    let mut unreadable = Vec::new();
    for p in &paths {
        match read_png(p) {
            Ok(img) => images.push((p.display().to_string(), img)),
            Err(e) => unreadable.push((p.display().to_string(), e.to_string())),
        }
    }
    if images.is_empty() {
        return Err(Error::usage(format!(
            "none of the {} test images could be read",
            paths.len()
        )));
    }
    let mut evaluation = evaluate(&model, &images, spec, dataset, "DMCN")?;
    evaluation.failures.extend(unreadable);
    ensure_dir(out_dir)?;
    let results = [&evaluation.bicubic, &evaluation.model];
    report::write_eval_images_csv(&out_dir.join("eval_images.csv"), &evaluation)?;
    report::write_eval_summary_csv(&out_dir.join("eval_summary.csv"), &results)?;
    let mut table = if evaluation.model.rows.is_empty() {
        String::from("no image could be evaluated\n")
    } else {
        report::eval_table(&results)
    };
    for (name, why) in &evaluation.failures {
        writeln!(table, "failed {name}: {why}").expect("writing to a String");
    }
    let path = out_dir.join("eval_table.txt");
    std::fs::write(&path, &table).map_err(Error::io(&path))?;
    Ok(EvalOutcome { evaluation, table })
}

/// Edge-replicates `img` on the right and bottom up to multiples of `m`.
fn pad_to_multiple(img: &Image, m: usize) -> Image {
    let (w, h) = (img.width().div_ceil(m) * m, img.height().div_ceil(m) * m);
    Image::from_fn(w, h, img.channels(), |x, y, c| {
        img.get(x.min(img.width() - 1), y.min(img.height() - 1), c)
    })
    .expect("non-empty image")
}

fn run_model(model: &Model<f32>, ilr: &Image) -> Result<Image> {
    let m = model.config().spatial_divisor();
    let padded = pad_to_multiple(ilr, m);
    let out = Image::from_tensor(&model.forward(&padded.to_tensor())?, 0)?.clamped();
    Ok(out.crop(0, 0, ilr.width(), ilr.height())?)
}

/// Super-resolves one image and writes an 8-bit PNG.
///
/// By default the input is treated as ground truth: it is cropped to
/// multiples of the scale and 4, degraded, re-enlarged and restored, so the
/// output has the cropped input size. With `assume_lr` the input itself is
/// the low-resolution image and the output is `scale` times larger.
/// Single-channel models restore the luminance of colour images; chroma is
/// the bicubic enlargement.
pub fn sr(checkpoint: &Path, input: &Path, output: &Path, scale: usize, assume_lr: bool) -> Result<(usize, usize)> {
    let model = load_model(checkpoint)?;
    let spec = DegradationSpec::new(scale)?;
    let img = read_png(input)?;
    let luma_only = model.config().input_channels == 1 && img.channels() == 3;
    let working = if luma_only {
        rgb_to_ycbcr(&img)?
    } else {
        to_channels(img, model.config().input_channels)?
    };
    let ilr = if assume_lr {
        bicubic_resize(&working, working.width() * scale, working.height() * scale)?
    } else {
        let hr = crop_to_multiple(&working, spec.crop_multiple())?;
        degrade(&hr, spec)?.ilr
    };
    let restored = if luma_only {
        let y = run_model(&model, &ilr.channel(0)?)?;
        ycbcr_to_rgb(&Image::merge(&[&y, &ilr.channel(1)?, &ilr.channel(2)?])?)?.clamped()
    } else {
        run_model(&model, &ilr)?
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_png(output, &restored)?;
    Ok((restored.width(), restored.height()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoLocal,
    NoGlobal,
    NoMemory,
    NoHourglass,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLocal,
        Variant::NoGlobal,
        Variant::NoMemory,
        Variant::NoHourglass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocal => "no_local",
            Variant::NoGlobal => "no_global",
            Variant::NoMemory => "no_memory",
            Variant::NoHourglass => "no_hourglass",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoLocal => c.enable_local_memory = false,
            Variant::NoGlobal => c.enable_global_memory = false,
            Variant::NoMemory => {
                c.enable_local_memory = false;
                c.enable_global_memory = false;
            }
            Variant::NoHourglass => c.enable_hourglass = false,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::usage(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub variant: Variant,
    /// Loss of every optimizer step.
    pub steps: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Trains every variant from the same seed on the same patches and writes
/// `ablation_steps.csv` (one row per optimizer step) and
/// `ablation_epochs.csv`; with `no_hourglass` requested also
/// `ablation_flops.txt` comparing the cost of both layouts at 48x48.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], log: Log<'_>) -> Result<(Vec<Curve>, String)> {
    if variants.is_empty() {
        return Err(Error::usage("no variants requested"));
    }
    let base = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let data = load_prepared(cfg.require_data_dir()?)?;
    check_data_channels(&data, &base)?;
    let out = cfg.require_out_dir()?;
    ensure_dir(out)?;
    let mut curves = Vec::new();
    for &v in variants {
        let mut trainer = Trainer::new(Model::build(&v.apply(&base))?, train_cfg.clone())?;
        let mut steps = Vec::new();
        while trainer.epoch() < train_cfg.epochs {
            let r = trainer.run_epoch(&data, |_, loss| steps.push(loss))?;
            log(&format!("{} epoch {} loss {:.6}", v.name(), r.epoch + 1, r.loss));
        }
        curves.push(Curve {
            variant: v,
            steps,
            epochs: trainer.history().to_vec(),
        });
    }
    let per_epoch = curves[0].steps.len() / train_cfg.epochs.max(1);
    let mut header = vec!["step".to_string(), "epoch".to_string()];
    header.extend(curves.iter().map(|c| c.variant.name().to_string()));
    let mut w = csv::Writer::from_path(out.join("ablation_steps.csv"))?;
    w.write_record(&header)?;
    for i in 0..curves[0].steps.len() {
        let mut row = vec![(i + 1).to_string(), (i / per_epoch.max(1) + 1).to_string()];
        row.extend(curves.iter().map(|c| c.steps[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::io(out))?;
    let mut w = csv::Writer::from_path(out.join("ablation_epochs.csv"))?;
    header[0] = "epoch".into();
    header[1] = "steps".into();
    w.write_record(&header)?;
    for e in 0..train_cfg.epochs {
        let mut row = vec![(e + 1).to_string(), curves[0].epochs[e].steps.to_string()];
        row.extend(curves.iter().map(|c| c.epochs[e].loss.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::io(out))?;

    let mut rows = vec![vec!["variant".to_string(), "final loss".to_string()]];
    for c in &curves {
        rows.push(vec![
            c.variant.name().into(),
            format!("{:.6}", c.epochs.last().map_or(f64::NAN, |r| r.loss)),
        ]);
    }
    let mut text = aligned(&rows);
    if variants.contains(&Variant::NoHourglass) {
        let full = estimate_flops(&Variant::Full.apply(&base), PATCH_SIZE, PATCH_SIZE)?.total;
        let flat = estimate_flops(&Variant::NoHourglass.apply(&base), PATCH_SIZE, PATCH_SIZE)?.total;
        let flops = format!("full {full}\nno_hourglass {flat}\n");
        let path = out.join("ablation_flops.txt");
        std::fs::write(&path, &flops).map_err(Error::io(&path))?;
        text.push_str(&flops);
    }
    Ok((curves, text))
}

/// Per-layer cost report of the configured network on a `size x size` input.
pub fn flops(cfg: &RunConfig, size: usize) -> Result<String> {
    let model = cfg.model_config()?;
    let report = estimate_flops(&model, size, size)?;
    let flat = estimate_flat_flops(&model, size, size)?;
    Ok(report::flops_text(&report, &flat, (size, size)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse_and_reject_unknown_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "no_skip".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("no_skip") && err.contains("no_hourglass"), "{err}");
    }

    #[test]
    fn padding_replicates_edges() {
        let img = Image::from_fn(3, 2, 1, |x, y, _| (x + 10 * y) as f32).unwrap();
        let p = pad_to_multiple(&img, 4);
        assert_eq!((p.width(), p.height()), (4, 4));
        assert_eq!(p.get(3, 3, 0), 12.0);
        assert_eq!(p.get(1, 0, 0), 1.0);
    }
}
