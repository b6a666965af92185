//! CSV files and plain-text tables.

use std::fmt::Write as _;
use std::path::Path;

use dmcn_core::metrics::{EvalResult, Evaluation};
use dmcn_core::model::FlopReport;
use dmcn_core::training::EpochRecord;

use crate::error::{Error, Result};

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "lr", "loss", "steps"],
        history.iter().map(|h| {
            vec![
                h.epoch.to_string(),
                h.lr.to_string(),
                h.loss.to_string(),
                h.steps.to_string(),
            ]
        }),
    )
}

/// One row per image with both methods side by side.
pub fn write_eval_images_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let m = &eval.model;
    let header = ["image", "bicubic_psnr", "bicubic_ssim", "model_psnr", "model_ssim"];
    let rows = eval.bicubic.rows.iter().zip(&m.rows).map(|(b, r)| {
        vec![
            b.image.clone(),
            b.psnr.to_string(),
            b.ssim.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
        ]
    });
    write_csv(path, &header, rows)
}

pub fn write_eval_summary_csv(path: &Path, results: &[&EvalResult]) -> Result<()> {
    write_csv(
        path,
        &["dataset", "scale", "method", "psnr", "ssim"],
        results.iter().map(|r| {
            vec![
                r.dataset.clone(),
                r.scale.to_string(),
                r.method.clone(),
                r.mean_psnr().to_string(),
                r.mean_ssim().to_string(),
            ]
        }),
    )
}

/// Left-aligned columns separated by two spaces.
pub fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c + 1 == row.len() {
                line.push_str(cell);
            } else {
                write!(line, "{cell:<w$}  ", w = width[c]).expect("writing to a String");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Methods as rows, `dataset xS` as the column, `PSNR/SSIM` cells.
pub fn eval_table(results: &[&EvalResult]) -> String {
    let mut rows = vec![vec![
        "Method".to_string(),
        "Dataset".to_string(),
        "Scale".to_string(),
        "PSNR/SSIM".to_string(),
    ]];
    for r in results {
        rows.push(vec![
            r.method.clone(),
            r.dataset.clone(),
            format!("x{}", r.scale),
            r.cell().to_string(),
        ]);
    }
    aligned(&rows)
}

/// `numerator / denominator` as a percentage rounded half-up to `decimals`
/// places, computed in integers.
pub fn exact_percent(numerator: u64, denominator: u64, decimals: u32) -> String {
    assert!(denominator > 0, "percentage of zero");
    let unit = 10u128.pow(decimals);
    let scaled = (2 * 100 * unit * numerator as u128 + denominator as u128) / (2 * denominator as u128);
    let (whole, frac) = (scaled / unit, scaled % unit);
    if decimals == 0 {
        whole.to_string()
    } else {
        format!("{whole}.{frac:0w$}", w = decimals as usize)
    }
}

/// Per-layer cost table followed by the totals and the hourglass share.
pub fn flops_text(report: &FlopReport, flat: &FlopReport, size: (usize, usize)) -> String {
    let mut rows = vec![["layer", "name", "c", "f", "n", "m", "c*f^2*n*m"]
        .map(String::from)
        .to_vec()];
    for r in &report.records {
        let kernel = if r.is_resize {
            "-".to_string()
        } else {
            r.kernel.to_string()
        };
        rows.push(vec![
            r.layer.to_string(),
            r.name.clone(),
            r.in_channels.to_string(),
            kernel,
            r.filters.to_string(),
            r.out_size.to_string(),
            r.term.to_string(),
        ]);
    }
    let mut out = format!("input {}x{}\n", size.0, size.1);
    out.push_str(&aligned(&rows));
    let conv_rows = report.records.iter().filter(|r| !r.is_resize).count();
    writeln!(out, "conv layers {conv_rows}").unwrap();
    writeln!(out, "total {}", report.total).unwrap();
    writeln!(out, "flat total {}", flat.total).unwrap();
    writeln!(
        out,
        "hourglass/flat {}%  reduction {}%",
        exact_percent(report.total, flat.total, 4),
        exact_percent(flat.total - report.total.min(flat.total), flat.total, 4)
    )
    .unwrap();
    out
}
