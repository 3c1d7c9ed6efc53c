//! Metric records, the per-setting comparison table and figure export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::stats::wilcoxon_signed_rank;

/// Crop tag written to every CSV row: rows `[H/4, 3H/4)`.
pub const CROP_TAG: &str = "central_half";
pub const SIGNIFICANCE: f64 = 0.05;
pub const METRICS: [&str; 3] = ["PSNR", "SSIM", "DISTS"];

/// One reconstructed sequence scored against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub method: String,
    pub subject: String,
    pub view: String,
    pub pattern: String,
    pub r: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub dists: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    method: String,
    subject: String,
    view: String,
    pattern: String,
    #[serde(rename = "R")]
    r: f64,
    psnr_db: f64,
    ssim: f64,
    dists_or_na: String,
    crop: String,
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["method", "subject", "view", "pattern", "R", "psnr_db", "ssim", "dists_or_NA", "crop"])?;
    for r in records {
        w.serialize(CsvRow {
            method: r.method.clone(),
            subject: r.subject.clone(),
            view: r.view.clone(),
            pattern: r.pattern.clone(),
            r: r.r,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            dists_or_na: r.dists.map_or_else(|| "NA".to_string(), |d| d.to_string()),
            crop: CROP_TAG.into(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 9 {
            return Err(EvalError::Invalid(format!("metrics row has {} fields, expected 9", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| EvalError::Invalid(format!("bad number {:?} in column {i}", &row[i])))
        };
        if &row[8] != CROP_TAG {
            return Err(EvalError::Grouping(format!("crop {:?} differs from {CROP_TAG}", &row[8])));
        }
        out.push(MetricRecord {
            method: row[0].into(),
            subject: row[1].into(),
            view: row[2].into(),
            pattern: row[3].into(),
            r: num(4)?,
            psnr_db: num(5)?,
            ssim: num(6)?,
            dists: if &row[7] == "NA" { None } else { Some(num(7)?) },
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }
}

/// All sequences of one method under one sampling setting.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub pattern: String,
    pub r: f64,
    pub crop: &'static str,
    /// `(subject, view)` per entry, sorted.
    pub cases: Vec<(String, String)>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    /// `None` when the perceptual metric was unavailable.
    pub dists: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn values(&self, k: usize) -> Option<&[f64]> {
        match k {
            0 => Some(&self.psnr_db),
            1 => Some(&self.ssim),
            _ => self.dists.as_deref(),
        }
    }

    pub fn summary(&self, k: usize) -> Option<Summary> {
        self.values(k).and_then(Summary::of)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub summary: Option<Summary>,
    /// Wilcoxon p against the reference method, when computable.
    pub p_value: Option<f64>,
    pub dagger: bool,
    pub bold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub cells: [Cell; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub pattern: String,
    pub r: f64,
    pub reports: Vec<MetricReport>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub reference: Option<String>,
    pub settings: Vec<Setting>,
}

fn setting_key(r: &MetricRecord) -> (String, u64) {
    (r.pattern.clone(), r.r.to_bits())
}

/// Groups records by `(pattern, R)` and method, and builds the table with
/// daggers for `p < 0.05` against `reference` (paired by subject and view)
/// and bold for the best mean of each metric. Every method of a setting
/// must cover the same cases exactly once.
pub fn make_report(records: &[MetricRecord], reference: Option<&str>) -> Result<ComparisonTable> {
    if records.is_empty() {
        return Err(EvalError::Grouping("no metric records".into()));
    }
    let mut groups: BTreeMap<(String, u64), BTreeMap<String, Vec<&MetricRecord>>> = BTreeMap::new();
    for rec in records {
        if !rec.r.is_finite() || rec.r <= 0.0 {
            return Err(EvalError::Grouping(format!("acceleration {} is not positive", rec.r)));
        }
        groups.entry(setting_key(rec)).or_default().entry(rec.method.clone()).or_default().push(rec);
    }
    let mut settings = Vec::new();
    for ((pattern, rbits), methods) in groups {
        let label = format!("{pattern} R={}", f64::from_bits(rbits));
        let mut reports = Vec::new();
        let mut case_set: Option<BTreeSet<(String, String)>> = None;
        for (method, mut recs) in methods {
            recs.sort_by(|a, b| (&a.subject, &a.view).cmp(&(&b.subject, &b.view)));
            let cases: Vec<(String, String)> = recs.iter().map(|r| (r.subject.clone(), r.view.clone())).collect();
            let unique: BTreeSet<_> = cases.iter().cloned().collect();
            if unique.len() != cases.len() {
                return Err(EvalError::Grouping(format!("{method} has duplicate cases under {label}")));
            }
            match &case_set {
                None => case_set = Some(unique),
                Some(s) if *s != unique => {
                    return Err(EvalError::Grouping(format!("{method} covers different cases than other methods under {label}")));
                }
                _ => {}
            }
            let available = recs.iter().filter(|r| r.dists.is_some()).count();
            if available != 0 && available != recs.len() {
                return Err(EvalError::Grouping(format!("{method} has DISTS for only some cases under {label}")));
            }
            reports.push(MetricReport {
                method,
                pattern: pattern.clone(),
                r: f64::from_bits(rbits),
                crop: CROP_TAG,
                cases,
                psnr_db: recs.iter().map(|r| r.psnr_db).collect(),
                ssim: recs.iter().map(|r| r.ssim).collect(),
                dists: (available > 0).then(|| recs.iter().filter_map(|r| r.dists).collect()),
            });
        }
        if let Some(name) = reference {
            if !reports.iter().any(|m| m.method == name) {
                return Err(EvalError::Grouping(format!("reference method {name} missing under {label}")));
            }
        }
        let rows = build_rows(&reports, reference);
        settings.push(Setting { pattern, r: f64::from_bits(rbits), reports, rows });
    }
    Ok(ComparisonTable { reference: reference.map(str::to_string), settings })
}

fn build_rows(reports: &[MetricReport], reference: Option<&str>) -> Vec<Row> {
    let base = reference.and_then(|name| reports.iter().find(|m| m.method == name));
    let mut rows: Vec<Row> = reports
        .iter()
        .map(|m| {
            let cells = std::array::from_fn(|k| {
                let p_value = match (base, m.values(k)) {
                    (Some(b), Some(v)) if b.method != m.method => {
                        b.values(k).and_then(|bv| wilcoxon_signed_rank(v, bv).ok()).map(|w| w.p_value)
                    }
                    _ => None,
                };
                Cell { summary: m.summary(k), p_value, dagger: p_value.is_some_and(|p| p < SIGNIFICANCE), bold: false }
            });
            Row { method: m.method.clone(), cells }
        })
        .collect();
    if rows.len() > 1 {
        for k in 0..3 {
            let best = rows.iter().filter_map(|r| r.cells[k].summary).map(|s| s.mean).fold(f64::NEG_INFINITY, f64::max);
            for row in &mut rows {
                if row.cells[k].summary.is_some_and(|s| s.mean == best) {
                    row.cells[k].bold = true;
                }
            }
        }
    }
    rows
}

impl Cell {
    /// `mean ± std`, with a trailing dagger and `**bold**` markers.
    pub fn render(&self, digits: usize) -> String {
        let Some(s) = self.summary else {
            return "NA".into();
        };
        let mut text = format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std);
        if self.bold {
            text = format!("**{text}**");
        }
        if self.dagger {
            text.push('†');
        }
        text
    }
}

const DIGITS: [usize; 3] = [2, 4, 4];

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Sampling | R | Method | PSNR↑ | SSIM↑ | DISTS↑ |\n|---|---|---|---|---|---|\n");
        for s in &self.settings {
            for row in &s.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    s.pattern,
                    s.r,
                    row.method,
                    row.cells[0].render(DIGITS[0]),
                    row.cells[1].render(DIGITS[1]),
                    row.cells[2].render(DIGITS[2])
                );
            }
        }
        out.push('\n');
        out.push_str("Best mean per setting in bold. ");
        match &self.reference {
            Some(r) => {
                let _ = write!(out, "† marks a significant difference (Wilcoxon signed-rank, p < .05) from {r}. ");
            }
            None => out.push_str("No reference method, so no significance marks. "),
        }
        out.push_str(
            "DISTS is reported as similarity 1 - distance (higher is better); NA means no perceptual backend was registered. Metrics use the central half of the rows.\n",
        );
        out
    }

    /// Summary rows: setting, method, then mean/std/p/dagger per metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["pattern".to_string(), "R".into(), "method".into(), "n".into()];
        for m in METRICS {
            for suffix in ["mean", "std", "p", "dagger", "best"] {
                header.push(format!("{}_{suffix}", m.to_lowercase()));
            }
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for s in &self.settings {
            for row in &s.rows {
                let n = row.cells[0].summary.map_or(0, |x| x.n);
                let mut rec = vec![s.pattern.clone(), s.r.to_string(), row.method.clone(), n.to_string()];
                for c in &row.cells {
                    rec.push(opt(c.summary.map(|x| x.mean)));
                    rec.push(opt(c.summary.map(|x| x.std)));
                    rec.push(opt(c.p_value));
                    rec.push(c.dagger.to_string());
                    rec.push(c.bold.to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, pattern: &str, r: f64, method: &str) -> Option<&Row> {
        self.settings
            .iter()
            .find(|s| s.pattern == pattern && s.r == r)
            .and_then(|s| s.rows.iter().find(|row| row.method == method))
    }
}

/// Writes a real image as 8-bit grayscale PNG, scaled so its maximum maps
/// to 255. Rows of `img` become image rows.
pub fn write_gray_png(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    if h == 0 || w == 0 || img.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid(format!("cannot export a {h}x{w} image with non-finite or no pixels")));
    }
    let peak = img.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let bytes: Vec<u8> = img.iter().map(|v| (v.abs() * scale).round().clamp(0.0, 255.0) as u8).collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}
