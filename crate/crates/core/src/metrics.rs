//! KITTI-style depth metrics, split-wise evaluation and reporting.
//!
//! Metrics are accumulated as raw sums so that any grouping of pixels into
//! samples or batches aggregates to the same result.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depthmap::io::{write_gray_png8, Dataset, Split};
use crate::depthmap::{DepthMap, Raster, Sample, Tag, UncertaintyMap};
use crate::error::{ensure_same_dims, Error, Result};

/// Predictions at or below zero are raised to this depth (m) before inversion.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ground truth beyond this depth (m) is ignored.
    pub max_depth: f64,
    /// Bottom crop `(height, width)`, shrunk to fit smaller samples.
    pub crop: Option<(usize, usize)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_depth: 80.0,
            crop: Some((544, 1600)),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth > 0.0) {
            return Err(Error::Config(format!(
                "evaluation max_depth {} must be positive",
                self.max_depth
            )));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::Config("evaluation crop must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn crop_sample(&self, s: &Sample) -> Result<Sample> {
        match self.crop {
            None => Ok(s.clone()),
            Some((ch, cw)) => {
                let (h, w) = s.dims();
                s.bottom_crop(ch.min(h), cw.min(w))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub imae_inv_km: f64,
    pub irmse_inv_km: f64,
    pub n_pixels: u64,
}

/// Sums over evaluated pixels, in metres and inverse metres.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub n: u64,
    pub abs: f64,
    pub sq: f64,
    pub inv_abs: f64,
    pub inv_sq: f64,
}

impl MetricAccumulator {
    pub fn add_pixel(&mut self, d: f64, gt: f64) {
        let e = d - gt;
        let ie = 1.0 / d.max(MIN_EVAL_DEPTH) - 1.0 / gt;
        self.n += 1;
        self.abs += e.abs();
        self.sq += e * e;
        self.inv_abs += ie.abs();
        self.inv_sq += ie * ie;
    }

    /// Adds every pixel with valid ground truth no deeper than `max_depth`.
    pub fn add_maps(&mut self, d: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<()> {
        ensure_same_dims("metrics prediction vs ground truth", d.dims(), gt.dims())?;
        for ((&dv, &gv), &ok) in d.values().iter().zip(gt.values()).zip(gt.valid()) {
            if ok && gv <= max_depth {
                self.add_pixel(dv, gv);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n += other.n;
        self.abs += other.abs;
        self.sq += other.sq;
        self.inv_abs += other.inv_abs;
        self.inv_sq += other.inv_sq;
    }

    pub fn finish(&self) -> Result<MetricSet> {
        if self.n == 0 {
            return Err(Error::Undefined("metric"));
        }
        let n = self.n as f64;
        Ok(MetricSet {
            mae_mm: 1000.0 * self.abs / n,
            rmse_mm: 1000.0 * (self.sq / n).sqrt(),
            imae_inv_km: 1000.0 * self.inv_abs / n,
            irmse_inv_km: 1000.0 * (self.inv_sq / n).sqrt(),
            n_pixels: self.n,
        })
    }
}

pub fn compute_metrics_capped(d: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<MetricSet> {
    let mut acc = MetricAccumulator::default();
    acc.add_maps(d, gt, max_depth)?;
    acc.finish()
}

/// Metrics over pixels with valid ground truth up to the default 80 m cap.
pub fn compute_metrics(d: &DepthMap, gt: &DepthMap) -> Result<MetricSet> {
    compute_metrics_capped(d, gt, EvalConfig::default().max_depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub metrics: MetricSet,
    pub samples: usize,
}

/// Per-tag results of one method; tags without samples are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub method: String,
    pub day: Option<SplitEntry>,
    pub night: Option<SplitEntry>,
    pub all: Option<SplitEntry>,
}

impl SplitReport {
    pub fn entries(&self) -> [(&'static str, Option<&SplitEntry>); 3] {
        [
            ("day", self.day.as_ref()),
            ("night", self.night.as_ref()),
            ("all", self.all.as_ref()),
        ]
    }
}

/// Pixel-weighted accumulation per tag.
#[derive(Clone, Debug, Default)]
pub struct SplitAccumulator {
    day: (MetricAccumulator, usize),
    night: (MetricAccumulator, usize),
}

impl SplitAccumulator {
    pub fn add(&mut self, tag: Tag, d: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<()> {
        let slot = match tag {
            Tag::Day => &mut self.day,
            Tag::Night => &mut self.night,
        };
        slot.0.add_maps(d, gt, max_depth)?;
        slot.1 += 1;
        Ok(())
    }

    pub fn finish(&self, method: &str) -> Result<SplitReport> {
        let entry = |(acc, samples): &(MetricAccumulator, usize)| -> Result<Option<SplitEntry>> {
            if *samples == 0 || acc.n == 0 {
                return Ok(None);
            }
            Ok(Some(SplitEntry {
                metrics: acc.finish()?,
                samples: *samples,
            }))
        };
        let mut all = self.day;
        all.0.merge(&self.night.0);
        all.1 += self.night.1;
        Ok(SplitReport {
            method: method.to_string(),
            day: entry(&self.day)?,
            night: entry(&self.night)?,
            all: entry(&all)?,
        })
    }
}

/// Runs `model` on every sample of `split` (all records when `None`) in
/// manifest order and aggregates per tag.
pub fn evaluate(
    method: &str,
    dataset: &Dataset,
    split: Option<Split>,
    cfg: &EvalConfig,
    model: impl FnMut(&Sample) -> Result<DepthMap>,
) -> Result<SplitReport> {
    let records = dataset
        .manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s));
    let samples = records.map(|r| dataset.load_record(r));
    evaluate_samples(method, samples, cfg, model)
}

/// [`evaluate`] over in-memory samples.
pub fn evaluate_samples(
    method: &str,
    samples: impl IntoIterator<Item = Result<Sample>>,
    cfg: &EvalConfig,
    mut model: impl FnMut(&Sample) -> Result<DepthMap>,
) -> Result<SplitReport> {
    cfg.validate()?;
    let mut acc = SplitAccumulator::default();
    for s in samples {
        let s = cfg.crop_sample(&s?)?;
        let d = model(&s)?;
        acc.add(s.tag, &d, &s.gt, cfg.max_depth)?;
    }
    acc.finish(method)
}

pub const CSV_HEADER: [&str; 7] = [
    "method",
    "split",
    "mae_mm",
    "rmse_mm",
    "imae_inv_km",
    "irmse_inv_km",
    "n_pixels",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub split: String,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub imae_inv_km: f64,
    pub irmse_inv_km: f64,
    pub n_pixels: u64,
}

pub fn csv_rows(reports: &[SplitReport]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (split, e) in r.entries() {
            if let Some(e) = e {
                let m = e.metrics;
                rows.push(CsvRow {
                    method: r.method.clone(),
                    split: split.to_string(),
                    mae_mm: m.mae_mm,
                    rmse_mm: m.rmse_mm,
                    imae_inv_km: m.imae_inv_km,
                    irmse_inv_km: m.irmse_inv_km,
                    n_pixels: m.n_pixels,
                });
            }
        }
    }
    rows
}

/// One row per method and present split. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn report_csv(reports: &[SplitReport]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv write");
    for row in csv_rows(reports) {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Input(format!("report csv: {e}"))))
        .collect()
}

/// A table with one row per method and MAE, RMSE, iMAE, iRMSE for each of
/// day, night and all. Absent splits are shown as `n/a`.
pub fn report_markdown(reports: &[SplitReport]) -> String {
    let mut out = String::new();
    out.push_str("| Method |");
    for split in ["Day", "Night", "All"] {
        for m in ["MAE", "RMSE", "iMAE", "iRMSE"] {
            let _ = write!(out, " {split} {m} |");
        }
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---:|".repeat(12));
    out.push('\n');
    for r in reports {
        let _ = write!(out, "| {} |", r.method);
        for (_, e) in r.entries() {
            match e {
                Some(e) => {
                    let m = e.metrics;
                    for v in [m.mae_mm, m.rmse_mm, m.imae_inv_km, m.irmse_inv_km] {
                        let _ = write!(out, " {v:.2} |");
                    }
                }
                None => out.push_str(&" n/a |".repeat(4)),
            }
        }
        out.push('\n');
    }
    out.push_str("\nMAE and RMSE in mm; iMAE and iRMSE in 1/km.\n");
    out
}

fn to_bytes(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Grayscale `|d - gt|` map scaled so `max_error` metres is white; pixels
/// without ground truth are black.
pub fn write_error_map(
    d: &DepthMap,
    gt: &DepthMap,
    max_error: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    ensure_same_dims("error map", d.dims(), gt.dims())?;
    let errs = d
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.valid())
        .map(|((a, b), &ok)| if ok { (a - b).abs() } else { 0.0 });
    let bytes = to_bytes(errs, 0.0, max_error);
    write_gray_png8(d.width(), d.height(), &bytes, path)
}

/// Grayscale log-uncertainty map stretched between its own extremes.
pub fn write_sigma_map(sigma: &UncertaintyMap, path: impl AsRef<Path>) -> Result<()> {
    let v = sigma.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bytes = to_bytes(v.iter().copied(), lo, hi);
    write_gray_png8(sigma.width(), sigma.height(), &bytes, path)
}

/// Average ranks (ties share the mean of their positions).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| c / (va * vb).sqrt())
}

/// Spearman rank correlation. Errors on mismatched lengths, fewer than two
/// values or a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "spearman inputs of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input(
            "spearman needs at least two finite pairs".into(),
        ));
    }
    pearson(&ranks(a), &ranks(b)).ok_or(Error::Undefined("rank correlation"))
}

/// Mean of `value` within each quartile of `key`, lowest quartile first.
pub fn quartile_means(key: &[f64], value: &[f64]) -> Result<[f64; 4]> {
    if key.len() != value.len() || key.len() < 4 {
        return Err(Error::Input(
            "quartile means need at least four paired values".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..key.len()).collect();
    idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
    let mut out = [0.0; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let chunk = &idx[q * idx.len() / 4..(q + 1) * idx.len() / 4];
        *slot = chunk.iter().map(|&i| value[i]).sum::<f64>() / chunk.len() as f64;
    }
    Ok(out)
}
