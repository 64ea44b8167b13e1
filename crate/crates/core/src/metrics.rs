//! Evaluation: all-point average precision, mAP, and the TP/FP/BFD
//! indicators, plus CSV and JSON reports.
//!
//! Indicators are ratios to the number of ground-truth objects:
//! a ground truth counts as TP when its best-overlapping detection (IoU at
//! or above the threshold) carries the right label and as FP when that
//! detection carries a wrong one. A detection whose IoU with every ground
//! truth is below the threshold is a background detection; their count over
//! the ground-truth total is the BFD rate, which can exceed 100%.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, ClassSet, GroundTruth, Proposal};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Ground truths and final detections of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub ground_truths: Vec<GroundTruth<f64>>,
    pub detections: Vec<Proposal<f64>>,
}

/// Points of the precision/recall curve for one class, one per detection in
/// descending confidence order. Ties keep image order, then detection order.
pub fn pr_curve(images: &[EvalImage], class_id: usize, iou_threshold: f64) -> Vec<(f64, f64)> {
    let npos: usize = images
        .iter()
        .map(|im| im.ground_truths.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    let mut dets: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| {
            im.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(j, d)| (d.confidence, i, j))
        })
        .collect();
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truths.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for (_, i, j) in dets {
        let d = &images[i].detections[j];
        let best = images[i]
            .ground_truths
            .iter()
            .enumerate()
            .filter(|(g, gt)| gt.class_id == class_id && !taken[i][*g])
            .map(|(g, gt)| (g, iou(&gt.bbox, &d.bbox)))
            .filter(|(_, v)| *v >= iou_threshold)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
        match best {
            Some((g, _)) => {
                taken[i][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if npos == 0 { 0.0 } else { tp as f64 / npos as f64 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// All-point average precision: the area under the monotone precision
/// envelope of the PR curve. Zero when the class has no ground truth.
pub fn average_precision(images: &[EvalImage], class_id: usize, iou_threshold: f64) -> f64 {
    let curve = pr_curve(images, class_id, iou_threshold);
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |p| p.0);
    for &(r, p) in curve.iter().rev() {
        if r < prev_recall {
            ap += (prev_recall - r) * envelope;
            prev_recall = r;
        }
        envelope = envelope.max(p);
    }
    ap + prev_recall * envelope
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub gt_total: usize,
    pub matched: usize,
    pub mismatched: usize,
    /// Background detections carrying this label.
    pub background_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean AP over classes with at least one ground truth.
    pub map: f64,
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub bfd_rate: f64,
    pub gt_total: usize,
    pub matched: usize,
    pub mismatched: usize,
    pub background_detections: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// AP per class plus the indicator counts. Rates are 0 when there is no
/// ground truth at all.
pub fn compute_indicators(images: &[EvalImage], classes: &ClassSet, iou_threshold: f64) -> MetricsReport {
    let n = classes.len();
    let mut per_class: Vec<ClassMetrics> = classes
        .names()
        .iter()
        .map(|name| ClassMetrics {
            class: name.clone(),
            ap: None,
            gt_total: 0,
            matched: 0,
            mismatched: 0,
            background_detections: 0,
        })
        .collect();
    for im in images {
        for gt in &im.ground_truths {
            let best = im
                .detections
                .iter()
                .map(|d| (d, iou(&gt.bbox, &d.bbox)))
                .filter(|(_, v)| *v >= iou_threshold)
                .max_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .unwrap_or(Ordering::Equal)
                        .then(a.0.confidence.partial_cmp(&b.0.confidence).unwrap_or(Ordering::Equal))
                });
            if let Some(m) = per_class.get_mut(gt.class_id) {
                m.gt_total += 1;
                match best {
                    Some((d, _)) if d.class_id == gt.class_id => m.matched += 1,
                    Some(_) => m.mismatched += 1,
                    None => {}
                }
            }
        }
        for d in &im.detections {
            let hit = im.ground_truths.iter().any(|g| iou(&g.bbox, &d.bbox) >= iou_threshold);
            if !hit && d.class_id < n {
                per_class[d.class_id].background_detections += 1;
            }
        }
    }
    let mut aps = Vec::new();
    for (c, m) in per_class.iter_mut().enumerate() {
        if m.gt_total > 0 {
            let ap = average_precision(images, c, iou_threshold);
            m.ap = Some(ap);
            aps.push(ap);
        }
    }
    let sum = |f: fn(&ClassMetrics) -> usize| per_class.iter().map(f).sum::<usize>();
    let gt_total = sum(|m| m.gt_total);
    let matched = sum(|m| m.matched);
    let mismatched = sum(|m| m.mismatched);
    let background_detections = sum(|m| m.background_detections);
    MetricsReport {
        map: if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
        tp_rate: ratio(matched, gt_total),
        fp_rate: ratio(mismatched, gt_total),
        bfd_rate: ratio(background_detections, gt_total),
        gt_total,
        matched,
        mismatched,
        background_detections,
        per_class,
    }
}

/// Report file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_COLUMNS: [&str; 7] = ["class", "AP", "mAP", "TP", "FP", "BFD", "gt_total"];

/// Name of the summary row in CSV reports.
pub const ALL_CLASSES: &str = "all";

/// One CSV row. Percentages carry one decimal; blank cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Option<String>,
    pub class: String,
    pub ap: Option<f64>,
    pub map: Option<f64>,
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    pub bfd: Option<f64>,
    pub gt_total: usize,
}

fn pct(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

/// Rows of a report: one per class, then the `all` summary row.
pub fn report_rows(report: &MetricsReport, variant: Option<&str>) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = report
        .per_class
        .iter()
        .map(|m| ReportRow {
            variant: variant.map(str::to_string),
            class: m.class.clone(),
            ap: m.ap.map(pct),
            map: None,
            tp: Some(pct(ratio(m.matched, m.gt_total))),
            fp: Some(pct(ratio(m.mismatched, m.gt_total))),
            bfd: Some(pct(ratio(m.background_detections, m.gt_total))),
            gt_total: m.gt_total,
        })
        .collect();
    rows.push(summary_row(report, variant));
    rows
}

/// The `all` row of a report.
pub fn summary_row(report: &MetricsReport, variant: Option<&str>) -> ReportRow {
    ReportRow {
        variant: variant.map(str::to_string),
        class: ALL_CLASSES.into(),
        ap: None,
        map: Some(pct(report.map)),
        tp: Some(pct(report.tp_rate)),
        fp: Some(pct(report.fp_rate)),
        bfd: Some(pct(report.bfd_rate)),
        gt_total: report.gt_total,
    }
}

/// Writes rows as CSV. A leading `variant` column is added when any row
/// names a variant.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let with_variant = rows.iter().any(|r| r.variant.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.1}"));
    let enc = |e: csv::Error| Error::Data(format!("csv encoding: {e}"));
    let mut header: Vec<&str> = Vec::new();
    if with_variant {
        header.push("variant");
    }
    header.extend(REPORT_COLUMNS);
    w.write_record(&header).map_err(enc)?;
    for r in rows {
        let mut rec = Vec::with_capacity(8);
        if with_variant {
            rec.push(r.variant.clone().unwrap_or_default());
        }
        rec.extend([
            r.class.clone(),
            cell(r.ap),
            cell(r.map),
            cell(r.tp),
            cell(r.fp),
            cell(r.bfd),
            r.gt_total.to_string(),
        ]);
        w.write_record(&rec).map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv encoding: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Parses CSV written by [`rows_to_csv`]; error indices are 1-based data rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse {
            index: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let with_variant = header.first().map(String::as_str) == Some("variant");
    let expected: Vec<&str> = if with_variant {
        std::iter::once("variant").chain(REPORT_COLUMNS).collect()
    } else {
        REPORT_COLUMNS.to_vec()
    };
    if header != expected {
        return Err(Error::Parse {
            index: 0,
            message: format!("unexpected header {header:?}"),
        });
    }
    let off = usize::from(with_variant);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let index = i + 1;
        let fail = |message: String| Error::Parse { index, message };
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let num = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(off + j).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| fail(format!("bad number {s:?}")))
            }
        };
        let gt = rec.get(off + 6).unwrap_or("");
        rows.push(ReportRow {
            variant: with_variant.then(|| rec.get(0).unwrap_or("").to_string()),
            class: rec.get(off).unwrap_or("").to_string(),
            ap: num(1)?,
            map: num(2)?,
            tp: num(3)?,
            fp: num(4)?,
            bfd: num(5)?,
            gt_total: gt.parse().map_err(|_| fail(format!("bad gt_total {gt:?}")))?,
        });
    }
    Ok(rows)
}

/// Writes a report. An empty evaluation (no ground truth and no
/// detections) yields a header-only CSV.
pub fn emit_report(report: &MetricsReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => {
            let empty = report.gt_total == 0 && report.background_detections == 0;
            let rows = if empty { Vec::new() } else { report_rows(report, None) };
            rows_to_csv(&rows)?
        }
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))? + "\n",
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Differences `b − a` of the summary percentages, in points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryDelta {
    pub map: f64,
    pub tp: f64,
    pub fp: f64,
    pub bfd: f64,
}

pub fn summary_delta(a: &ReportRow, b: &ReportRow) -> SummaryDelta {
    let d = |x: Option<f64>, y: Option<f64>| y.unwrap_or(0.0) - x.unwrap_or(0.0);
    SummaryDelta {
        map: d(a.map, b.map),
        tp: d(a.tp, b.tp),
        fp: d(a.fp, b.fp),
        bfd: d(a.bfd, b.bfd),
    }
}
