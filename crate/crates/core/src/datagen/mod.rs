//! Dataset and proposal files, train/test splits, the synthetic proposal
//! simulator standing in for an upstream detector, synthetic image
//! rendering, and leave-one-out plans.
//!
//! Dataset documents annotate boxes in pixels with `y` growing downwards,
//! as image tools do. In memory every box is normalized with `y` growing
//! upwards (see [`crate::geometry`]); the conversion happens on load.

mod render;
mod synth;

pub use render::{image_tensor, load_image, render_synthetic};
pub use synth::{synth_dataset, synth_proposals, synth_proposals_detailed, NoiseConfig, SynthConfig, SynthStats};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ClassSet, GroundTruth, Proposal};

pub const DATASET_VERSION: u32 = 1;

/// Where an image's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    /// Image file, relative to the dataset document.
    Path(String),
    /// Procedurally rendered from the annotations with this seed.
    Synthetic { seed: u64 },
}

/// One annotation as pixel corners `[x0, y0, x1, y1]`, `y` downwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub class: String,
    #[serde(rename = "box")]
    pub corners: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source: ImageSource,
    pub annotations: Vec<Annotation>,
    /// Normalized ground truths derived from `annotations`.
    pub ground_truths: Vec<GroundTruth<f64>>,
}

impl DatasetRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        source: ImageSource,
        annotations: Vec<Annotation>,
        classes: &ClassSet,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if image_id.is_empty() {
            return Err(Error::Data("image id must not be empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image {image_id:?} has zero size")));
        }
        let ground_truths = annotations
            .iter()
            .map(|a| {
                let class_id = classes
                    .index_of(&a.class)
                    .ok_or_else(|| Error::Data(format!("image {image_id:?}: unknown class {:?}", a.class)))?;
                Ok(GroundTruth::new(pixel_box_to_bbox(a.corners, width, height)?, class_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetRecord {
            image_id,
            width,
            height,
            source,
            annotations,
            ground_truths,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassSet,
    pub records: Vec<DatasetRecord>,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn record(&self, image_id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

/// Raw detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub image_id: String,
    pub proposals: Vec<Proposal<f64>>,
}

/// Converts pixel corners (`y` downwards) to a normalized box (`y` upwards).
pub fn pixel_box_to_bbox(c: [f64; 4], width: u32, height: u32) -> Result<BBox<f64>> {
    let [x0, y0, x1, y1] = c;
    if c.iter().any(|v| !v.is_finite()) || x1 < x0 || y1 < y0 {
        return Err(Error::Data(format!("invalid corner box {c:?}")));
    }
    let (w, h) = (width as f64, height as f64);
    Ok(BBox::new(
        (x0 + x1) / (2.0 * w),
        1.0 - (y0 + y1) / (2.0 * h),
        (x1 - x0) / w,
        (y1 - y0) / h,
    ))
}

/// Pixel corners `[x0, y0, x1, y1]` (`y` downwards) of a normalized box.
pub fn bbox_to_pixel_box(b: &BBox<f64>, width: u32, height: u32) -> [f64; 4] {
    let (x0, y0, x1, y1) = b.corners();
    let (w, h) = (width as f64, height as f64);
    [x0 * w, (1.0 - y1) * h, x1 * w, (1.0 - y0) * h]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    version: u32,
    classes: ClassSet,
    #[serde(default)]
    box_format: BoxFormat,
    images: Vec<Value>,
}

/// Pixel box layout of a dataset document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    /// `[x0, y0, x1, y1]`
    #[default]
    Xyxy,
    /// `[x0, y0, width, height]`
    Xywh,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    seed: u64,
}

/// Parses a dataset document. Errors inside an image entry carry that
/// entry's index.
pub fn parse_dataset(text: &str, base_dir: impl Into<PathBuf>) -> Result<Dataset> {
    let doc: RawDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        index: 0,
        message: format!("dataset document: {e}"),
    })?;
    if doc.version != DATASET_VERSION {
        return Err(Error::Parse {
            index: 0,
            message: format!("unsupported dataset version {} (expected {DATASET_VERSION})", doc.version),
        });
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(doc.images.len());
    for (index, value) in doc.images.into_iter().enumerate() {
        let fail = |message: String| Error::Parse { index, message };
        let raw: RawImage = serde_json::from_value(value).map_err(|e| fail(e.to_string()))?;
        let source = match (raw.path, raw.synthetic) {
            (Some(p), None) => ImageSource::Path(p),
            (None, Some(s)) => ImageSource::Synthetic { seed: s.seed },
            _ => return Err(fail(format!("image {:?} needs exactly one of `path` or `synthetic`", raw.id))),
        };
        if !seen.insert(raw.id.clone()) {
            return Err(fail(format!("duplicate image id {:?}", raw.id)));
        }
        let annotations = raw
            .annotations
            .into_iter()
            .map(|mut a| {
                if doc.box_format == BoxFormat::Xywh {
                    let [x, y, w, h] = a.corners;
                    a.corners = [x, y, x + w, y + h];
                }
                a
            })
            .collect();
        let rec = DatasetRecord::new(raw.id, raw.width, raw.height, source, annotations, &doc.classes).map_err(|e| fail(e.to_string()))?;
        records.push(rec);
    }
    Ok(Dataset {
        classes: doc.classes,
        records,
        base_dir: base_dir.into(),
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_dataset(&text, base)
}

/// Serializes a dataset with `xyxy` pixel boxes.
pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let images: Vec<RawImage> = ds
        .records
        .iter()
        .map(|r| {
            let (path, synthetic) = match &r.source {
                ImageSource::Path(p) => (Some(p.clone()), None),
                ImageSource::Synthetic { seed } => (None, Some(SyntheticSpec { seed: *seed })),
            };
            RawImage {
                id: r.image_id.clone(),
                width: r.width,
                height: r.height,
                path,
                synthetic,
                annotations: r.annotations.clone(),
            }
        })
        .collect();
    let doc = serde_json::json!({
        "version": DATASET_VERSION,
        "classes": ds.classes,
        "box_format": BoxFormat::Xyxy,
        "images": images,
    });
    serde_json::to_string_pretty(&doc)
        .map(|s| s + "\n")
        .map_err(|e| Error::Data(format!("dataset encoding: {e}")))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(ds)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposal {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
    class: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposalLine {
    image_id: String,
    proposals: Vec<RawProposal>,
}

/// Parses proposal lines: one JSON object per line with normalized
/// center-format boxes (`cy` measured from the bottom edge). Blank lines are
/// skipped; error indices are 1-based line numbers.
pub fn parse_proposals(text: &str, classes: &ClassSet) -> Result<Vec<ProposalRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let index = i + 1;
        let fail = |message: String| Error::Parse { index, message };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: RawProposalLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if !seen.insert(raw.image_id.clone()) {
            return Err(fail(format!("duplicate image id {:?}", raw.image_id)));
        }
        let proposals = raw
            .proposals
            .iter()
            .map(|p| {
                let class_id = classes
                    .index_of(&p.class)
                    .ok_or_else(|| fail(format!("unknown class {:?}", p.class)))?;
                let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
                if ![p.cx, p.cy, p.w, p.h, p.confidence].into_iter().all(unit) {
                    return Err(fail(format!("proposal values must lie in [0, 1] for image {:?}", raw.image_id)));
                }
                Ok(Proposal::new(BBox::new(p.cx, p.cy, p.w, p.h), p.confidence, class_id))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ProposalRecord {
            image_id: raw.image_id,
            proposals,
        });
    }
    Ok(out)
}

pub fn load_proposals(path: impl AsRef<Path>, classes: &ClassSet) -> Result<Vec<ProposalRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text, classes)
}

pub fn proposals_to_string(records: &[ProposalRecord], classes: &ClassSet) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = RawProposalLine {
            image_id: r.image_id.clone(),
            proposals: r
                .proposals
                .iter()
                .map(|p| {
                    Ok(RawProposal {
                        cx: p.bbox.cx,
                        cy: p.bbox.cy,
                        w: p.bbox.w,
                        h: p.bbox.h,
                        confidence: p.confidence,
                        class: classes
                            .name(p.class_id)
                            .ok_or(Error::InvalidClass {
                                class_id: p.class_id,
                                num_classes: classes.len(),
                            })?
                            .to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Data(format!("proposal encoding: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_proposals(path: impl AsRef<Path>, records: &[ProposalRecord], classes: &ClassSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, proposals_to_string(records, classes)?).map_err(|e| Error::io(path, e))
}

/// How [`split_train_test`] orders records before cutting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SplitMode {
    /// First `fraction` of the records, in file order.
    #[default]
    Ordered,
    /// Seeded shuffle, then cut.
    Shuffled { seed: u64 },
}

/// Partitions records into train and test sets. The train side receives
/// `round(n · fraction)` records, kept in their original relative order.
pub fn split_train_test<R: Clone>(records: &[R], fraction: f64, mode: SplitMode) -> Result<(Vec<R>, Vec<R>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = records.len();
    let cut = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    if let SplitMode::Shuffled { seed } = mode {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut train_idx = order[..cut].to_vec();
    let mut test_idx = order[cut..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| records[i].clone()).collect(),
        test_idx.iter().map(|&i| records[i].clone()).collect(),
    ))
}

/// One detector run in a leave-one-out plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub train: Vec<String>,
    pub extract: String,
}

/// Train on all segments but one, extract proposals from the held-out one.
pub fn leave_one_out_plan(segments: &[String]) -> Result<Vec<PlanEntry>> {
    if segments.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 segments, got {}",
            segments.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = segments.iter().find(|s| !seen.insert(s.as_str())) {
        return Err(Error::Config(format!("duplicate segment {dup:?}")));
    }
    Ok(segments
        .iter()
        .enumerate()
        .map(|(i, s)| PlanEntry {
            train: segments
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, t)| t.clone())
                .collect(),
            extract: s.clone(),
        })
        .collect())
}

/// Per-record generator seed derived from a global seed and the image id.
pub fn record_seed(seed: u64, image_id: &str) -> u64 {
    let h = crc32fast::hash(image_id.as_bytes()) as u64;
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (h << 32 | (image_id.len() as u64 & 0xffff_ffff))
}

#[cfg(test)]
mod tests;
