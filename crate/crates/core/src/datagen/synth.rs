use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{record_seed, Annotation, Dataset, DatasetRecord, ImageSource, ProposalRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ClassSet, GroundTruth, Proposal};

/// Noise model of the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Std-dev of center and size perturbations, as a fraction of box size.
    pub jitter_sigma: f64,
    pub label_flip_prob: f64,
    pub confidence_noise_sigma: f64,
    pub n_per_gt: usize,
    pub n_background_clusters: usize,
    pub cluster_size: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            jitter_sigma: 0.15,
            label_flip_prob: 0.1,
            confidence_noise_sigma: 0.1,
            n_per_gt: 8,
            n_background_clusters: 2,
            cluster_size: 4,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(Error::Config(format!(
                "label_flip_prob must lie in [0, 1], got {}",
                self.label_flip_prob
            )));
        }
        for (name, v) in [
            ("jitter_sigma", self.jitter_sigma),
            ("confidence_noise_sigma", self.confidence_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// What one call of the simulator produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthStats {
    pub object_proposals: usize,
    pub flipped: usize,
    pub background_proposals: usize,
}

impl SynthStats {
    pub fn add(&mut self, o: &SynthStats) {
        self.object_proposals += o.object_proposals;
        self.flipped += o.flipped;
        self.background_proposals += o.background_proposals;
    }

    pub fn flip_fraction(&self) -> f64 {
        if self.object_proposals == 0 {
            0.0
        } else {
            self.flipped as f64 / self.object_proposals as f64
        }
    }
}

/// Largest IoU a background-cluster proposal may have with any ground truth.
pub const BACKGROUND_MAX_IOU: f64 = 0.1;
const BACKGROUND_CONFIDENCE: (f64, f64) = (0.3, 0.9);
const MAX_TRIES: usize = 200;

pub fn synth_proposals(record: &DatasetRecord, noise: &NoiseConfig, classes: &ClassSet) -> ProposalRecord {
    synth_proposals_detailed(record, noise, classes).0
}

/// Simulated detector output for one image. The generator is seeded from
/// `noise.seed` and the image id, so records are independent of each other.
pub fn synth_proposals_detailed(record: &DatasetRecord, noise: &NoiseConfig, classes: &ClassSet) -> (ProposalRecord, SynthStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(noise.seed, &record.image_id));
    let std = |s: f64| Normal::new(0.0, s).expect("finite non-negative sigma");
    let mut stats = SynthStats::default();
    let mut proposals = Vec::new();
    let gts = &record.ground_truths;
    for gt in gts {
        let b = gt.bbox;
        for _ in 0..noise.n_per_gt {
            let jittered = jitter(&b, noise.jitter_sigma, &mut rng);
            let class_id = if classes.len() > 1 && rng.random::<f64>() < noise.label_flip_prob {
                stats.flipped += 1;
                let other = rng.random_range(0..classes.len() - 1);
                if other >= gt.class_id {
                    other + 1
                } else {
                    other
                }
            } else {
                gt.class_id
            };
            let c = iou(&jittered, &b) + std(noise.confidence_noise_sigma).sample(&mut rng);
            proposals.push(Proposal::new(jittered, c.clamp(0.0, 1.0), class_id));
            stats.object_proposals += 1;
        }
    }
    for _ in 0..noise.n_background_clusters {
        let Some(anchor) = background_box(gts, &mut rng) else {
            continue;
        };
        for _ in 0..noise.cluster_size {
            let mut member = anchor;
            for _ in 0..MAX_TRIES {
                let cand = jitter(&anchor, noise.jitter_sigma.max(0.05), &mut rng);
                if clear_of(gts, &cand) {
                    member = cand;
                    break;
                }
            }
            let conf = rng.random_range(BACKGROUND_CONFIDENCE.0..=BACKGROUND_CONFIDENCE.1);
            proposals.push(Proposal::new(member, conf, rng.random_range(0..classes.len())));
            stats.background_proposals += 1;
        }
    }
    proposals.shuffle(&mut rng);
    (
        ProposalRecord {
            image_id: record.image_id.clone(),
            proposals,
        },
        stats,
    )
}

fn jitter(b: &BBox<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> BBox<f64> {
    if sigma == 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    let cx = b.cx + n.sample(rng) * b.w;
    let cy = b.cy + n.sample(rng) * b.h;
    let w = (b.w * (1.0 + n.sample(rng))).max(0.02 * b.w.max(0.01));
    let h = (b.h * (1.0 + n.sample(rng))).max(0.02 * b.h.max(0.01));
    BBox::new(cx.clamp(0.0, 1.0), cy.clamp(0.0, 1.0), w.min(1.0), h.min(1.0))
}

fn clear_of(gts: &[GroundTruth<f64>], b: &BBox<f64>) -> bool {
    b.area() > 0.0 && gts.iter().all(|g| iou(&g.bbox, b) <= BACKGROUND_MAX_IOU)
}

fn background_box(gts: &[GroundTruth<f64>], rng: &mut ChaCha8Rng) -> Option<BBox<f64>> {
    (0..MAX_TRIES).find_map(|_| {
        let w = rng.random_range(0.1..0.35);
        let h = rng.random_range(0.1..0.35);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        let b = BBox::new(cx, cy, w, h);
        clear_of(gts, &b).then_some(b)
    })
}

/// Shape of a procedurally generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 200,
            width: 64,
            height: 64,
            classes: vec!["closed_door".into(), "open_door".into()],
            min_objects: 1,
            max_objects: 3,
            min_size: 0.2,
            max_size: 0.5,
            seed: 0,
        }
    }
}

/// Dataset of rendered scenes with integer pixel boxes. Objects overlap each
/// other by at most 0.2 IoU.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let classes = ClassSet::new(cfg.classes.clone())?;
    if cfg.min_objects > cfg.max_objects || !(0.0 < cfg.min_size && cfg.min_size <= cfg.max_size && cfg.max_size <= 1.0) {
        return Err(Error::Config("synthetic object count or size range is empty".into()));
    }
    if cfg.width < 8 || cfg.height < 8 {
        return Err(Error::Config("synthetic images must be at least 8x8 pixels".into()));
    }
    let records = (0..cfg.images)
        .into_par_iter()
        .map(|i| {
            let id = format!("img{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(cfg.seed, &id));
            let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let mut annotations: Vec<Annotation> = Vec::with_capacity(n);
            let mut boxes: Vec<BBox<f64>> = Vec::with_capacity(n);
            for _ in 0..n {
                for _ in 0..MAX_TRIES {
                    let side = |rng: &mut ChaCha8Rng, full: u32| {
                        let lo = (cfg.min_size * full as f64).round().max(2.0) as u32;
                        let hi = ((cfg.max_size * full as f64).round() as u32).max(lo);
                        let s = rng.random_range(lo..=hi);
                        let start = rng.random_range(0..=full - s);
                        (start as f64, (start + s) as f64)
                    };
                    let (x0, x1) = side(&mut rng, cfg.width);
                    let (y0, y1) = side(&mut rng, cfg.height);
                    let corners = [x0, y0, x1, y1];
                    let b = super::pixel_box_to_bbox(corners, cfg.width, cfg.height)?;
                    if boxes.iter().all(|o| iou(o, &b) <= 0.2) {
                        boxes.push(b);
                        annotations.push(Annotation {
                            class: classes.names()[rng.random_range(0..classes.len())].clone(),
                            corners,
                        });
                        break;
                    }
                }
            }
            let seed = rng.random();
            DatasetRecord::new(id, cfg.width, cfg.height, ImageSource::Synthetic { seed }, annotations, &classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes,
        records,
        base_dir: Default::default(),
    })
}
