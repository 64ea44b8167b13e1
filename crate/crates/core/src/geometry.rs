//! Normalized bounding-box algebra: IoU, descriptor encoding, top-k
//! selection, greedy NMS, ground-truth matching and relabel targets.
//!
//! All coordinates are fractions of the image size. `cy` grows upwards:
//! 0 is the bottom edge of the image and 1 its top edge, so `(x0, y0)` from
//! [`BBox::corners`] is the bottom-left corner.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Center-format box clamped to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f64> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

/// Clamps the extent `[c - s/2, c + s/2]` to `[0, 1]`, leaving the input
/// untouched (bit for bit) when no clamping is needed.
fn clamp_extent<T: Scalar>(c: T, s: T) -> (T, T) {
    let half = T::lit(0.5);
    let s = if s > T::zero() { s } else { T::zero() };
    let lo = c - s * half;
    let hi = c + s * half;
    if lo >= T::zero() && hi <= T::one() && c >= T::zero() && c <= T::one() {
        return (c, s);
    }
    let lo = lo.maxv(T::zero()).minv(T::one());
    let hi = hi.maxv(T::zero()).minv(T::one()).maxv(lo);
    ((lo + hi) * half, hi - lo)
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        let (cx, w) = clamp_extent(cx, w);
        let (cy, h) = clamp_extent(cy, h);
        BBox { cx, cy, w, h }
    }

    /// Builds a box from normalized `[x0, y0, x1, y1]` corners.
    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let half = T::lit(0.5);
        BBox::new((x0 + x1) * half, (y0 + y1) * half, x1 - x0, y1 - y0)
    }

    pub fn zero() -> Self {
        BBox {
            cx: T::zero(),
            cy: T::zero(),
            w: T::zero(),
            h: T::zero(),
        }
    }

    /// `(x0, y0, x1, y1)` in normalized image coordinates.
    pub fn corners(&self) -> (T, T, T, T) {
        let half = T::lit(0.5);
        (
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

/// Ordered object categories. The background class is not a member; it is
/// the extra index `len()` used only by refinement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class set must not be empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("class names must be non-empty".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassSet { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of object categories, background excluded.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn background_index(&self) -> usize {
        self.names.len()
    }

    /// Descriptor width `5 + |O|`.
    pub fn descriptor_len(&self) -> usize {
        5 + self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, class_id: usize) -> Option<&str> {
        self.names.get(class_id).map(String::as_str)
    }

    fn check(&self, class_id: usize) -> Result<()> {
        if class_id < self.names.len() {
            Ok(())
        } else {
            Err(Error::InvalidClass {
                class_id,
                num_classes: self.names.len(),
            })
        }
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassSet::new(names)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(c: ClassSet) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal<T = f64> {
    pub bbox: BBox<T>,
    pub confidence: T,
    pub class_id: usize,
}

impl<T: Scalar> Proposal<T> {
    pub fn new(bbox: BBox<T>, confidence: T, class_id: usize) -> Self {
        Proposal {
            bbox,
            confidence,
            class_id,
        }
    }

    /// Padding row: empty box, zero confidence, class 0.
    pub fn zero() -> Self {
        Proposal {
            bbox: BBox::zero(),
            confidence: T::zero(),
            class_id: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Proposal<U> {
        Proposal {
            bbox: self.bbox.cast(),
            confidence: U::lit(self.confidence.as_f64()),
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<T = f64> {
    pub bbox: BBox<T>,
    pub class_id: usize,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new(bbox: BBox<T>, class_id: usize) -> Self {
        GroundTruth { bbox, class_id }
    }

    /// A ground truth viewed as a proposal with confidence 1.
    pub fn as_proposal(&self) -> Proposal<T> {
        Proposal::new(self.bbox, T::one(), self.class_id)
    }

    pub fn cast<U: Scalar>(&self) -> GroundTruth<U> {
        GroundTruth {
            bbox: self.bbox.cast(),
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult<T = f64> {
    pub gt_index: Option<usize>,
    pub iou: T,
}

/// Intersection over union; 0 when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = ax1.minv(bx1) - ax0.maxv(bx0);
    let ih = ay1.minv(by1) - ay0.maxv(by0);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    // areas from the same corners keep iou(a, a) exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).minv(T::one())
}

/// `[cx, cy, w, h, c, onehot(class)]`, length `5 + |O|`.
pub fn encode_descriptor<T: Scalar>(p: &Proposal<T>, classes: &ClassSet) -> Result<Vec<T>> {
    classes.check(p.class_id)?;
    let mut v = Vec::with_capacity(classes.descriptor_len());
    v.extend_from_slice(&[p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h, p.confidence]);
    v.extend((0..classes.len()).map(|c| if c == p.class_id { T::one() } else { T::zero() }));
    Ok(v)
}

pub fn encode_ground_truth<T: Scalar>(gt: &GroundTruth<T>, classes: &ClassSet) -> Result<Vec<T>> {
    encode_descriptor(&gt.as_proposal(), classes)
}

/// Inverse of [`encode_descriptor`]; the class is the argmax of the one-hot slice.
pub fn decode_descriptor<T: Scalar>(v: &[T], classes: &ClassSet) -> Result<Proposal<T>> {
    if v.len() != classes.descriptor_len() {
        return Err(Error::dim(format!(
            "descriptor has length {}, expected {}",
            v.len(),
            classes.descriptor_len()
        )));
    }
    let class_id = argmax(&v[5..]);
    Ok(Proposal {
        bbox: BBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        },
        confidence: v[4],
        class_id,
    })
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of `proposals` sorted by descending confidence, stable.
fn confidence_order<T: Scalar>(proposals: &[Proposal<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .confidence
            .partial_cmp(&proposals[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// The `k` most confident proposals in descending order, zero-padded to
/// exactly `k` rows.
pub fn select_top_k<T: Scalar>(proposals: &[Proposal<T>], k: usize) -> Vec<Proposal<T>> {
    let mut out: Vec<Proposal<T>> = confidence_order(proposals).into_iter().take(k).map(|i| proposals[i]).collect();
    out.resize(k, Proposal::zero());
    out
}

/// Class-agnostic greedy NMS followed by confidence thresholding.
///
/// A proposal is suppressed when its IoU with an already kept, more
/// confident proposal is strictly greater than `rho_iou`; survivors below
/// `rho_c` are then discarded. Output is in descending confidence order.
pub fn nms<T: Scalar>(proposals: &[Proposal<T>], rho_iou: T, rho_c: T) -> Vec<Proposal<T>> {
    let order = confidence_order(proposals);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let anchor = &proposals[order[i]];
        kept.push(*anchor);
        for j in (i + 1)..order.len() {
            if !suppressed[j] && iou(&anchor.bbox, &proposals[order[j]].bbox) > rho_iou {
                suppressed[j] = true;
            }
        }
    }
    kept.retain(|p| p.confidence >= rho_c);
    kept
}

/// Best ground truth per proposal by IoU, lowest index on ties.
pub fn match_to_gt<T: Scalar>(proposals: &[Proposal<T>], gts: &[GroundTruth<T>]) -> Vec<MatchResult<T>> {
    proposals
        .iter()
        .map(|p| {
            let mut best = MatchResult {
                gt_index: None,
                iou: T::zero(),
            };
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(&p.bbox, &gt.bbox);
                if best.gt_index.is_none() || v > best.iou {
                    best = MatchResult { gt_index: Some(g), iou: v };
                }
            }
            best
        })
        .collect()
}

/// Class target for one proposal: the matched class when the overlap
/// reaches `rho_iou`, background otherwise.
pub fn relabel_target<T: Scalar>(m: &MatchResult<T>, gt_class: usize, rho_iou: T, classes: &ClassSet) -> usize {
    match m.gt_index {
        Some(_) if m.iou >= rho_iou => gt_class,
        _ => classes.background_index(),
    }
}
