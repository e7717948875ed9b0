//! Axis-aligned box arithmetic: IoU, ltrb offset encoding, centerness,
//! objectness scoring, and greedy non-maximum suppression.
//!
//! Coordinates are continuous reals; box math is scale-free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive area.
///
/// Serializes as the 4-array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::invalid(format!(
                "box must have strictly positive area, got [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True when `(x, y)` lies strictly inside the box.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        self.x1 < x && x < self.x2 && self.y1 < y && y < self.y2
    }

    /// Box translated by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// Non-negative distances from an interior location to the box's
/// left/top/right/bottom sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtrbOffsets {
    l: f64,
    t: f64,
    r: f64,
    b: f64,
}

impl LtrbOffsets {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Result<Self> {
        if ![l, t, r, b].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::invalid(
                "ltrb offsets must be finite and non-negative",
            ));
        }
        Ok(LtrbOffsets { l, t, r, b })
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }
}

/// A scored region proposal. The objectness `s = sqrt(c * b)` is computed on
/// construction, so the invariant holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    bbox: BBox,
    centerness: f64,
    iou_score: f64,
    objectness: f64,
}

impl Proposal {
    /// Builds a proposal from a box and its centerness / IoU-quality scores,
    /// both of which must already lie in [0, 1].
    pub fn new(bbox: BBox, centerness: f64, iou_score: f64) -> Result<Self> {
        let s = objectness(centerness, iou_score)?;
        Ok(Proposal {
            bbox,
            centerness,
            iou_score,
            objectness: s,
        })
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn centerness(&self) -> f64 {
        self.centerness
    }

    pub fn iou_score(&self) -> f64 {
        self.iou_score
    }

    pub fn objectness(&self) -> f64 {
        self.objectness
    }
}

/// Intersection-over-union of two boxes. Disjoint boxes (including boxes
/// sharing only an edge) score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Distances from a strictly interior location to the four box sides.
pub fn ltrb_encode(location: (f64, f64), bbox: &BBox) -> Result<LtrbOffsets> {
    let (x, y) = location;
    if !bbox.contains_strict(x, y) {
        return Err(Error::degenerate(format!(
            "location ({x}, {y}) is not strictly inside the box"
        )));
    }
    LtrbOffsets::new(x - bbox.x1, y - bbox.y1, bbox.x2 - x, bbox.y2 - y)
}

/// Inverse of [`ltrb_encode`]: rebuilds the box around the location.
pub fn ltrb_decode(location: (f64, f64), offsets: &LtrbOffsets) -> Result<BBox> {
    let (x, y) = location;
    if offsets.l + offsets.r <= 0.0 || offsets.t + offsets.b <= 0.0 {
        return Err(Error::degenerate(
            "ltrb offsets decode to a zero-area box",
        ));
    }
    BBox::new(x - offsets.l, y - offsets.t, x + offsets.r, y + offsets.b)
}

/// Localization-quality score of a location inside a box:
/// `sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))`.
///
/// 1 at the exact center, 0 on an edge.
pub fn centerness(offsets: &LtrbOffsets) -> Result<f64> {
    let (l, t, r, b) = (offsets.l, offsets.t, offsets.r, offsets.b);
    if l + r <= 0.0 || t + b <= 0.0 {
        return Err(Error::degenerate(
            "centerness is undefined for a zero-extent box",
        ));
    }
    let horiz = l.min(r) / l.max(r);
    let vert = t.min(b) / t.max(b);
    Ok((horiz * vert).sqrt())
}

/// Geometric mean `sqrt(c * b)` of centerness and IoU score.
pub fn objectness(c: f64, b: f64) -> Result<f64> {
    for (name, v) in [("centerness", c), ("iou score", b)] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "{name} must be in [0, 1], got {v}"
            )));
        }
    }
    Ok((c * b).sqrt())
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties broken by lower input
/// index); a box is suppressed when its IoU with an already-kept box reaches
/// `iou_thresh`. Returns kept indices in descending-score order.
pub fn nms(detections: &[(BBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .partial_cmp(&detections[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &idx in &order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&detections[k].0, &detections[idx].0) >= iou_thresh);
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}
