//! Boxes, anchor grids, IOU, anchor labeling, and non-maximum suppression.

/// Axis-aligned box in continuous image coordinates, `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        assert!(x1 <= x2 && y1 <= y2, "invalid box ({x1},{y1},{x2},{y2})");
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Per-anchor training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground,
    Background,
    Ignore,
}

/// Intersection over union. Defined as 0 for disjoint or zero-area inputs.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Tile anchors over a `grid_h` x `grid_w` grid of cells of size `stride`.
///
/// Each cell center carries one anchor per (scale, ratio): area `scale^2`,
/// height/width ratio `ratio`. Order is row-major over cells, then scale,
/// then ratio.
pub fn generate_anchors(
    grid_h: usize,
    grid_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Bbox> {
    assert!(grid_h >= 1 && grid_w >= 1, "grid must be at least 1x1");
    assert!(!scales.is_empty() && !ratios.is_empty(), "scales/ratios must be nonempty");
    let mut anchors = Vec::with_capacity(grid_h * grid_w * scales.len() * ratios.len());
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let cx = (gx as f64 + 0.5) * stride;
            let cy = (gy as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    // w*h = s^2 with h/w = r.
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    anchors.push(Bbox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    anchors
}

/// Label anchors against ground truth.
///
/// Foreground when max IOU over ground truth reaches `fg_thresh`, or when the
/// anchor is the best (argmax IOU, ties to the lower index) for some ground
/// truth box with positive IOU. Background when max IOU is at most
/// `bg_thresh`. Everything else is ignored. Empty ground truth labels
/// everything background.
pub fn label_anchors(
    anchors: &[Bbox],
    gt: &[Bbox],
    fg_thresh: f64,
    bg_thresh: f64,
) -> Vec<AnchorLabel> {
    assert!(fg_thresh > bg_thresh, "fg_thresh must exceed bg_thresh");
    if gt.is_empty() {
        return vec![AnchorLabel::Background; anchors.len()];
    }
    let mut max_iou = vec![0.0f64; anchors.len()];
    let mut forced_fg = vec![false; anchors.len()];
    for g in gt {
        let mut best = 0.0f64;
        let mut best_idx = None;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > max_iou[i] {
                max_iou[i] = v;
            }
            if v > best {
                best = v;
                best_idx = Some(i);
            }
        }
        if let Some(i) = best_idx {
            forced_fg[i] = true;
        }
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, _)| {
            if max_iou[i] >= fg_thresh || forced_fg[i] {
                AnchorLabel::Foreground
            } else if max_iou[i] <= bg_thresh {
                AnchorLabel::Background
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-scored unsuppressed box and suppresses every
/// box whose IOU with it exceeds `iou_thresh`. Returns kept indices in
/// descending score order; score ties go to the lower original index.
pub fn nms(boxes: &[Bbox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN").then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}
