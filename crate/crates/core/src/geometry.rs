//! Axis-aligned boxes, IoU, the anchor offset codec and greedy NMS.

use std::cmp::Ordering;

/// Largest magnitude allowed for `dw`/`dh` before exponentiation (`ln 1000`).
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137;

/// Axis-aligned box in center-size form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Panics if `w` or `h` is not strictly positive and finite.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        assert!(
            w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite(),
            "box extent must be positive, got {w}x{h}"
        );
        BBox { cx, cy, w, h }
    }

    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let ok = w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite();
        (ok && cx.is_finite() && cy.is_finite()).then_some(BBox { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Regression targets applied to an anchor: center shifts relative to anchor
/// size and log-scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offsets {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Offsets {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Offsets { dx, dy, dw, dh }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two shapes placed at a common center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Applies offsets to an anchor.
pub fn decode(anchor: &BBox, off: &Offsets) -> BBox {
    let dw = off.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = off.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    BBox {
        cx: anchor.cx + off.dx * anchor.w,
        cy: anchor.cy + off.dy * anchor.h,
        w: anchor.w * dw.exp(),
        h: anchor.h * dh.exp(),
    }
}

/// Inverse of [`decode`] (ignoring the scale clamp).
pub fn encode(anchor: &BBox, target: &BBox) -> Offsets {
    Offsets {
        dx: (target.cx - anchor.cx) / anchor.w,
        dy: (target.cy - anchor.cy) / anchor.h,
        dw: (target.w / anchor.w).ln(),
        dh: (target.h / anchor.h).ln(),
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties: lower class id, then
/// input order). A candidate is dropped when it overlaps an already kept
/// detection above `iou_threshold`; with `per_class` only detections of the
/// same class suppress each other.
pub fn nms(dets: &[Detection], iou_threshold: f64, per_class: bool) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });

    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| (!per_class || k.class_id == cand.class_id) && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(cx: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(cx, 1.0, 2.0, 2.0),
            class_id,
            score,
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(5.0, 5.0, 3.0, 4.0);
        assert_eq!(iou(&b, &b), 1.0);
        let far = BBox::new(50.0, 50.0, 3.0, 4.0);
        assert_eq!(iou(&b, &far), 0.0);
    }

    #[test]
    fn iou_half_shifted_square() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        let b = BBox::new(2.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn decode_examples() {
        let a = BBox::new(10.0, 10.0, 4.0, 4.0);
        assert_eq!(decode(&a, &Offsets::default()), a);

        let d = decode(&a, &Offsets::new(0.5, 0.0, 2f64.ln(), 0.0));
        assert!((d.cx - 12.0).abs() < 1e-12);
        assert_eq!(d.cy, 10.0);
        assert!((d.w - 8.0).abs() < 1e-12);
        assert_eq!(d.h, 4.0);

        let big = decode(&a, &Offsets::new(0.0, 0.0, 100.0, 0.0));
        assert!((big.w - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5, true).is_empty());
        let one = [det(1.0, 0.7, 0)];
        assert_eq!(nms(&one, 0.5, true), one.to_vec());

        let dup = [det(1.0, 0.8, 0), det(1.0, 0.9, 0)];
        let kept = nms(&dup, 0.5, true);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        // iou = 1/3
        let pair = [det(1.0, 0.9, 0), det(2.0, 0.8, 0)];
        assert_eq!(nms(&pair, 0.5, true).len(), 2);
    }

    #[test]
    fn nms_class_awareness_and_tie_break() {
        let dets = [det(1.0, 0.9, 1), det(1.0, 0.9, 0)];
        let per_class = nms(&dets, 0.5, true);
        assert_eq!(per_class.len(), 2);
        assert_eq!(per_class[0].class_id, 0);
        let agnostic = nms(&dets, 0.5, false);
        assert_eq!(agnostic.len(), 1);
        assert_eq!(agnostic[0].class_id, 0);
    }

    fn corner_iou(a: &BBox, b: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
        let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
        let ix = if ax2 < bx2 { ax2 } else { bx2 } - if ax1 > bx1 { ax1 } else { bx1 };
        let iy = if ay2 < by2 { ay2 } else { by2 } - if ay1 > by1 { ay1 } else { by1 };
        let inter = if ix > 0.0 && iy > 0.0 { ix * iy } else { 0.0 };
        inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20.0..20.0f64, -20.0..20.0f64, 0.5..15.0f64, 0.5..15.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_matches_corner_oracle(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&b, &a)).abs() == 0.0);
            prop_assert!((v - corner_iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), t in arb_box()) {
            let back = decode(&a, &encode(&a, &t));
            prop_assert!((back.cx - t.cx).abs() < 1e-9);
            prop_assert!((back.cy - t.cy).abs() < 1e-9);
            prop_assert!((back.w - t.w).abs() < 1e-9 * t.w.max(1.0));
            prop_assert!((back.h - t.h).abs() < 1e-9 * t.h.max(1.0));
        }

        #[test]
        fn nms_output_is_sorted_suppressed_subset(
            raw in prop::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..25),
            thr in 0.1..1.0f64,
        ) {
            let dets: Vec<Detection> = raw.iter()
                .map(|&(bbox, class_id, score)| Detection { bbox, class_id, score })
                .collect();
            let kept = nms(&dets, thr, true);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }
    }
}
