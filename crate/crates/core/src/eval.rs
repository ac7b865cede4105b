//! Detection extraction, greedy matching, all-points average precision and
//! mAP.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::anchors::AnchorGrid;
use crate::assignment::GroundTruth;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{decode, iou, nms, Detection, Offsets};
use crate::model::{Model, PredictorOutput};

/// Default IoU needed for a detection to match a ground truth.
pub const IOU_MATCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decodes every cell scoring at least `score_min` and applies per-class NMS.
pub fn extract_detections(
    out: &PredictorOutput,
    grid: &AnchorGrid,
    score_min: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let dims = grid.dims();
    if out.logits.len() != dims.len() || out.offsets.len() != 4 * dims.len() {
        return Err(Error::shape(
            "extract_detections",
            format!(
                "logits {:?} and offsets {:?} for {} cells",
                out.logits.shape(),
                out.offsets.shape(),
                dims.len()
            ),
        ));
    }
    let off = out.offsets.data();
    let mut dets = Vec::new();
    for (idx, (&z, anchor)) in out.logits.data().iter().zip(grid.cells()).enumerate() {
        let score = sigmoid(z);
        if score < score_min {
            continue;
        }
        let o = &off[4 * idx..4 * idx + 4];
        dets.push(Detection {
            bbox: decode(anchor, &Offsets::new(o[0], o[1], o[2], o[3])),
            class_id: dims.grid_of(idx).0,
            score,
        });
    }
    Ok(nms(&dets, nms_iou, true))
}

/// Detections of one class across scenes, ordered by descending score
/// (stable for ties), with their true-positive flags.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[GroundTruth],
    class_id: usize,
    iou_match: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut flat: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (s, d)))
        .collect();
    flat.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts
        .iter()
        .map(|g| g.class_ids.iter().filter(|&&c| c == class_id).count())
        .sum();
    let flags = flat
        .iter()
        .map(|&(s, d)| {
            let Some(g) = gts.get(s) else { return (d.score, false) };
            let mut best: Option<(usize, f64)> = None;
            for (n, (b, &c)) in g.boxes.iter().zip(&g.class_ids).enumerate() {
                if c != class_id || used[s][n] {
                    continue;
                }
                let v = iou(&d.bbox, b);
                if v >= iou_match && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((n, v));
                }
            }
            if let Some((n, _)) = best {
                used[s][n] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    (flags, n_gt)
}

/// Precision and recall after each detection in score order.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[GroundTruth], class_id: usize, iou_match: f64) -> Vec<PRPoint> {
    let (flags, n_gt) = match_class(dets, gts, class_id, iou_match);
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &(score, hit))| {
            tp += hit as usize;
            PRPoint {
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                precision: tp as f64 / (k + 1) as f64,
                score_threshold: score,
            }
        })
        .collect()
}

/// All-points AP for one class: area under the precision envelope. `dets`
/// and `gts` are indexed by scene. Returns 0 when the class has no ground
/// truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[GroundTruth], iou_match: f64, class_id: usize) -> f64 {
    let curve = pr_curve(dets, gts, class_id, iou_match);
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    // walking backwards keeps the envelope at the best precision to the right
    for (k, p) in curve.iter().enumerate().rev() {
        envelope = envelope.max(p.precision);
        let prev = if k == 0 { 0.0 } else { curve[k - 1].recall };
        ap += (p.recall - prev) * envelope;
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground truth.
    pub map: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,AP,n_gt,n_det\n");
        for c in &self.classes {
            writeln!(s, "{},{},{},{}", c.class_id, c.ap, c.n_gt, c.n_det).expect("write to String");
        }
        writeln!(s, "mAP,{},,", self.map).expect("write to String");
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            writeln!(
                s,
                "class {:>2}  AP {:.4}  gt {:>5}  det {:>6}",
                c.class_id, c.ap, c.n_gt, c.n_det
            )
            .expect("write to String");
        }
        writeln!(s, "mAP@{IOU_MATCH} {:.4}", self.map).expect("write to String");
        s
    }
}

pub fn map_eval(dets: &[Vec<Detection>], gts: &[GroundTruth], n_classes: usize, iou_match: f64) -> EvalReport {
    let classes: Vec<ClassReport> = (0..n_classes)
        .map(|c| ClassReport {
            class_id: c,
            ap: average_precision(dets, gts, iou_match, c),
            n_gt: gts
                .iter()
                .map(|g| g.class_ids.iter().filter(|&&k| k == c).count())
                .sum(),
            n_det: dets.iter().map(|d| d.iter().filter(|x| x.class_id == c).count()).sum(),
        })
        .collect();
    let present: Vec<f64> = classes.iter().filter(|c| c.n_gt > 0).map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalReport { classes, map }
}

/// Runs the model on every scene and scores the detections.
pub fn evaluate_model(
    model: &Model,
    grid: &AnchorGrid,
    scenes: &[Scene],
    n_classes: usize,
    score_min: f64,
    nms_iou: f64,
    iou_match: f64,
) -> Result<EvalReport> {
    let mut dets = Vec::with_capacity(scenes.len());
    for s in scenes {
        dets.push(extract_detections(&model.predict(&s.image)?, grid, score_min, nms_iou)?);
    }
    let gts: Vec<GroundTruth> = scenes.iter().map(|s| s.gt.clone()).collect();
    Ok(map_eval(&dets, &gts, n_classes, iou_match))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // tied values share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ or are below 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{build_grid, AnchorSet};
    use crate::autodiff::Tensor;
    use crate::geometry::BBox;

    fn det(b: BBox, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
        }
    }

    #[test]
    fn ap_examples() {
        let a = BBox::new(10.0, 10.0, 8.0, 8.0);
        let b = BBox::new(40.0, 40.0, 8.0, 8.0);
        let far = BBox::new(100.0, 100.0, 8.0, 8.0);
        let gt = vec![GroundTruth::new(vec![a, b], vec![0, 0]).unwrap()];
        let perfect = vec![vec![det(a, 0, 0.9), det(b, 0, 0.8)]];
        assert_eq!(average_precision(&perfect, &gt, 0.5, 0), 1.0);
        assert_eq!(average_precision(&[vec![]], &gt, 0.5, 0), 0.0);
        let mixed = vec![vec![det(a, 0, 0.9), det(far, 0, 0.8), det(b, 0, 0.7)]];
        assert!((average_precision(&mixed, &gt, 0.5, 0) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_over_present_classes() {
        let a = BBox::new(10.0, 10.0, 8.0, 8.0);
        let b = BBox::new(40.0, 40.0, 8.0, 8.0);
        let gt = vec![GroundTruth::new(vec![a, b], vec![0, 1]).unwrap()];
        let r = map_eval(&[vec![det(a, 0, 0.9)]], &gt, 3, 0.5);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.classes[2].n_gt, 0);
        let all = map_eval(&[vec![det(a, 0, 0.9), det(b, 1, 0.3)]], &gt, 2, 0.5);
        assert_eq!(all.map, 1.0);
        assert!(all.to_csv().starts_with("class,AP,n_gt,n_det\n0,1,1,1\n"));
    }

    #[test]
    fn each_gt_matches_once() {
        let a = BBox::new(10.0, 10.0, 8.0, 8.0);
        let gt = vec![GroundTruth::new(vec![a], vec![0]).unwrap()];
        let curve = pr_curve(&[vec![det(a, 0, 0.9), det(a, 0, 0.8)]], &gt, 0, 0.5);
        assert_eq!(curve[1].recall, 1.0);
        assert_eq!(curve[1].precision, 0.5);
    }

    fn one_cell_grid() -> AnchorGrid {
        build_grid(&AnchorSet::new(vec![vec![(8.0, 8.0), (16.0, 16.0)]]).unwrap(), 2, 2, 8).unwrap()
    }

    #[test]
    fn extraction_examples() {
        let grid = one_cell_grid();
        let mut out = PredictorOutput {
            logits: Tensor::full(&[2, 2, 2], -10.0),
            offsets: Tensor::zeros(&[2, 2, 8]),
        };
        assert!(extract_detections(&out, &grid, 0.05, 0.5).unwrap().is_empty());

        out.logits.data_mut()[0] = 10.0;
        let d = extract_detections(&out, &grid, 0.05, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, *grid.cell(0, 0, 0, 0));
        assert!(d[0].score > 0.9999);

        // neighbor cell shifted onto the same box collapses under NMS
        out.logits.data_mut()[2] = 9.0;
        out.offsets.data_mut()[8] = -1.0;
        let d = extract_detections(&out, &grid, 0.05, 0.5).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
