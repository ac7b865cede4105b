//! Anchor-to-object clustering, per-object normalized overlap (PONO), the
//! predicted IoU map and positive-label rules.

use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{decode, iou, BBox, Offsets};
use crate::grid::CellMap;

/// Ground-truth objects of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BBox>, class_ids: Vec<usize>) -> Result<Self> {
        if boxes.len() != class_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boxes but {} class ids",
                boxes.len(),
                class_ids.len()
            )));
        }
        Ok(GroundTruth { boxes, class_ids })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn push(&mut self, bbox: BBox, class_id: usize) {
        self.boxes.push(bbox);
        self.class_ids.push(class_id);
    }
}

/// Index of the ground truth each anchor cell belongs to, `None` if the cell
/// overlaps no object of its class.
pub type AssignmentMap = CellMap<Option<usize>>;
/// `O`: overlap normalized by the best overlap within each object's cluster.
pub type PonoMap = CellMap<f64>;
/// `Ô`: IoU between each decoded prediction and its assigned object.
pub type PredIoUMap = CellMap<f64>;
pub type LabelMap = CellMap<bool>;

/// Assigns every cell to the same-class object of highest IoU (lowest index
/// wins ties). Cells with zero IoU to every same-class object stay unassigned.
///
/// An object that wins no cell this way (every overlapping cell prefers a
/// neighbor) takes over its best-overlapping cell from an owner that keeps at
/// least one other cell, so no object ends up with an empty cluster.
pub fn assign_ao(grid: &AnchorGrid, gt: &GroundTruth) -> AssignmentMap {
    let dims = grid.dims();
    let mut data: Vec<Option<usize>> = grid
        .cells()
        .iter()
        .enumerate()
        .map(|(idx, anchor)| {
            let (c, _) = dims.grid_of(idx);
            let mut best: Option<(usize, f64)> = None;
            for (n, (b, &cls)) in gt.boxes.iter().zip(&gt.class_ids).enumerate() {
                if cls != c {
                    continue;
                }
                let v = iou(anchor, b);
                if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((n, v));
                }
            }
            best.map(|(n, _)| n)
        })
        .collect();

    let mut size = vec![0usize; gt.len()];
    for n in data.iter().flatten() {
        size[*n] += 1;
    }
    for n in 0..gt.len() {
        if size[n] > 0 {
            continue;
        }
        let mut steal: Option<(usize, f64)> = None;
        for (idx, anchor) in grid.cells().iter().enumerate() {
            if dims.grid_of(idx).0 != gt.class_ids[n] {
                continue;
            }
            let Some(owner) = data[idx] else { continue };
            if size[owner] < 2 {
                continue;
            }
            let v = iou(anchor, &gt.boxes[n]);
            if v > 0.0 && steal.map_or(true, |(_, bv)| v > bv) {
                steal = Some((idx, v));
            }
        }
        if let Some((idx, _)) = steal {
            size[data[idx].expect("stolen cell is assigned")] -= 1;
            data[idx] = Some(n);
            size[n] = 1;
        }
    }
    CellMap::from_vec(dims, data)
}

/// Raw IoU of each cell's anchor with its assigned object (0 if unassigned).
pub fn assigned_overlap(grid: &AnchorGrid, gt: &GroundTruth, assignment: &AssignmentMap) -> CellMap<f64> {
    let data = grid
        .cells()
        .iter()
        .zip(assignment.values())
        .map(|(anchor, asg)| asg.map_or(0.0, |n| iou(anchor, &gt.boxes[n])))
        .collect();
    CellMap::from_vec(grid.dims(), data)
}

/// Per-object normalized overlap: each cluster member's IoU divided by the
/// cluster maximum.
pub fn compute_pono(grid: &AnchorGrid, gt: &GroundTruth, assignment: &AssignmentMap) -> PonoMap {
    let ao = assigned_overlap(grid, gt, assignment);
    let mut cluster_max = vec![0.0f64; gt.len()];
    for (v, asg) in ao.values().iter().zip(assignment.values()) {
        if let Some(n) = *asg {
            cluster_max[n] = cluster_max[n].max(*v);
        }
    }
    let data = ao
        .values()
        .iter()
        .zip(assignment.values())
        .map(|(v, asg)| asg.map_or(0.0, |n| v / cluster_max[n]))
        .collect();
    CellMap::from_vec(grid.dims(), data)
}

/// IoU between `decode(anchor, offsets)` and the assigned object per cell.
pub fn pred_iou_map(
    grid: &AnchorGrid,
    offsets: &[Offsets],
    gt: &GroundTruth,
    assignment: &AssignmentMap,
) -> Result<PredIoUMap> {
    if offsets.len() != grid.cells().len() {
        return Err(Error::shape(
            "pred_iou_map",
            format!("{} offsets for {} cells", offsets.len(), grid.cells().len()),
        ));
    }
    let data = grid
        .cells()
        .iter()
        .zip(offsets)
        .zip(assignment.values())
        .map(|((anchor, off), asg)| asg.map_or(0.0, |n| iou(&decode(anchor, off), &gt.boxes[n])))
        .collect();
    Ok(CellMap::from_vec(grid.dims(), data))
}

/// Ambiguity-aware labels: positive where `o * o_hat > threshold`.
pub fn ams_labels(o: &PonoMap, o_hat: &PredIoUMap, threshold: f64) -> Result<LabelMap> {
    if o.dims() != o_hat.dims() {
        return Err(Error::shape(
            "ams_labels",
            format!("{:?} vs {:?}", o.dims(), o_hat.dims()),
        ));
    }
    let data = o
        .values()
        .iter()
        .zip(o_hat.values())
        .map(|(a, b)| a * b > threshold)
        .collect();
    Ok(CellMap::from_vec(o.dims(), data))
}

/// Positive where `o > threshold`. Applied to the PONO map, or to the raw
/// assigned IoU for the absolute-overlap baseline.
pub fn pono_labels(o: &PonoMap, threshold: f64) -> LabelMap {
    o.map(|&v| v > threshold)
}
