//! Per-class anchor shapes from IoU k-means, and the dense anchor grid.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{shape_iou, BBox};
use crate::grid::GridDims;

/// Anchor shapes `(w, h)` per class, each class sorted by ascending area.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    shapes: Vec<Vec<(f64, f64)>>,
}

impl AnchorSet {
    pub fn new(mut shapes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let n_a = shapes.first().map_or(0, Vec::len);
        if shapes.is_empty() || n_a == 0 {
            return Err(Error::InvalidArgument(
                "anchor set must have at least one class and one shape".into(),
            ));
        }
        for (c, class) in shapes.iter_mut().enumerate() {
            if class.len() != n_a {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} anchors, expected {n_a}",
                    class.len()
                )));
            }
            if class
                .iter()
                .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
            {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has a non-positive anchor shape"
                )));
            }
            sort_by_area(class);
        }
        Ok(AnchorSet { shapes })
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn shape(&self, class_id: usize, anchor: usize) -> (f64, f64) {
        self.shapes[class_id][anchor]
    }

    pub fn class_shapes(&self, class_id: usize) -> &[(f64, f64)] {
        &self.shapes[class_id]
    }

    /// One `class w h` line per anchor.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# class w h\n");
        for (c, class) in self.shapes.iter().enumerate() {
            for &(w, h) in class {
                let _ = writeln!(out, "{c} {w} {h}");
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut shapes: Vec<Vec<(f64, f64)>> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    origin,
                    idx + 1,
                    format!("expected `class w h`, got {} fields", fields.len()),
                ));
            }
            let bad = |what: &str| Error::parse(origin, idx + 1, format!("invalid {what}"));
            let c: usize = fields[0].parse().map_err(|_| bad("class id"))?;
            let w: f64 = fields[1].parse().map_err(|_| bad("width"))?;
            let h: f64 = fields[2].parse().map_err(|_| bad("height"))?;
            if c >= shapes.len() {
                shapes.resize(c + 1, Vec::new());
            }
            shapes[c].push((w, h));
        }
        AnchorSet::new(shapes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

fn sort_by_area(shapes: &mut [(f64, f64)]) {
    shapes.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
}

/// Result of clustering one class.
#[derive(Debug, Clone)]
pub struct ShapeClusters {
    pub centroids: Vec<(f64, f64)>,
    /// Summed `1 - IoU` to the nearest centroid, recorded after seeding and
    /// after every update.
    pub objective: Vec<f64>,
}

/// Runs IoU k-means independently for every class.
pub fn kmeans_anchors(
    gt_sizes_per_class: &[Vec<(f64, f64)>],
    n_a: usize,
    seed: u64,
    max_iter: usize,
) -> Result<AnchorSet> {
    if n_a == 0 {
        return Err(Error::InvalidArgument("n_a must be at least 1".into()));
    }
    let mut shapes = Vec::with_capacity(gt_sizes_per_class.len());
    for (c, sizes) in gt_sizes_per_class.iter().enumerate() {
        if sizes.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let class_seed = seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        shapes.push(kmeans_shapes(sizes, n_a, class_seed, max_iter).centroids);
    }
    AnchorSet::new(shapes)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - shape_iou(a, b)
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, &c) in centroids.iter().enumerate() {
        let d = distance(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(points: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    points.iter().map(|&p| nearest(p, centroids).1).sum()
}

/// k-means over box shapes with `1 - IoU` distance.
///
/// Seeding picks one sample at random, then repeatedly the sample farthest
/// from all chosen centroids. Each update moves a centroid to the shape that
/// minimizes the summed distance to its members, so the objective never
/// increases.
pub fn kmeans_shapes(points: &[(f64, f64)], k: usize, seed: u64, max_iter: usize) -> ShapeClusters {
    assert!(!points.is_empty() && k >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let mut far = (0, -1.0);
        for (i, &p) in points.iter().enumerate() {
            let d = nearest(p, &centroids).1;
            if d > far.1 {
                far = (i, d);
            }
        }
        centroids.push(points[far.0]);
    }

    let mut history = vec![objective(points, &centroids)];
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(points[i]);
        }
        for c in 0..k {
            if members[c].is_empty() {
                // Empty cluster: restart it on the worst-served point.
                let mut worst = (0, -1.0);
                for (i, &p) in points.iter().enumerate() {
                    let d = distance(p, centroids[assignment[i]]);
                    if d > worst.1 {
                        worst = (i, d);
                    }
                }
                centroids[c] = points[worst.0];
            } else {
                centroids[c] = best_shape(&members[c], centroids[c]);
            }
        }
        history.push(objective(points, &centroids));
    }

    sort_by_area(&mut centroids);
    ShapeClusters {
        centroids,
        objective: history,
    }
}

fn summed_iou(points: &[(f64, f64)], s: (f64, f64)) -> f64 {
    points.iter().map(|&p| shape_iou(p, s)).sum()
}

/// Shape maximizing the summed IoU with `points`, never worse than `current`.
///
/// The optimum lies inside the bounding range of the member shapes. Candidates
/// are the grid of member widths x member heights (quantile-thinned for large
/// clusters), refined by a shrinking pattern search.
pub fn best_shape(points: &[(f64, f64)], current: (f64, f64)) -> (f64, f64) {
    const MAX_BREAKPOINTS: usize = 24;

    let thin = |mut v: Vec<f64>| -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v.dedup();
        if v.len() <= MAX_BREAKPOINTS {
            return v;
        }
        (0..MAX_BREAKPOINTS)
            .map(|q| v[q * (v.len() - 1) / (MAX_BREAKPOINTS - 1)])
            .collect()
    };
    let ws = thin(points.iter().map(|p| p.0).collect());
    let hs = thin(points.iter().map(|p| p.1).collect());
    let (w_lo, w_hi) = (ws[0], *ws.last().unwrap());
    let (h_lo, h_hi) = (hs[0], *hs.last().unwrap());

    let n = points.len() as f64;
    let mean = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );

    let mut best = current;
    let mut best_val = summed_iou(points, current);
    let consider = |s: (f64, f64), best: &mut (f64, f64), best_val: &mut f64| {
        let v = summed_iou(points, s);
        if v > *best_val {
            *best = s;
            *best_val = v;
        }
    };
    consider(mean, &mut best, &mut best_val);
    for &w in &ws {
        for &h in &hs {
            consider((w, h), &mut best, &mut best_val);
        }
    }

    let mut step_w = (w_hi - w_lo).max(1e-9 * w_hi) * 0.25;
    let mut step_h = (h_hi - h_lo).max(1e-9 * h_hi) * 0.25;
    let tol = 1e-10 * w_hi.max(h_hi);
    while step_w > tol || step_h > tol {
        let mut moved = false;
        for (sw, sh) in [
            (1.0, 0.0),
            (-1.0, 0.0),
            (0.0, 1.0),
            (0.0, -1.0),
            (1.0, 1.0),
            (-1.0, -1.0),
            (1.0, -1.0),
            (-1.0, 1.0),
        ] {
            let cand = (
                (best.0 + sw * step_w).clamp(w_lo, w_hi),
                (best.1 + sh * step_h).clamp(h_lo, h_hi),
            );
            let v = summed_iou(points, cand);
            if v > best_val {
                best = cand;
                best_val = v;
                moved = true;
            }
        }
        if !moved {
            step_w *= 0.5;
            step_h *= 0.5;
        }
    }
    best
}

/// Dense lattice of anchor boxes, one per (row, col, class, shape).
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    dims: GridDims,
    feat_stride: usize,
    cells: Vec<BBox>,
}

impl AnchorGrid {
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn feat_stride(&self) -> usize {
        self.feat_stride
    }

    pub fn cells(&self) -> &[BBox] {
        &self.cells
    }

    pub fn cell(&self, i: usize, j: usize, c: usize, a: usize) -> &BBox {
        &self.cells[self.dims.index(i, j, c, a)]
    }

    /// Image extent `(height, width)` covered by the grid.
    pub fn image_size(&self) -> (usize, usize) {
        (self.dims.h * self.feat_stride, self.dims.w * self.feat_stride)
    }
}

pub fn build_grid(anchor_set: &AnchorSet, h_f: usize, w_f: usize, feat_stride: usize) -> Result<AnchorGrid> {
    if h_f == 0 || w_f == 0 || feat_stride == 0 {
        return Err(Error::InvalidArgument("grid size and stride must be at least 1".into()));
    }
    let dims = GridDims::new(h_f, w_f, anchor_set.n_classes(), anchor_set.n_anchors());
    let s = feat_stride as f64;
    let mut cells = Vec::with_capacity(dims.len());
    for i in 0..h_f {
        for j in 0..w_f {
            for c in 0..dims.classes {
                for a in 0..dims.anchors {
                    let (w, h) = anchor_set.shape(c, a);
                    cells.push(BBox::new((j as f64 + 0.5) * s, (i as f64 + 0.5) * s, w, h));
                }
            }
        }
    }
    Ok(AnchorGrid {
        dims,
        feat_stride,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes_give_identical_centroids() {
        let set = kmeans_anchors(&[vec![(10.0, 10.0); 20]], 3, 7, 50).unwrap();
        assert_eq!(set.class_shapes(0), &[(10.0, 10.0); 3]);
    }

    #[test]
    fn two_shape_data_recovers_both_shapes() {
        let mut pts = vec![(10.0, 10.0); 50];
        pts.extend(vec![(40.0, 40.0); 50]);
        for seed in 0..5 {
            let set = kmeans_anchors(&[pts.clone()], 2, seed, 50).unwrap();
            assert_eq!(set.class_shapes(0), &[(10.0, 10.0), (40.0, 40.0)]);
        }
    }

    #[test]
    fn empty_class_is_named() {
        let err = kmeans_anchors(&[vec![(1.0, 1.0)], vec![]], 1, 0, 10).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(1)));
    }

    fn grid_search(points: &[(f64, f64)], steps: usize) -> ((f64, f64), f64) {
        let w_lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let w_hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
        let h_lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let h_hi = points.iter().map(|p| p.1).fold(0.0, f64::max);
        let mut best = ((0.0, 0.0), f64::INFINITY);
        for i in 0..=steps {
            for j in 0..=steps {
                let w = w_lo + (w_hi - w_lo) * i as f64 / steps as f64;
                let h = h_lo + (h_hi - h_lo) * j as f64 / steps as f64;
                let cost: f64 = points.iter().map(|&p| 1.0 - shape_iou(p, (w, h))).sum();
                if cost < best.1 {
                    best = ((w, h), cost);
                }
            }
        }
        best
    }

    #[test]
    fn single_centroid_matches_grid_search() {
        let pts = [(4.0, 9.0), (12.0, 5.0), (7.0, 7.0), (20.0, 18.0), (9.0, 15.0)];
        let fit = kmeans_shapes(&pts, 1, 3, 100);
        let c = fit.centroids[0];
        let cost = *fit.objective.last().unwrap();
        let (oracle, oracle_cost) = grid_search(&pts, 400);
        assert!(cost <= oracle_cost + 1e-9, "{cost} vs {oracle_cost}");
        assert!(
            (c.0 - oracle.0).abs() < 0.2 && (c.1 - oracle.1).abs() < 0.2,
            "{c:?} vs {oracle:?}"
        );
    }

    #[test]
    fn grid_centers_and_shapes() {
        let set = AnchorSet::new(vec![vec![(4.0, 4.0)]]).unwrap();
        let g = build_grid(&set, 1, 1, 8).unwrap();
        assert_eq!(g.cells(), &[BBox::new(4.0, 4.0, 4.0, 4.0)]);

        let g = build_grid(&set, 2, 2, 8).unwrap();
        let centers: Vec<_> = g.cells().iter().map(|b| (b.cx, b.cy)).collect();
        assert_eq!(centers, vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
    }

    #[test]
    fn anchor_text_round_trip() {
        let set = AnchorSet::new(vec![vec![(30.0, 3.5), (1.25, 2.0)], vec![(7.0, 7.0), (6.0, 6.0)]]).unwrap();
        assert_eq!(set.class_shapes(0)[0], (1.25, 2.0));
        let back = AnchorSet::parse(&set.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, set);
        let err = AnchorSet::parse("0 1.0\n", Path::new("a.txt")).unwrap_err();
        assert!(err.to_string().contains("a.txt:1"));
    }

    proptest! {
        #[test]
        fn kmeans_deterministic_and_monotone(
            pts in prop::collection::vec((2.0..60.0f64, 2.0..60.0f64), 1..60),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let a = kmeans_shapes(&pts, k, seed, 30);
            let b = kmeans_shapes(&pts, k, seed, 30);
            prop_assert_eq!(&a.centroids, &b.centroids);
            for w in a.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "objective rose: {:?}", a.objective);
            }
            for c in a.centroids.windows(2) {
                prop_assert!(c[0].0 * c[0].1 <= c[1].0 * c[1].1);
            }
        }

        #[test]
        fn grid_shape_contract(
            h_f in 1usize..6, w_f in 1usize..6, stride in 1usize..16,
            n_c in 1usize..3, n_a in 1usize..4,
        ) {
            let shapes = (0..n_c).map(|c| (0..n_a).map(|a| (1.0 + a as f64, 2.0 + c as f64)).collect()).collect();
            let set = AnchorSet::new(shapes).unwrap();
            let g = build_grid(&set, h_f, w_f, stride).unwrap();
            prop_assert_eq!(g.cells().len(), h_f * w_f * n_c * n_a);
            let (ih, iw) = g.image_size();
            for i in 0..h_f { for j in 0..w_f { for c in 0..n_c { for a in 0..n_a {
                let b = g.cell(i, j, c, a);
                prop_assert!(b.cx > 0.0 && b.cx < iw as f64 && b.cy > 0.0 && b.cy < ih as f64);
                prop_assert_eq!((b.w, b.h), set.shape(c, a));
            }}}}
        }
    }
}
