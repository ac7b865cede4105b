//! Localization and classification losses, learned balance weights and their
//! regularizer.
//!
//! Balance weights are stored as `s = ln(1/λ)`, so `λ = e^{-s}` is always
//! positive. The weighted totals are
//!
//! ```text
//! L_loc = λ_loc (1/N⁺) Σ_{c,a} λ_loc^{c,a} Σ_{i,j} loc(c,a,i,j)
//! L_cls = λ_cls (1/N)  Σ_{c,a} λ_cls^{c,a} Σ_{i,j} cls(c,a,i,j)
//! L_reg = s_cls + s_loc + (1/(N_C N_A)) Σ_{c,a} (s_cls^{c,a} + s_loc^{c,a})
//! ```
//!
//! with `N` the number of output cells and `N⁺` the number of cells whose
//! overlap passes the localization gate.

use std::fmt;
use std::str::FromStr;

use crate::assignment::LabelMap;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, MAX_LOG_SCALE};
use crate::grid::CellMap;

/// Overlap above which a cell contributes to the localization loss.
pub const LOC_GATE: f64 = 0.5;

/// Initial value of every `s` entry.
pub const S_INIT: f64 = 1.0;

/// How the loss terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// All four weight families trainable.
    Learned,
    /// Every λ fixed to 1, no regularizer.
    Unit,
    /// `λ_cls = N/N⁺`, the rest fixed to 1, no regularizer.
    RetinaNorm,
}

impl FromStr for WeightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(WeightMode::Learned),
            "unit" => Ok(WeightMode::Unit),
            "retina_norm" => Ok(WeightMode::RetinaNorm),
            _ => Err(Error::Config(format!(
                "unknown weight mode `{s}` (learned|unit|retina_norm)"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Learned => "learned",
            WeightMode::Unit => "unit",
            WeightMode::RetinaNorm => "retina_norm",
        })
    }
}

/// Per-cell classification loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClsLoss {
    CrossEntropy,
    Focal { alpha: f64, gamma: f64 },
}

impl ClsLoss {
    pub const FOCAL_DEFAULT: ClsLoss = ClsLoss::Focal {
        alpha: 0.25,
        gamma: 2.0,
    };
}

impl FromStr for ClsLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CE" | "ce" => Ok(ClsLoss::CrossEntropy),
            "FL" | "fl" => Ok(ClsLoss::FOCAL_DEFAULT),
            _ => Err(Error::Config(format!("unknown classification loss `{s}` (CE|FL)"))),
        }
    }
}

impl fmt::Display for ClsLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClsLoss::CrossEntropy => f.write_str("CE"),
            ClsLoss::Focal { .. } => f.write_str("FL"),
        }
    }
}

/// `(1 - o_hat)^2` where `o > 0.5`, else 0.
pub fn loc_loss_elem(o: f64, o_hat: f64) -> f64 {
    if o > LOC_GATE {
        (1.0 - o_hat).powi(2)
    } else {
        0.0
    }
}

/// Derivative of [`loc_loss_elem`] with respect to `o_hat`.
pub fn loc_loss_elem_grad(o: f64, o_hat: f64) -> f64 {
    if o > LOC_GATE {
        -2.0 * (1.0 - o_hat)
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary cross-entropy from a logit: `softplus(z) - p z`.
pub fn bce_with_logit(p: bool, z: f64) -> f64 {
    softplus(z) - if p { z } else { 0.0 }
}

/// Binary cross-entropy of a probability `p_hat` in `(0, 1)`.
pub fn cls_loss_elem(p: bool, p_hat: f64) -> f64 {
    bce_with_logit(p, logit(p_hat))
}

/// Focal loss from a logit: `α_t (1 - p_t)^γ (-ln p_t)`.
pub fn focal_with_logit(p: bool, z: f64, alpha: f64, gamma: f64) -> f64 {
    let t = if p { z } else { -z };
    let alpha_t = if p { alpha } else { 1.0 - alpha };
    // (1 - p_t)^γ = σ(-t)^γ = exp(-γ softplus(t))
    alpha_t * (-gamma * softplus(t)).exp() * softplus(-t)
}

pub fn focal_loss_elem(p: bool, p_hat: f64, alpha: f64, gamma: f64) -> f64 {
    focal_with_logit(p, logit(p_hat), alpha, gamma)
}

/// Trainable balance weights in `s = ln(1/λ)` form.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceWeights {
    pub n_classes: usize,
    pub n_anchors: usize,
    pub s_cls: f64,
    pub s_loc: f64,
    /// `[N_C][N_A]`, row-major.
    pub s_cls_grid: Vec<f64>,
    pub s_loc_grid: Vec<f64>,
}

impl BalanceWeights {
    pub fn new(n_classes: usize, n_anchors: usize, init: f64) -> Self {
        let k = n_classes * n_anchors;
        BalanceWeights {
            n_classes,
            n_anchors,
            s_cls: init,
            s_loc: init,
            s_cls_grid: vec![init; k],
            s_loc_grid: vec![init; k],
        }
    }

    pub fn grids(&self) -> usize {
        self.n_classes * self.n_anchors
    }

    pub fn lambda_cls(&self) -> f64 {
        (-self.s_cls).exp()
    }

    pub fn lambda_loc(&self) -> f64 {
        (-self.s_loc).exp()
    }

    pub fn lambda_cls_grid(&self, c: usize, a: usize) -> f64 {
        (-self.s_cls_grid[c * self.n_anchors + a]).exp()
    }

    pub fn lambda_loc_grid(&self, c: usize, a: usize) -> f64 {
        (-self.s_loc_grid[c * self.n_anchors + a]).exp()
    }

    /// `[s_cls, s_loc, s_cls_grid.., s_loc_grid..]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![self.s_cls, self.s_loc];
        v.extend(&self.s_cls_grid);
        v.extend(&self.s_loc_grid);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let k = self.grids();
        assert_eq!(flat.len(), 2 + 2 * k);
        self.s_cls = flat[0];
        self.s_loc = flat[1];
        self.s_cls_grid.copy_from_slice(&flat[2..2 + k]);
        self.s_loc_grid.copy_from_slice(&flat[2 + k..]);
    }

    /// Per-flat-entry freeze mask: grid entries of `(c, a)` with no positive
    /// label are frozen.
    pub fn freeze_mask(&self, per_grid_pos: &[usize]) -> Vec<bool> {
        let mut m = vec![false, false];
        m.extend(per_grid_pos.iter().map(|&n| n == 0));
        m.extend(per_grid_pos.iter().map(|&n| n == 0));
        m
    }
}

/// Per-grid loss aggregates of one image, or the mean over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub n_classes: usize,
    pub n_anchors: usize,
    /// `(1/N⁺) Σ_{i,j} loc` per `(c, a)`.
    pub loc: Vec<f64>,
    /// `(1/N) Σ_{i,j} cls` per `(c, a)`.
    pub cls: Vec<f64>,
    /// `(1/N⁺) Σ_{i,j} cls` per `(c, a)`, for the positive-count normalization.
    pub cls_pos_norm: Vec<f64>,
    /// Cells passing the localization gate (summed over a batch).
    pub n_pos: usize,
    /// Positive classification labels per `(c, a)` (summed over a batch).
    pub per_grid_pos: Vec<usize>,
}

/// Raw per-grid sums of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSums {
    pub loc: Vec<f64>,
    pub cls: Vec<f64>,
    pub n_pos: usize,
    pub n_cells: usize,
    pub per_grid_pos: Vec<usize>,
}

impl GridSums {
    /// Sums dense loss maps per `(c, a)` grid. `gate` is the overlap map that
    /// decides which cells count toward `N⁺`.
    pub fn from_maps(
        loc_map: &CellMap<f64>,
        cls_map: &CellMap<f64>,
        gate: &CellMap<f64>,
        labels: &LabelMap,
    ) -> Result<Self> {
        let dims = loc_map.dims();
        if cls_map.dims() != dims || gate.dims() != dims || labels.dims() != dims {
            return Err(Error::shape(
                "loss maps",
                "loc, cls, gate and label maps must share one grid",
            ));
        }
        let k = dims.grids();
        let mut sums = GridSums {
            loc: vec![0.0; k],
            cls: vec![0.0; k],
            n_pos: 0,
            n_cells: dims.len(),
            per_grid_pos: vec![0; k],
        };
        for idx in 0..dims.len() {
            let g = idx % k;
            sums.loc[g] += loc_map[idx];
            sums.cls[g] += cls_map[idx];
            if gate[idx] > LOC_GATE {
                sums.n_pos += 1;
            }
            if labels[idx] {
                sums.per_grid_pos[g] += 1;
            }
        }
        Ok(sums)
    }

    pub fn normalizer(&self) -> f64 {
        self.n_pos.max(1) as f64
    }
}

impl LossTerms {
    pub fn from_sums(n_classes: usize, n_anchors: usize, s: &GridSums) -> Result<Self> {
        Self::batch_mean(n_classes, n_anchors, std::slice::from_ref(s))
    }

    /// Mean of the per-image normalized terms; counts are summed.
    pub fn batch_mean(n_classes: usize, n_anchors: usize, batch: &[GridSums]) -> Result<Self> {
        let k = n_classes * n_anchors;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut t = LossTerms {
            n_classes,
            n_anchors,
            loc: vec![0.0; k],
            cls: vec![0.0; k],
            cls_pos_norm: vec![0.0; k],
            n_pos: 0,
            per_grid_pos: vec![0; k],
        };
        let b = batch.len() as f64;
        for s in batch {
            if s.loc.len() != k || s.cls.len() != k || s.per_grid_pos.len() != k {
                return Err(Error::shape(
                    "loss terms",
                    format!("grid sums of length {} for {k} grids", s.loc.len()),
                ));
            }
            let np = s.normalizer();
            let n = s.n_cells as f64;
            for g in 0..k {
                t.loc[g] += s.loc[g] / np / b;
                t.cls[g] += s.cls[g] / n / b;
                t.cls_pos_norm[g] += s.cls[g] / np / b;
                t.per_grid_pos[g] += s.per_grid_pos[g];
            }
            t.n_pos += s.n_pos;
        }
        Ok(t)
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub reg: f64,
    /// `Σ_{c,a}` of the normalized localization terms, before any weight.
    pub loc_raw: f64,
    /// Same for the classification terms (`1/N` normalization).
    pub cls_raw: f64,
    pub n_pos: usize,
    pub per_grid_pos: Vec<usize>,
}

/// Effective multipliers applied to the `loc` and `cls` (or `cls_pos_norm`)
/// terms per grid, with a flag telling which classification term is used.
fn multipliers(w: &BalanceWeights, mode: WeightMode) -> (Vec<f64>, Vec<f64>, bool) {
    let k = w.grids();
    match mode {
        WeightMode::Learned => {
            let (lc, ll) = (w.lambda_cls(), w.lambda_loc());
            (
                w.s_loc_grid.iter().map(|s| ll * (-s).exp()).collect(),
                w.s_cls_grid.iter().map(|s| lc * (-s).exp()).collect(),
                false,
            )
        }
        WeightMode::Unit => (vec![1.0; k], vec![1.0; k], false),
        WeightMode::RetinaNorm => (vec![1.0; k], vec![1.0; k], true),
    }
}

pub fn regularizer(w: &BalanceWeights) -> f64 {
    let k = w.grids() as f64;
    w.s_cls + w.s_loc + (w.s_cls_grid.iter().sum::<f64>() + w.s_loc_grid.iter().sum::<f64>()) / k
}

/// Weighted loss totals for the given mode.
pub fn balanced_totals(terms: &LossTerms, weights: &BalanceWeights, mode: WeightMode) -> Result<LossReport> {
    check_dims(terms, weights)?;
    let (m_loc, m_cls, pos_norm) = multipliers(weights, mode);
    let cls_terms = if pos_norm { &terms.cls_pos_norm } else { &terms.cls };
    let loc: f64 = m_loc.iter().zip(&terms.loc).map(|(m, t)| m * t).sum();
    let cls: f64 = m_cls.iter().zip(cls_terms).map(|(m, t)| m * t).sum();
    let reg = match mode {
        WeightMode::Learned => regularizer(weights),
        _ => 0.0,
    };
    Ok(LossReport {
        total: loc + cls + reg,
        loc,
        cls,
        reg,
        loc_raw: terms.loc.iter().sum(),
        cls_raw: terms.cls.iter().sum(),
        n_pos: terms.n_pos,
        per_grid_pos: terms.per_grid_pos.clone(),
    })
}

fn check_dims(terms: &LossTerms, weights: &BalanceWeights) -> Result<()> {
    if terms.n_classes != weights.n_classes || terms.n_anchors != weights.n_anchors {
        return Err(Error::shape(
            "balanced_totals",
            format!(
                "terms for {}x{} grids, weights for {}x{}",
                terms.n_classes, terms.n_anchors, weights.n_classes, weights.n_anchors
            ),
        ));
    }
    Ok(())
}

/// Exact gradient of `L_loc + L_cls + L_reg` (learned mode) with respect to
/// every `s` entry, in [`BalanceWeights::to_flat`] order. Grids without a
/// positive label get a zero gradient for both of their entries.
pub fn weight_gradients(terms: &LossTerms, weights: &BalanceWeights) -> Result<Vec<f64>> {
    check_dims(terms, weights)?;
    let k = weights.grids();
    let (lc, ll) = (weights.lambda_cls(), weights.lambda_loc());
    let inv_k = 1.0 / k as f64;

    let mut d_cls_grid = vec![0.0; k];
    let mut d_loc_grid = vec![0.0; k];
    let mut loc_inner = 0.0;
    let mut cls_inner = 0.0;
    for g in 0..k {
        let wl = (-weights.s_loc_grid[g]).exp() * terms.loc[g];
        let wc = (-weights.s_cls_grid[g]).exp() * terms.cls[g];
        loc_inner += wl;
        cls_inner += wc;
        if terms.per_grid_pos[g] > 0 {
            d_loc_grid[g] = -ll * wl + inv_k;
            d_cls_grid[g] = -lc * wc + inv_k;
        }
    }
    let mut flat = vec![-lc * cls_inner + 1.0, -ll * loc_inner + 1.0];
    flat.extend(d_cls_grid);
    flat.extend(d_loc_grid);
    Ok(flat)
}

/// Derivatives of the weighted total with respect to one image's raw
/// per-grid sums `Σ_{i,j} loc` and `Σ_{i,j} cls`, when that image is one of
/// `batch` images averaged together. These seed the backward pass through the
/// predictor.
pub fn sum_coefficients(
    weights: &BalanceWeights,
    mode: WeightMode,
    image: &GridSums,
    batch: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (m_loc, m_cls, pos_norm) = multipliers(weights, mode);
    let b = batch as f64;
    let np = image.normalizer();
    let cls_norm = if pos_norm { np } else { image.n_cells as f64 };
    (
        m_loc.iter().map(|m| m / (np * b)).collect(),
        m_cls.iter().map(|m| m / (cls_norm * b)).collect(),
    )
}

/// Constant per-cell inputs of the loss graph for one image.
#[derive(Debug, Clone)]
pub struct CellTargets {
    shape: Vec<usize>,
    anchor: [Tensor; 4],
    target: [Tensor; 4],
    target_area: Tensor,
    assigned: Tensor,
    gate: Tensor,
    labels: Tensor,
}

impl CellTargets {
    /// `shape` is the `[H_f, W_f, N_C * N_A]` layout of the predictor output.
    /// Unassigned cells (`targets[i] == None`) get a zero IoU and no gradient.
    pub fn new(
        shape: &[usize],
        anchors: &[BBox],
        targets: &[Option<BBox>],
        gate_overlap: &[f64],
        labels: &[bool],
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if anchors.len() != n || targets.len() != n || gate_overlap.len() != n || labels.len() != n {
            return Err(Error::shape(
                "cell targets",
                format!("expected {n} cells for shape {shape:?}"),
            ));
        }
        let tensor = |f: &dyn Fn(usize) -> f64| Tensor::new(shape.to_vec(), (0..n).map(f).collect());
        let tgt = |i: usize| targets[i].unwrap_or(anchors[i]);
        let corner = |i: usize, k: usize| {
            let (x1, y1, x2, y2) = tgt(i).corners();
            [x1, y1, x2, y2][k]
        };
        Ok(CellTargets {
            shape: shape.to_vec(),
            anchor: [
                tensor(&|i| anchors[i].cx)?,
                tensor(&|i| anchors[i].cy)?,
                tensor(&|i| anchors[i].w)?,
                tensor(&|i| anchors[i].h)?,
            ],
            target: [
                tensor(&|i| corner(i, 0))?,
                tensor(&|i| corner(i, 1))?,
                tensor(&|i| corner(i, 2))?,
                tensor(&|i| corner(i, 3))?,
            ],
            target_area: tensor(&|i| tgt(i).area())?,
            assigned: tensor(&|i| if targets[i].is_some() { 1.0 } else { 0.0 })?,
            gate: tensor(&|i| if gate_overlap[i] > LOC_GATE { 1.0 } else { 0.0 })?,
            labels: tensor(&|i| if labels[i] { 1.0 } else { 0.0 })?,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Predicted IoU map `Ô` on the tape, from offsets laid out as
/// `[H_f, W_f, K * 4]` with `(dx, dy, dw, dh)` innermost.
pub fn pred_iou_graph(tape: &mut Tape, offsets: Var, t: &CellTargets) -> Result<Var> {
    let [dx, dy, dw, dh] = [0, 1, 2, 3].map(|k| tape.strided(offsets, k, 4));
    let (dx, dy, dw, dh) = (dx?, dy?, dw?, dh?);
    if tape.shape(dx) != t.shape.as_slice() {
        return Err(Error::shape(
            "pred_iou_graph",
            format!("offsets {:?} for targets {:?}", tape.shape(offsets), t.shape),
        ));
    }
    let [acx, acy, aw, ah] = t.anchor.clone().map(|a| tape.constant(a));
    let [gx1, gy1, gx2, gy2] = t.target.clone().map(|a| tape.constant(a));
    let g_area = tape.constant(t.target_area.clone());
    let assigned = tape.constant(t.assigned.clone());
    let zero = tape.constant(Tensor::zeros(&t.shape));

    let shift_x = tape.mul(dx, aw)?;
    let px = tape.add(acx, shift_x)?;
    let shift_y = tape.mul(dy, ah)?;
    let py = tape.add(acy, shift_y)?;
    let dw = tape.clamp(dw, -MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = tape.clamp(dh, -MAX_LOG_SCALE, MAX_LOG_SCALE);
    let sw = tape.exp(dw);
    let sh = tape.exp(dh);
    let pw = tape.mul(aw, sw)?;
    let ph = tape.mul(ah, sh)?;

    let half_w = tape.scale(pw, 0.5);
    let half_h = tape.scale(ph, 0.5);
    let px1 = tape.sub(px, half_w)?;
    let px2 = tape.add(px, half_w)?;
    let py1 = tape.sub(py, half_h)?;
    let py2 = tape.add(py, half_h)?;

    let right = tape.minimum(px2, gx2)?;
    let left = tape.maximum(px1, gx1)?;
    let bottom = tape.minimum(py2, gy2)?;
    let top = tape.maximum(py1, gy1)?;
    let iw = tape.sub(right, left)?;
    let ih = tape.sub(bottom, top)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;
    let p_area = tape.mul(pw, ph)?;
    let areas = tape.add(p_area, g_area)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;
    tape.mul(iou, assigned)
}

/// Per-cell localization loss `gate * (1 - Ô)^2`.
pub fn loc_loss_graph(tape: &mut Tape, o_hat: Var, t: &CellTargets) -> Result<Var> {
    let gate = tape.constant(t.gate.clone());
    let neg = tape.neg(o_hat);
    let miss = tape.add_scalar(neg, 1.0);
    let sq = tape.mul(miss, miss)?;
    tape.mul(sq, gate)
}

/// Per-cell classification loss from logits. Labels are constants.
pub fn cls_loss_graph(tape: &mut Tape, logits: Var, t: &CellTargets, kind: ClsLoss) -> Result<Var> {
    if tape.shape(logits) != t.shape.as_slice() {
        return Err(Error::shape(
            "cls_loss_graph",
            format!("logits {:?} for targets {:?}", tape.shape(logits), t.shape),
        ));
    }
    let labels = tape.constant(t.labels.clone());
    match kind {
        ClsLoss::CrossEntropy => {
            let sp = tape.softplus(logits);
            let pz = tape.mul(labels, logits)?;
            tape.sub(sp, pz)
        }
        ClsLoss::Focal { alpha, gamma } => {
            // t = (2p - 1) z ; loss = α_t exp(-γ softplus(t)) softplus(-t)
            let sign = t.labels.data().iter().map(|&p| 2.0 * p - 1.0).collect();
            let sign = tape.constant(Tensor::new(t.shape.clone(), sign)?);
            let alpha_t = t
                .labels
                .data()
                .iter()
                .map(|&p| if p > 0.5 { alpha } else { 1.0 - alpha })
                .collect();
            let alpha_t = tape.constant(Tensor::new(t.shape.clone(), alpha_t)?);
            let tz = tape.mul(sign, logits)?;
            let sp_t = tape.softplus(tz);
            let damp = tape.scale(sp_t, -gamma);
            let modulation = tape.exp(damp);
            let neg_t = tape.neg(tz);
            let nll = tape.softplus(neg_t);
            let raw = tape.mul(modulation, nll)?;
            tape.mul(alpha_t, raw)
        }
    }
}

/// Scalar `Σ coef_loc · Σ_{i,j} loc + Σ coef_cls · Σ_{i,j} cls` on the tape.
pub fn weighted_sum_graph(
    tape: &mut Tape,
    loc_map: Var,
    cls_map: Var,
    coef_loc: &[f64],
    coef_cls: &[f64],
) -> Result<Var> {
    let loc_sums = tape.sum_leading(loc_map)?;
    let cls_sums = tape.sum_leading(cls_map)?;
    let cl = tape.constant(Tensor::new(vec![coef_loc.len()], coef_loc.to_vec())?);
    let cc = tape.constant(Tensor::new(vec![coef_cls.len()], coef_cls.to_vec())?);
    let a = tape.mul(loc_sums, cl)?;
    let b = tape.mul(cls_sums, cc)?;
    let a = tape.sum(a);
    let b = tape.sum(b);
    tape.add(a, b)
}

/// Learned-mode total with the `s` parameters on the tape. `loc_terms` and
/// `cls_terms` are the normalized per-grid terms (`[K]`), `s_*_grid` are `[K]`
/// and `s_cls`, `s_loc` are scalars.
pub fn balanced_total_graph(
    tape: &mut Tape,
    loc_terms: Var,
    cls_terms: Var,
    s_cls: Var,
    s_loc: Var,
    s_cls_grid: Var,
    s_loc_grid: Var,
) -> Result<Var> {
    let k = tape.shape(s_cls_grid).iter().product::<usize>() as f64;
    let weighted = |tape: &mut Tape, s_task: Var, s_grid: Var, terms: Var| -> Result<Var> {
        let ns = tape.neg(s_grid);
        let lam = tape.exp(ns);
        let per = tape.mul(lam, terms)?;
        let inner = tape.sum(per);
        let nt = tape.neg(s_task);
        let lam_task = tape.exp(nt);
        tape.mul(lam_task, inner)
    };
    let loc = weighted(tape, s_loc, s_loc_grid, loc_terms)?;
    let cls = weighted(tape, s_cls, s_cls_grid, cls_terms)?;
    let sum_cls = tape.sum(s_cls_grid);
    let sum_loc = tape.sum(s_loc_grid);
    let grid_reg = tape.add(sum_cls, sum_loc)?;
    let grid_reg = tape.scale(grid_reg, 1.0 / k);
    let task_reg = tape.add(s_cls, s_loc)?;
    let reg = tape.add(task_reg, grid_reg)?;
    let data = tape.add(loc, cls)?;
    tape.add(data, reg)
}
