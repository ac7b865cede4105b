//! SGD with momentum and polynomial decay, the per-iteration label and loss
//! pipeline, resumable checkpoints and ablation runs.
//!
//! Each iteration runs, per scene: predict, decode, compute `Ô`, derive labels
//! from the configured rule, evaluate the losses, and backpropagate. Labels are
//! computed from plain values, so no gradient reaches the offsets through the
//! classification loss. Per-scene terms are averaged over the batch before
//! the balance weights apply; positive counts for the freeze rule are summed
//! over the batch.
//!
//! # Checkpoint format
//!
//! Little-endian throughout.
//!
//! ```text
//! magic "DDCK", version u32 = 1
//! u32 length + UTF-8 training config (key = value lines)
//! u32 length + UTF-8 anchor set (anchor text format)
//! model weight block (see the model module)
//! "SWTS", u32 N_C, u32 N_A, (2 + 2 N_C N_A) × f64 s values
//! "STAT", u64 iteration,
//!         per parameter tensor: len × f64 momentum buffer,
//!         (2 + 2 N_C N_A) × f64 s momentum buffer,
//!         32-byte RNG seed, u64 RNG stream, u128 RNG word position
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{build_grid, kmeans_anchors, AnchorGrid, AnchorSet};
use crate::assignment::{ams_labels, assign_ao, assigned_overlap, compute_pono, pono_labels, pred_iou_map};
use crate::autodiff::Tape;
use crate::config::KeyValues;
use crate::data::{generate_scene, hflip, Dataset, GenSpec, Scene, GEN_KEYS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, IOU_MATCH};
use crate::geometry::{BBox, Offsets};
use crate::grid::CellMap;
use crate::loss::{
    balanced_totals, cls_loss_graph, loc_loss_graph, pred_iou_graph, sum_coefficients, weight_gradients,
    weighted_sum_graph, BalanceWeights, CellTargets, ClsLoss, GridSums, LossReport, LossTerms, WeightMode, S_INIT,
};
use crate::model::{read_f64, read_u32, read_u64, Model, ParamSet, ToyNetConfig, FEAT_STRIDE};

/// Every key any command accepts.
pub fn all_keys() -> Vec<&'static str> {
    TRAIN_KEYS
        .iter()
        .chain(EVAL_KEYS)
        .chain(GEN_KEYS)
        .chain(ABLATE_KEYS)
        .chain(&["scenes"])
        .copied()
        .collect()
}

/// Keys read by [`TrainConfig::from_config`] besides `image_size`.
pub const TRAIN_KEYS: &[&str] = &[
    "lr0",
    "momentum",
    "poly_power",
    "max_iter",
    "batch_size",
    "mode",
    "label_rule",
    "cls_loss",
    "seed",
    "label_threshold",
    "ao_threshold",
    "n_anchors",
    "kmeans_iter",
    "model",
    "base_channels",
    "levels",
    "head_convs",
    "flip",
    "checkpoint_every",
    "s_init",
    "grad_clip",
];

/// Keys read by [`EvalConfig::from_config`].
pub const EVAL_KEYS: &[&str] = &["score_min", "iou_nms", "iou_match"];

/// Keys read by [`AblationConfig::from_config`] besides the train, eval and
/// generator keys.
pub const ABLATE_KEYS: &[&str] = &[
    "train_scenes",
    "test_scenes",
    "ablate_modes",
    "ablate_label_rules",
    "ablate_cls_losses",
];

/// Positive-label rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// `O · Ô > t` with `O` the per-object normalized overlap.
    Ams,
    /// `O > t`.
    Pono,
    /// Raw anchor IoU above the absolute-overlap threshold.
    Ao,
}

impl FromStr for LabelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AMS" => Ok(LabelRule::Ams),
            "PONO" => Ok(LabelRule::Pono),
            "AO" => Ok(LabelRule::Ao),
            _ => Err(Error::Config(format!("unknown label rule `{s}` (AMS|PONO|AO)"))),
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelRule::Ams => "AMS",
            LabelRule::Pono => "PONO",
            LabelRule::Ao => "AO",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    ToyNet,
    Tabular,
}

impl FromStr for ModelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toynet" => Ok(ModelChoice::ToyNet),
            "tabular" => Ok(ModelChoice::Tabular),
            _ => Err(Error::Config(format!("unknown model `{s}` (toynet|tabular)"))),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelChoice::ToyNet => "toynet",
            ModelChoice::Tabular => "tabular",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub mode: WeightMode,
    pub label_rule: LabelRule,
    pub cls_loss: ClsLoss,
    pub seed: u64,
    pub label_threshold: f64,
    pub ao_threshold: f64,
    pub n_anchors: usize,
    pub kmeans_iter: usize,
    pub model: ModelChoice,
    pub net: ToyNetConfig,
    /// Random horizontal flips of training scenes.
    pub flip: bool,
    /// Write a numbered checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
    pub s_init: f64,
    /// Rescale network gradients to at most this global L2 norm (0: off).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.005,
            momentum: 0.9,
            poly_power: 0.9,
            max_iter: 1000,
            batch_size: 4,
            mode: WeightMode::Learned,
            label_rule: LabelRule::Ams,
            cls_loss: ClsLoss::CrossEntropy,
            seed: 0,
            label_threshold: 0.5,
            ao_threshold: 0.5,
            n_anchors: 3,
            kmeans_iter: 100,
            model: ModelChoice::ToyNet,
            net: ToyNetConfig::default(),
            flip: true,
            checkpoint_every: 0,
            s_init: S_INIT,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.max_iter == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "need lr0 > 0, 0 <= momentum < 1, max_iter >= 1, batch_size >= 1".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        if self.n_anchors == 0 {
            return Err(Error::Config("n_anchors must be at least 1".into()));
        }
        if self.model == ModelChoice::ToyNet {
            self.net.validate()?;
        } else if self.net.input_size % FEAT_STRIDE != 0 {
            return Err(Error::Config(format!("image_size must be a multiple of {FEAT_STRIDE}")));
        }
        Ok(())
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: kv.get_or("lr0", d.lr0)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            poly_power: kv.get_or("poly_power", d.poly_power)?,
            max_iter: kv.get_or("max_iter", d.max_iter)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            mode: kv.get_or("mode", d.mode)?,
            label_rule: kv.get_or("label_rule", d.label_rule)?,
            cls_loss: kv.get_or("cls_loss", d.cls_loss)?,
            seed: kv.get_or("seed", d.seed)?,
            label_threshold: kv.get_or("label_threshold", d.label_threshold)?,
            ao_threshold: kv.get_or("ao_threshold", d.ao_threshold)?,
            n_anchors: kv.get_or("n_anchors", d.n_anchors)?,
            kmeans_iter: kv.get_or("kmeans_iter", d.kmeans_iter)?,
            model: kv.get_or("model", d.model)?,
            net: ToyNetConfig {
                input_size: kv.get_or("image_size", d.net.input_size)?,
                base_channels: kv.get_or("base_channels", d.net.base_channels)?,
                levels: kv.get_or("levels", d.net.levels)?,
                head_convs: kv.get_or("head_convs", d.net.head_convs)?,
            },
            flip: kv.get_or("flip", d.flip)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            s_init: kv.get_or("s_init", d.s_init)?,
            grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` rendering, readable by [`Self::from_config`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("lr0", self.lr0.to_string());
        kv("momentum", self.momentum.to_string());
        kv("poly_power", self.poly_power.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("mode", self.mode.to_string());
        kv("label_rule", self.label_rule.to_string());
        kv("cls_loss", self.cls_loss.to_string());
        kv("seed", self.seed.to_string());
        kv("label_threshold", self.label_threshold.to_string());
        kv("ao_threshold", self.ao_threshold.to_string());
        kv("n_anchors", self.n_anchors.to_string());
        kv("kmeans_iter", self.kmeans_iter.to_string());
        kv("model", self.model.to_string());
        kv("image_size", self.net.input_size.to_string());
        kv("base_channels", self.net.base_channels.to_string());
        kv("levels", self.net.levels.to_string());
        kv("head_convs", self.net.head_convs.to_string());
        kv("flip", self.flip.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("s_init", self.s_init.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        s
    }

    /// Fresh model with outputs for `k = N_C · N_A` grids.
    pub fn build_model(&self, k: usize) -> Result<Model> {
        match self.model {
            ModelChoice::ToyNet => Model::toynet(self.net, k, self.seed),
            ModelChoice::Tabular => {
                let f = self.net.input_size / FEAT_STRIDE;
                Ok(Model::tabular(f, f, k))
            }
        }
    }
}

/// Detection extraction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub score_min: f64,
    pub iou_nms: f64,
    pub iou_match: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_min: 0.05,
            iou_nms: 0.5,
            iou_match: IOU_MATCH,
        }
    }
}

impl EvalConfig {
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let d = EvalConfig::default();
        Ok(EvalConfig {
            score_min: kv.get_or("score_min", d.score_min)?,
            iou_nms: kv.get_or("iou_nms", d.iou_nms)?,
            iou_match: kv.get_or("iou_match", d.iou_match)?,
        })
    }
}

/// `lr0 · (1 - iter / max_iter)^power`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = (iter.min(cfg.max_iter)) as f64 / cfg.max_iter as f64;
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

/// `v ← μ v + g; p ← p - lr v`, skipping entries marked frozen entirely.
pub fn sgd_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    frozen: Option<&[bool]>,
) {
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// Scales all gradients by a common factor so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub iteration: usize,
    pub model: Model,
    pub weights: BalanceWeights,
    pub velocity: Vec<Vec<f64>>,
    pub s_velocity: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(model: Model, n_classes: usize, n_anchors: usize, s_init: f64, seed: u64) -> Self {
        let velocity = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let weights = BalanceWeights::new(n_classes, n_anchors, s_init);
        let s_velocity = vec![0.0; weights.to_flat().len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep batch sampling independent of the init stream
        rng.set_stream(1);
        RunState {
            iteration: 0,
            model,
            weights,
            velocity,
            s_velocity,
            rng,
        }
    }
}

/// Per-scene label inputs that do not depend on the predictor.
struct SceneTargets {
    assigned: Vec<Option<BBox>>,
    assignment: CellMap<Option<usize>>,
    /// `O` used for the localization gate and for positive labels.
    overlap: CellMap<f64>,
}

fn scene_targets(scene: &Scene, grid: &AnchorGrid, rule: LabelRule) -> SceneTargets {
    let assignment = assign_ao(grid, &scene.gt);
    let overlap = match rule {
        LabelRule::Ams | LabelRule::Pono => compute_pono(grid, &scene.gt, &assignment),
        LabelRule::Ao => assigned_overlap(grid, &scene.gt, &assignment),
    };
    let assigned = assignment
        .values()
        .iter()
        .map(|a| a.map(|n| scene.gt.boxes[n]))
        .collect();
    SceneTargets {
        assigned,
        assignment,
        overlap,
    }
}

fn offsets_of(data: &[f64]) -> Vec<Offsets> {
    data.chunks_exact(4)
        .map(|o| Offsets::new(o[0], o[1], o[2], o[3]))
        .collect()
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Losses evaluated before the update.
    pub report: LossReport,
    pub lr: f64,
    /// Network gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step on `batch`.
pub fn train_iteration(
    state: &mut RunState,
    batch: &[Scene],
    cfg: &TrainConfig,
    grid: &AnchorGrid,
) -> Result<StepStats> {
    let dims = grid.dims();
    let out_shape = [dims.h, dims.w, dims.grids()];
    if state.model.output_hw() != (dims.h, dims.w) || state.model.outputs() != dims.grids() {
        return Err(Error::shape(
            "train_iteration",
            format!("model output does not match grid {dims:?}"),
        ));
    }
    let mut grads: Vec<Vec<f64>> = state.velocity.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut sums = Vec::with_capacity(batch.len());
    for scene in batch {
        let st = scene_targets(scene, grid, cfg.label_rule);
        let mut tape = Tape::new();
        let (vars, out) = state.model.forward(&mut tape, &scene.image, true)?;

        let o_hat = pred_iou_map(
            grid,
            &offsets_of(tape.value(out.offsets).data()),
            &scene.gt,
            &st.assignment,
        )?;
        let labels = match cfg.label_rule {
            LabelRule::Ams => ams_labels(&st.overlap, &o_hat, cfg.label_threshold)?,
            LabelRule::Pono => pono_labels(&st.overlap, cfg.label_threshold),
            LabelRule::Ao => pono_labels(&st.overlap, cfg.ao_threshold),
        };
        let targets = CellTargets::new(
            &out_shape,
            grid.cells(),
            &st.assigned,
            st.overlap.values(),
            labels.values(),
        )?;
        let o_hat_var = pred_iou_graph(&mut tape, out.offsets, &targets)?;
        let loc = loc_loss_graph(&mut tape, o_hat_var, &targets)?;
        let cls = cls_loss_graph(&mut tape, out.logits, &targets, cfg.cls_loss)?;

        let loc_map = CellMap::from_vec(dims, tape.value(loc).data().to_vec());
        let cls_map = CellMap::from_vec(dims, tape.value(cls).data().to_vec());
        let s = GridSums::from_maps(&loc_map, &cls_map, &st.overlap, &labels)?;
        let (coef_loc, coef_cls) = sum_coefficients(&state.weights, cfg.mode, &s, batch.len());
        let root = weighted_sum_graph(&mut tape, loc, cls, &coef_loc, &coef_cls)?;
        tape.backward(root)?;
        for (g, v) in grads.iter_mut().zip(&vars) {
            if let Some(d) = tape.grad(*v) {
                g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
        sums.push(s);
    }

    let terms = LossTerms::batch_mean(dims.classes, dims.anchors, &sums)?;
    let report = balanced_totals(&terms, &state.weights, cfg.mode)?;
    let lr = lr_at(state.iteration, cfg);
    let clip = if cfg.grad_clip > 0.0 {
        cfg.grad_clip
    } else {
        f64::INFINITY
    };
    let grad_norm = clip_global_norm(&mut grads, clip);
    for ((p, v), g) in state
        .model
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .zip(&mut state.velocity)
        .zip(&grads)
    {
        sgd_step(p.data_mut(), v, g, lr, cfg.momentum, None);
    }
    if cfg.mode == WeightMode::Learned {
        let g = weight_gradients(&terms, &state.weights)?;
        let frozen = state.weights.freeze_mask(&terms.per_grid_pos);
        let mut flat = state.weights.to_flat();
        sgd_step(&mut flat, &mut state.s_velocity, &g, lr, cfg.momentum, Some(&frozen));
        state.weights.set_flat(&flat);
    }
    state.iteration += 1;
    Ok(StepStats { report, lr, grad_norm })
}

/// Per-class IoU k-means on the dataset's boxes. A class without samples
/// borrows the clustering of all boxes pooled.
pub fn fit_anchors(ds: &Dataset, n_anchors: usize, seed: u64, max_iter: usize) -> Result<AnchorSet> {
    let per_class = ds.shapes_per_class();
    let pooled: Vec<(f64, f64)> = per_class.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("dataset has no boxes to cluster".into()));
    }
    let filled: Vec<Vec<(f64, f64)>> = per_class
        .into_iter()
        .map(|v| if v.is_empty() { pooled.clone() } else { v })
        .collect();
    kmeans_anchors(&filled, n_anchors, seed, max_iter)
}

pub const LOG_HEADER: &str = "iteration,total,loc,cls,reg,loc_raw,cls_raw,n_pos,lr,grad_norm";

pub fn log_row(iteration: usize, st: &StepStats) -> String {
    let r = &st.report;
    format!(
        "{iteration},{},{},{},{},{},{},{},{},{}",
        r.total, r.loc, r.cls, r.reg, r.loc_raw, r.cls_raw, r.n_pos, st.lr, st.grad_norm
    )
}

/// Training driver over an in-memory scene list.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub anchors: AnchorSet,
    pub grid: AnchorGrid,
    scenes: &'a [Scene],
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, anchors: AnchorSet, scenes: &'a [Scene]) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("no training scenes".into()));
        }
        let f = cfg.net.input_size / FEAT_STRIDE;
        let grid = build_grid(&anchors, f, f, FEAT_STRIDE)?;
        if let Some(s) = scenes
            .iter()
            .find(|s| s.height() != cfg.net.input_size || s.width() != cfg.net.input_size)
        {
            return Err(Error::Config(format!(
                "scene of size {}x{} does not match image_size {}",
                s.height(),
                s.width(),
                cfg.net.input_size
            )));
        }
        Ok(Trainer {
            cfg,
            anchors,
            grid,
            scenes,
        })
    }

    pub fn init_state(&self) -> Result<RunState> {
        let (c, a) = (self.anchors.n_classes(), self.anchors.n_anchors());
        let model = self.cfg.build_model(c * a)?;
        Ok(RunState::new(model, c, a, self.cfg.s_init, self.cfg.seed))
    }

    /// Samples a batch with the state's RNG and runs one iteration.
    pub fn step(&self, state: &mut RunState) -> Result<StepStats> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let s = &self.scenes[state.rng.gen_range(0..self.scenes.len())];
            let flip = self.cfg.flip && state.rng.gen_bool(0.5);
            batch.push(if flip { hflip(s) } else { s.clone() });
        }
        train_iteration(state, &batch, &self.cfg, &self.grid)
    }

    /// Runs until `max_iter`. With `out`, appends rows to `train_log.csv`,
    /// writes numbered checkpoints every `checkpoint_every` iterations and
    /// `checkpoint.ddck` at the end.
    pub fn run(&self, state: &mut RunState, out: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = state.iteration == 0 || !path.exists();
                let mut f = BufWriter::new(
                    OpenOptions::new()
                        .create(true)
                        .append(!fresh)
                        .write(true)
                        .truncate(fresh)
                        .open(path)?,
                );
                if fresh {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut reports = Vec::new();
        while state.iteration < self.cfg.max_iter {
            let it = state.iteration;
            let st = self.step(state)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", log_row(it, &st))?;
            }
            reports.push(st.report);
            if let Some(dir) = out {
                let k = self.cfg.checkpoint_every;
                if k > 0 && state.iteration % k == 0 && state.iteration < self.cfg.max_iter {
                    self.checkpoint(state)
                        .save(&dir.join(format!("checkpoint_{:06}.ddck", state.iteration)))?;
                }
            }
        }
        if let Some(mut f) = log {
            f.flush()?;
        }
        if let Some(dir) = out {
            self.checkpoint(state).save(&dir.join("checkpoint.ddck"))?;
        }
        Ok(reports)
    }

    pub fn checkpoint(&self, state: &RunState) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            anchors: self.anchors.clone(),
            state: state.clone(),
        }
    }
}

/// A resumable training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub anchors: AnchorSet,
    pub state: RunState,
}

const CKPT_MAGIC: &[u8; 4] = b"DDCK";
const CKPT_VERSION: u32 = 1;

fn write_text<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_text<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("embedded text is not UTF-8".into()))
}

fn expect_tag<R: Read>(r: &mut R, tag: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != tag {
        return Err(Error::Checkpoint(format!(
            "expected block {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&b)
        )));
    }
    Ok(())
}

impl Checkpoint {
    /// Grid the checkpoint's model was trained against.
    pub fn grid(&self) -> Result<AnchorGrid> {
        let (h, w) = self.state.model.output_hw();
        build_grid(&self.anchors, h, w, FEAT_STRIDE)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        write_text(w, &self.config.to_text())?;
        write_text(w, &self.anchors.to_text())?;
        self.state.model.params().write_to(w)?;

        let sw = &self.state.weights;
        w.write_all(b"SWTS")?;
        w.write_all(&(sw.n_classes as u32).to_le_bytes())?;
        w.write_all(&(sw.n_anchors as u32).to_le_bytes())?;
        for v in sw.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }

        w.write_all(b"STAT")?;
        w.write_all(&(self.state.iteration as u64).to_le_bytes())?;
        for v in self.state.velocity.iter().flatten().chain(&self.state.s_velocity) {
            w.write_all(&v.to_le_bytes())?;
        }
        let rng = &self.state.rng;
        w.write_all(&rng.get_seed())?;
        w.write_all(&rng.get_stream().to_le_bytes())?;
        w.write_all(&rng.get_word_pos().to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_tag(r, CKPT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::from_config(&KeyValues::parse(&read_text(r)?, Path::new("<checkpoint config>"))?)?;
        let anchors = AnchorSet::parse(&read_text(r)?, Path::new("<checkpoint anchors>"))?;
        let (n_c, n_a) = (anchors.n_classes(), anchors.n_anchors());
        let model = config.build_model(n_c * n_a)?.with_params(ParamSet::read_from(r)?)?;

        expect_tag(r, b"SWTS")?;
        if (read_u32(r)? as usize, read_u32(r)? as usize) != (n_c, n_a) {
            return Err(Error::Checkpoint("balance weights do not match the anchor set".into()));
        }
        let mut weights = BalanceWeights::new(n_c, n_a, 0.0);
        let flat = (0..2 + 2 * n_c * n_a)
            .map(|_| read_f64(r))
            .collect::<Result<Vec<_>>>()?;
        weights.set_flat(&flat);

        expect_tag(r, b"STAT")?;
        let iteration = read_u64(r)? as usize;
        let velocity = model
            .params()
            .tensors()
            .iter()
            .map(|t| (0..t.len()).map(|_| read_f64(r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let s_velocity = (0..flat.len()).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(r)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        Ok(Checkpoint {
            config,
            anchors,
            state: RunState {
                iteration,
                model,
                weights,
                velocity,
                s_velocity,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// One row per `(class, anchor)`: shape, area and learned weights.
    pub fn weight_table(&self) -> String {
        let w = &self.state.weights;
        let mut s = format!(
            "# lambda_cls,{},lambda_loc,{}\nclass,anchor,w,h,area,lambda_cls,lambda_loc,s_cls,s_loc\n",
            w.lambda_cls(),
            w.lambda_loc()
        );
        for c in 0..w.n_classes {
            for a in 0..w.n_anchors {
                let (aw, ah) = self.anchors.shape(c, a);
                let g = c * w.n_anchors + a;
                writeln!(
                    s,
                    "{c},{a},{aw},{ah},{},{},{},{},{}",
                    aw * ah,
                    w.lambda_cls_grid(c, a),
                    w.lambda_loc_grid(c, a),
                    w.s_cls_grid[g],
                    w.s_loc_grid[g]
                )
                .expect("write to String");
            }
        }
        s
    }
}

/// One cell of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub mode: WeightMode,
    pub label_rule: LabelRule,
    pub cls_loss: ClsLoss,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.mode, self.label_rule, self.cls_loss)
    }
}

/// A matrix of training runs sharing data, seeds and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: GenSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub modes: Vec<WeightMode>,
    pub label_rules: Vec<LabelRule>,
    pub cls_losses: Vec<ClsLoss>,
}

impl AblationConfig {
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&all_keys())?;
        let train = TrainConfig::from_config(kv)?;
        let data = GenSpec::from_config(kv)?;
        if data.image_size != train.net.input_size {
            return Err(Error::Config("image_size must match between data and model".into()));
        }
        Ok(AblationConfig {
            eval: EvalConfig::from_config(kv)?,
            train_scenes: kv.get_or("train_scenes", 200)?,
            test_scenes: kv.get_or("test_scenes", 100)?,
            modes: kv.get_list("ablate_modes")?.unwrap_or_else(|| vec![train.mode]),
            label_rules: kv
                .get_list("ablate_label_rules")?
                .unwrap_or_else(|| vec![train.label_rule]),
            cls_losses: kv
                .get_list("ablate_cls_losses")?
                .unwrap_or_else(|| vec![train.cls_loss]),
            train,
            data,
        })
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let mut v = Vec::new();
        for &mode in &self.modes {
            for &label_rule in &self.label_rules {
                for &cls_loss in &self.cls_losses {
                    v.push(AblationCell {
                        mode,
                        label_rule,
                        cls_loss,
                    });
                }
            }
        }
        v
    }

    /// Train scenes are indices `0..train_scenes` of the generator, test
    /// scenes the following `test_scenes`.
    pub fn datasets(&self) -> Result<(Dataset, Vec<Scene>)> {
        self.data.validate()?;
        let train = (0..self.train_scenes)
            .map(|i| generate_scene(&self.data, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let test = (self.train_scenes..self.train_scenes + self.test_scenes)
            .map(|i| generate_scene(&self.data, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Dataset {
                n_classes: self.data.n_classes,
                scenes: train,
            },
            test,
        ))
    }
}

/// Trains and evaluates every cell. With `out`, each cell writes its log,
/// checkpoint and `eval.csv` under `out/<cell name>/`, and `summary.csv`
/// collects the results.
pub fn run_ablation(cfg: &AblationConfig, out: Option<&Path>) -> Result<Vec<(AblationCell, EvalReport)>> {
    let (train, test) = cfg.datasets()?;
    let anchors = fit_anchors(&train, cfg.train.n_anchors, cfg.train.seed, cfg.train.kmeans_iter)?;
    let mut results = Vec::new();
    for cell in cfg.cells() {
        let tc = TrainConfig {
            mode: cell.mode,
            label_rule: cell.label_rule,
            cls_loss: cell.cls_loss,
            ..cfg.train.clone()
        };
        let trainer = Trainer::new(tc, anchors.clone(), &train.scenes)?;
        let mut state = trainer.init_state()?;
        let dir = out.map(|o| o.join(cell.name()));
        trainer.run(&mut state, dir.as_deref())?;
        let e = &cfg.eval;
        let report = evaluate_model(
            &state.model,
            &trainer.grid,
            &test,
            train.n_classes,
            e.score_min,
            e.iou_nms,
            e.iou_match,
        )?;
        if let Some(d) = &dir {
            fs::write(d.join("eval.csv"), report.to_csv())?;
        }
        results.push((cell, report));
    }
    if let Some(o) = out {
        fs::write(o.join("summary.csv"), summary_csv(&results))?;
    }
    Ok(results)
}

pub fn summary_csv(results: &[(AblationCell, EvalReport)]) -> String {
    let n = results.first().map_or(0, |(_, r)| r.classes.len());
    let mut s = String::from("mode,label_rule,cls_loss,mAP");
    for c in 0..n {
        write!(s, ",AP{c}").expect("write to String");
    }
    s.push('\n');
    for (cell, r) in results {
        write!(s, "{},{},{},{}", cell.mode, cell.label_rule, cell.cls_loss, r.map).expect("write to String");
        for c in &r.classes {
            write!(s, ",{}", c.ap).expect("write to String");
        }
        s.push('\n');
    }
    s
}
