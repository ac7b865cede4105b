//! Predictors producing per-cell score logits and box offsets.
//!
//! Two predictors share one output contract: logits `[H_f, W_f, K]` and
//! offsets `[H_f, W_f, 4K]` with `K = N_C * N_A` and `(dx, dy, dw, dh)`
//! innermost. The tabular predictor is a bank of free parameters, one per
//! output value. The toy network is a small encoder-decoder with skip
//! connections whose pyramid levels are each refined by a few 3×3 convolutions,
//! resized to the stride-8 map, concatenated, and fed to two heads.
//!
//! # Weight file format
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic    4 bytes  "DDWT"
//! version  u32      1
//! count    u32      number of tensors
//! count × {
//!   name_len u32, name  UTF-8 bytes
//!   ndim     u32, dims  ndim × u64
//! }
//! count × { product(dims) × f64 }   tensor data in table order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Leaky-rectifier slope used throughout the toy network.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Initial classification-head bias, `-ln((1 - π) / π)` for a foreground
/// prior `π = 0.01`. Keeps the flood of easy negatives from swamping the
/// first updates.
pub const CLS_BIAS_INIT: f64 = -4.595_119_850_134_59;
/// Ratio of input size to output map size.
pub const FEAT_STRIDE: usize = 8;

const WEIGHTS_MAGIC: &[u8; 4] = b"DDWT";
const WEIGHTS_VERSION: u32 = 1;

/// Predictor outputs detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    /// `[H_f, W_f, K]`.
    pub logits: Tensor,
    /// `[H_f, W_f, 4K]`.
    pub offsets: Tensor,
}

/// Predictor outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub logits: Var,
    pub offsets: Var,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes the weight block described in the module docs.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Checkpoint(format!("bad weight block magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported weight format version {version}"
            )));
        }
        let count = read_u32(r)? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut set = ParamSet::new();
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            set.push(name, Tensor::new(dims, data)?);
        }
        Ok(set)
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

    /// Errors unless `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ from the model layout".into()));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Toy network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyNetConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub head_convs: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig {
            input_size: 64,
            base_channels: 16,
            levels: 3,
            head_convs: 2,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let coarsest = FEAT_STRIDE << self.levels.saturating_sub(1);
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.input_size == 0 || self.input_size % coarsest != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {coarsest} for {} levels",
                self.input_size, self.levels
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.input_size / FEAT_STRIDE
    }

    /// Channels of encoder level `l` (stride `8 · 2^l`).
    fn enc_channels(&self, l: usize) -> usize {
        2 * self.base_channels << l
    }

    /// Conv layers in parameter order: `(name, cin, cout)`, all 3×3.
    fn layers(&self, k: usize) -> Vec<(String, usize, usize)> {
        let b = self.base_channels;
        let mut v = vec![("stem0".to_string(), 3, b), ("stem1".to_string(), b, b)];
        v.push(("enc0".into(), b, self.enc_channels(0)));
        v.push(("enc0b".into(), self.enc_channels(0), self.enc_channels(0)));
        for l in 1..self.levels {
            v.push((format!("enc{l}"), self.enc_channels(l - 1), self.enc_channels(l)));
        }
        // decoder level l merges the upsampled level l+1 with encoder skip l
        for l in (0..self.levels - 1).rev() {
            let cin = self.enc_channels(l + 1) + self.enc_channels(l);
            v.push((format!("dec{l}"), cin, self.enc_channels(l)));
        }
        for l in 0..self.levels {
            let mut cin = self.enc_channels(l);
            for i in 0..self.head_convs {
                v.push((format!("head{l}_{i}"), cin, b));
                cin = b;
            }
        }
        let merged = self.levels * if self.head_convs > 0 { b } else { 0 }
            + if self.head_convs == 0 {
                (0..self.levels).map(|l| self.enc_channels(l)).sum()
            } else {
                0
            };
        v.push(("cls".into(), merged, k));
        v.push(("reg".into(), merged, 4 * k));
        v
    }
}

/// Which predictor a [`Model`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Free per-cell parameters over an `h_f × w_f` map.
    Tabular {
        h_f: usize,
        w_f: usize,
    },
    ToyNet(ToyNetConfig),
}

/// A predictor together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    outputs: usize,
    params: ParamSet,
}

impl Model {
    /// Zero-initialized tabular predictor with `k` outputs per cell.
    pub fn tabular(h_f: usize, w_f: usize, k: usize) -> Self {
        let mut params = ParamSet::new();
        params.push("logits", Tensor::zeros(&[h_f, w_f, k]));
        params.push("offsets", Tensor::zeros(&[h_f, w_f, 4 * k]));
        Model {
            kind: ModelKind::Tabular { h_f, w_f },
            outputs: k,
            params,
        }
    }

    /// Toy network with fan-in scaled uniform weights drawn from `seed`.
    pub fn toynet(cfg: ToyNetConfig, k: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, cin, cout) in cfg.layers(k) {
            let fan_in = (9 * cin) as f64;
            let bound = match name.as_str() {
                "cls" | "reg" => 0.1 * (3.0 / fan_in).sqrt(),
                _ => (6.0 / fan_in).sqrt(),
            };
            let w = (0..9 * cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(format!("{name}.w"), Tensor::new(vec![3, 3, cin, cout], w)?);
            let b = if name == "cls" { CLS_BIAS_INIT } else { 0.0 };
            params.push(format!("{name}.b"), Tensor::full(&[cout], b));
        }
        Ok(Model {
            kind: ModelKind::ToyNet(cfg),
            outputs: k,
            params,
        })
    }

    /// Rebuilds a model around loaded parameters, checking their layout.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        self.params.check_layout(&params)?;
        Ok(Model {
            kind: self.kind,
            outputs: self.outputs,
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// `N_C * N_A`.
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `(H_f, W_f)`.
    pub fn output_hw(&self) -> (usize, usize) {
        match self.kind {
            ModelKind::Tabular { h_f, w_f } => (h_f, w_f),
            ModelKind::ToyNet(cfg) => (cfg.output_size(), cfg.output_size()),
        }
    }

    /// Records parameters and the forward pass on `tape`. Parameters are
    /// trainable leaves when `trainable`, constants otherwise.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, trainable: bool) -> Result<(Vec<Var>, OutputVars)> {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = match self.kind {
            ModelKind::Tabular { .. } => tabular_predict(&vars)?,
            ModelKind::ToyNet(cfg) => {
                let mut scaled = image.clone();
                scaled.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) * 2.0);
                let x = tape.constant(scaled);
                toynet_predict(tape, &cfg, &vars, x)?
            }
        };
        Ok((vars, out))
    }

    /// Forward pass without gradients.
    pub fn predict(&self, image: &Tensor) -> Result<PredictorOutput> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, image, false)?;
        Ok(PredictorOutput {
            logits: tape.value(out.logits).clone(),
            offsets: tape.value(out.offsets).clone(),
        })
    }
}

/// The identity predictor: parameters are the outputs.
pub fn tabular_predict(params: &[Var]) -> Result<OutputVars> {
    match params {
        [logits, offsets] => Ok(OutputVars {
            logits: *logits,
            offsets: *offsets,
        }),
        _ => Err(Error::shape(
            "tabular_predict",
            format!("expected 2 parameter tensors, got {}", params.len()),
        )),
    }
}

/// Toy encoder-decoder forward pass over an `[S, S, 3]` image.
pub fn toynet_predict(tape: &mut Tape, cfg: &ToyNetConfig, params: &[Var], image: Var) -> Result<OutputVars> {
    cfg.validate()?;
    let s = cfg.input_size;
    if tape.shape(image) != [s, s, 3] {
        return Err(Error::shape(
            "toynet_predict",
            format!("image {:?} for input size {s}", tape.shape(image)),
        ));
    }
    let n_layers = params.len() / 2;
    if params.len() % 2 != 0 || n_layers != 4 + (cfg.levels - 1) * 2 + cfg.levels * cfg.head_convs + 2 {
        return Err(Error::shape(
            "toynet_predict",
            format!("{} parameter tensors do not fit {cfg:?}", params.len()),
        ));
    }
    let mut next = params.chunks(2).map(|p| (p[0], p[1]));
    let mut conv = |tape: &mut Tape, x: Var, stride: usize, act: bool| -> Result<Var> {
        let (w, b) = next.next().expect("layer count checked above");
        let y = tape.conv2d(x, w, Some(b), stride, 1)?;
        Ok(if act { tape.leaky_relu(y, LEAKY_SLOPE) } else { y })
    };

    let x = conv(tape, image, 2, true)?;
    let x = conv(tape, x, 2, true)?;
    let x = conv(tape, x, 2, true)?;
    let mut enc = vec![conv(tape, x, 1, true)?];
    for l in 1..cfg.levels {
        let prev = enc[l - 1];
        enc.push(conv(tape, prev, 2, true)?);
    }

    let mut dec = enc.clone();
    for l in (0..cfg.levels - 1).rev() {
        let up = tape.upsample2x(dec[l + 1])?;
        let merged = tape.concat(&[up, enc[l]])?;
        dec[l] = conv(tape, merged, 1, true)?;
    }

    let mut pyramid = Vec::with_capacity(cfg.levels);
    for (l, &feat) in dec.iter().enumerate() {
        let mut y = feat;
        for _ in 0..cfg.head_convs {
            y = conv(tape, y, 1, true)?;
        }
        for _ in 0..l {
            y = tape.upsample2x(y)?;
        }
        pyramid.push(y);
    }
    let merged = tape.concat(&pyramid)?;
    let logits = conv(tape, merged, 1, false)?;
    let offsets = conv(tape, merged, 1, false)?;
    Ok(OutputVars { logits, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small() -> ToyNetConfig {
        ToyNetConfig {
            input_size: 32,
            base_channels: 2,
            levels: 2,
            head_convs: 1,
        }
    }

    fn image(s: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![s, s, 3], (0..s * s * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        for (cfg, k) in [(ToyNetConfig::default(), 6), (small(), 2)] {
            let m = Model::toynet(cfg, k, 1).unwrap();
            let out = m.predict(&image(cfg.input_size, 2)).unwrap();
            let f = cfg.input_size / 8;
            assert_eq!(out.logits.shape(), &[f, f, k]);
            assert_eq!(out.offsets.shape(), &[f, f, 4 * k]);
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = Model::toynet(small(), 2, 1).unwrap();
        assert!(m.predict(&image(64, 2)).is_err());
        assert!(ToyNetConfig {
            input_size: 40,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_weights_give_constant_logits() {
        let mut m = Model::toynet(small(), 2, 1).unwrap();
        for (name, t) in m.params.names.clone().iter().zip(m.params_mut().tensors_mut()) {
            if name.ends_with(".w") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = m.predict(&image(32, 3)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == CLS_BIAS_INIT));
        assert!(out.offsets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tabular_zero_init() {
        let m = Model::tabular(2, 3, 4);
        let out = m.predict(&Tensor::zeros(&[0])).unwrap();
        assert_eq!(out.logits.shape(), &[2, 3, 4]);
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert!(out.offsets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::toynet(small(), 2, 9).unwrap();
        let b = Model::toynet(small(), 2, 9).unwrap();
        let c = Model::toynet(small(), 2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shift_by_coarsest_stride_shifts_output() {
        // zero biases on a zero background keep far-away features at zero;
        // only cells whose receptive field stays inside the image are compared
        let cfg = ToyNetConfig {
            input_size: 256,
            base_channels: 2,
            levels: 2,
            head_convs: 1,
        };
        let mut m = Model::toynet(cfg, 1, 4).unwrap();
        for (name, t) in m.params.names.clone().iter().zip(m.params_mut().tensors_mut()) {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let blob = |x0: usize| {
            let mut t = Tensor::zeros(&[256, 256, 3]);
            for y in 120..130 {
                for x in x0..x0 + 6 {
                    for c in 0..3 {
                        t.data_mut()[(y * 256 + x) * 3 + c] = 0.3 + 0.2 * c as f64;
                    }
                }
            }
            t
        };
        let shift = 16;
        let a = m.predict(&blob(112)).unwrap();
        let b = m.predict(&blob(112 + shift)).unwrap();
        let (f, cells, margin) = (32, shift / FEAT_STRIDE, 10);
        let mut compared = 0;
        for i in margin..f - margin {
            for j in margin..f - margin - cells {
                assert_eq!(a.logits.data()[i * f + j], b.logits.data()[i * f + j + cells]);
                compared += 1;
            }
        }
        assert!(compared > 0);
        assert!(a.logits.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weights_round_trip() {
        let m = Model::toynet(small(), 2, 5).unwrap();
        let mut buf = Vec::new();
        m.params().write_to(&mut buf).unwrap();
        let back = ParamSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(&back, m.params());
        let header = 4 + 4 + 4;
        assert_eq!(&buf[..4], b"DDWT");
        assert!(buf.len() > header + 8 * m.params().n_values());
        buf[0] = b'X';
        assert!(ParamSet::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = small();
        let m = Model::toynet(cfg, 1, 7).unwrap();
        let img = image(32, 8);
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = tape.constant(img.clone());
            let out = toynet_predict(tape, &cfg, v, x)?;
            let l = tape.sigmoid(out.logits);
            let s = tape.sum(l);
            let o = tape.mul(out.offsets, out.offsets)?;
            let o = tape.sum(o);
            tape.add(s, o)
        };
        let err = grad_check(&f, m.params().tensors(), 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
