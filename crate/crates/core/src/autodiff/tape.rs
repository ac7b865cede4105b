use super::conv;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

#[derive(Debug, Clone)]
pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    /// Reduction to a scalar; stores the flat index of the attaining element.
    ReduceExtremum(Var, usize),
    Sum(Var),
    Mean(Var),
    SumLeading(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Strided {
        x: Var,
        start: usize,
        step: usize,
    },
}

#[derive(Debug, Clone)]
pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
    pub(super) is_param: bool,
    pub(super) grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives gradients on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, false)
    }

    /// Accumulates `d root / d leaf` into every trainable leaf that `root`
    /// depends on. Calling it again without [`Tape::zero_grad`] adds to the
    /// existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                let dst = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += s;
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[id].value.data();
        let val = |v: &Var| nodes[v.0].value.data();
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut send = |v: &Var, f: &dyn Fn(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(a, &|d| axpy(d, g, 1.0));
                send(b, &|d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(a, &|d| axpy(d, g, 1.0));
                send(b, &|d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                send(a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                send(b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(b);
                send(a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                send(b, &|d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * out[i] / bv[i];
                    }
                });
            }
            Op::Neg(a) => send(a, &|d| axpy(d, g, -1.0)),
            Op::Exp(a) => send(a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = val(a);
                send(a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / av[i];
                    }
                })
            }
            Op::Sigmoid(a) => send(a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softplus(a) => {
                let av = val(a);
                send(a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(av[i]);
                    }
                })
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(a);
                send(a, &|d| {
                    for i in 0..d.len() {
                        d[i] += if av[i] > 0.0 { g[i] } else { g[i] * slope };
                    }
                })
            }
            Op::Scale(a, k) => send(a, &|d| axpy(d, g, *k)),
            Op::AddScalar(a) => send(a, &|d| axpy(d, g, 1.0)),
            Op::Clamp(a, lo, hi) => {
                let av = val(a);
                send(a, &|d| {
                    for i in 0..d.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(nodes[id].op, Op::Minimum(..));
                let (av, bv) = (val(a), val(b));
                // ties go to the first argument
                let first = |i: usize| if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                send(a, &|d| {
                    for i in 0..d.len() {
                        if first(i) {
                            d[i] += g[i];
                        }
                    }
                });
                send(b, &|d| {
                    for i in 0..d.len() {
                        if !first(i) {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::ReduceExtremum(a, at) => send(a, &|d| d[*at] += g[0]),
            Op::Sum(a) => send(a, &|d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => send(a, &|d| {
                let k = g[0] / d.len() as f64;
                d.iter_mut().for_each(|x| *x += k);
            }),
            Op::SumLeading(a) => send(a, &|d| {
                let k = g.len();
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i % k];
                }
            }),
            Op::MatMul(a, b) => {
                let (ash, bsh) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let (av, bv) = (val(a), val(b));
                // dA = G B^T, dB = A^T G
                send(a, &|d| {
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for t in 0..n {
                                s += g[r * n + t] * bv[c * n + t];
                            }
                            d[r * k + c] += s;
                        }
                    }
                });
                send(b, &|d| {
                    for r in 0..m {
                        for c in 0..k {
                            let x = av[r * k + c];
                            for t in 0..n {
                                d[c * n + t] += x * g[r * n + t];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geo = conv::Geometry::new(
                    nodes[input.0].value.shape(),
                    nodes[weight.0].value.shape(),
                    *stride,
                    *pad,
                );
                let (xv, wv) = (val(input), val(weight));
                send(input, &|d| conv::backward_input(&geo, g, wv, d));
                send(weight, &|d| conv::backward_weight(&geo, g, xv, d));
                if let Some(b) = bias {
                    send(b, &|d| {
                        for (i, x) in g.iter().enumerate() {
                            d[i % geo.cout] += x;
                        }
                    });
                }
            }
            Op::Upsample2x(a) => {
                let sh = nodes[a.0].value.shape();
                let (h, w, c) = (sh[0], sh[1], sh[2]);
                send(a, &|d| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let src = ((y / 2) * w + x / 2) * c;
                            let dst = (y * 2 * w + x) * c;
                            for ch in 0..c {
                                d[src + ch] += g[dst + ch];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total: usize = *nodes[id].value.shape().last().unwrap();
                let mut off = 0;
                for p in parts {
                    let width = *nodes[p.0].value.shape().last().unwrap();
                    send(p, &|d| {
                        let rows = d.len() / width;
                        for r in 0..rows {
                            for ch in 0..width {
                                d[r * width + ch] += g[r * total + off + ch];
                            }
                        }
                    });
                    off += width;
                }
            }
            Op::Reshape(a) => send(a, &|d| axpy(d, g, 1.0)),
            Op::Strided { x, start, step } => {
                let inner = *nodes[x.0].value.shape().last().unwrap();
                let count = *nodes[id].value.shape().last().unwrap();
                send(x, &|d| {
                    let rows = d.len() / inner;
                    for r in 0..rows {
                        for t in 0..count {
                            d[r * inner + start + t * step] += g[r * count + t];
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(super) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
