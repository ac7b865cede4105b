use super::conv;
use super::tape::{sigmoid, softplus, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

impl Tape {
    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape, y.shape)));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn extremum(&mut self, a: Var, want_max: bool) -> Result<Var> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(Error::shape("reduce", "empty tensor"));
        }
        let mut at = 0;
        for (i, &x) in data.iter().enumerate() {
            if (want_max && x > data[at]) || (!want_max && x < data[at]) {
                at = i;
            }
        }
        let value = Tensor::scalar(data[at]);
        Ok(self.push(value, Op::ReduceExtremum(a, at), &[a]))
    }

    /// Largest element; the first occurrence receives the gradient.
    pub fn reduce_max(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, true)
    }

    /// Smallest element; the first occurrence receives the gradient.
    pub fn reduce_min(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Sums over every axis except the last: `[.., K] -> [K]`.
    pub fn sum_leading(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&k) = t.shape().last() else {
            return Err(Error::shape("sum_leading", "scalar input"));
        };
        let mut out = vec![0.0; k];
        for (i, x) in t.data().iter().enumerate() {
            out[i % k] += x;
        }
        let value = Tensor {
            shape: vec![k],
            data: out,
        };
        Ok(self.push(value, Op::SumLeading(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", x.shape, y.shape)));
        }
        let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..k {
                let s = x.data[r * k + c];
                for t in 0..n {
                    out[r * n + t] += s * y.data[c * n + t];
                }
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution over an `[H, W, C_in]` input with a
    /// `[K_h, K_w, C_in, C_out]` kernel and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.shape.len() != 3 || w.shape.len() != 4 || x.shape[2] != w.shape[2] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", x.shape, w.shape),
            ));
        }
        if x.shape[0] + 2 * pad < w.shape[0] || x.shape[1] + 2 * pad < w.shape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", w.shape, x.shape),
            ));
        }
        let geo = conv::Geometry::new(&x.shape, &w.shape, stride, pad);
        let bias_data = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape != [geo.cout] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} for {} outputs", bv.shape, geo.cout),
                    ));
                }
                Some(bv.data.as_slice())
            }
            None => None,
        };
        let out = conv::forward(&geo, &x.data, &w.data, bias_data);
        let value = Tensor {
            shape: vec![geo.oh, geo.ow, geo.cout],
            data: out,
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Nearest-neighbour upsampling of an `[H, W, C]` map to `[2H, 2W, C]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 3 {
            return Err(Error::shape(
                "upsample2x",
                format!("expected [H, W, C], got {:?}", t.shape),
            ));
        }
        let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                let dst = (y * 2 * w + x) * c;
                out[dst..dst + c].copy_from_slice(&t.data[src..src + c]);
            }
        }
        let value = Tensor {
            shape: vec![2 * h, 2 * w, c],
            data: out,
        };
        Ok(self.push(value, Op::Upsample2x(a), &[a]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{:?} vs leading {:?}", s, lead)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &width) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + width].copy_from_slice(&src[r * width..(r + 1) * width]);
            }
            off += width;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", t.shape, shape)));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Picks elements `start, start + step, ...` along the last axis, as many
    /// as fit.
    pub fn strided(&mut self, a: Var, start: usize, step: usize) -> Result<Var> {
        let t = self.value(a);
        let Some(&inner) = t.shape().last() else {
            return Err(Error::shape("strided", "scalar input"));
        };
        if step == 0 || start >= inner {
            return Err(Error::shape(
                "strided",
                format!("start {start} step {step} on last axis {inner}"),
            ));
        }
        let count = (inner - start).div_ceil(step);
        let rows = t.len() / inner;
        let mut out = Vec::with_capacity(rows * count);
        for r in 0..rows {
            for k in 0..count {
                out.push(t.data[r * inner + start + k * step]);
            }
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = count;
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Strided { x: a, start, step }, &[a]))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tensor};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn identity_kernel_keeps_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 3, 1], 1.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[3, 3, 1, 1], &k));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn strided_conv_output_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[8, 6, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 2, 5]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 5]);
        let bad = tape.constant(Tensor::zeros(&[3, 3, 4, 5]));
        assert!(tape.conv2d(x, bad, None, 1, 1).is_err());
    }

    #[test]
    fn nearest_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2]") && err.contains("[3]"),
            "{err}"
        );
    }

    #[test]
    fn leaf_and_product_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);

        // repeated backward accumulates
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn min_max_ties_route_to_first_argument() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(1.0));
        let m = tape.minimum(a, b).unwrap();
        let n = tape.maximum(a, b).unwrap();
        let s = tape.add(m, n).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
        assert_eq!(tape.grad(b).map_or(0.0, |g| g[0]), 0.0);

        let mut tape = Tape::new();
        let v = tape.leaf(t(&[4], &[3.0, 1.0, 3.0, 1.0]));
        let hi = tape.reduce_max(v).unwrap();
        let lo = tape.reduce_min(v).unwrap();
        let s = tape.sub(hi, lo).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_sum_of_gradients() {
        let inputs = [t(&[3], &[0.3, -1.2, 2.0])];
        let f = |tape: &mut Tape, v: &[Var]| {
            let e = tape.exp(v[0]);
            Ok(tape.sum(e))
        };
        let g = |tape: &mut Tape, v: &[Var]| {
            let s = tape.sigmoid(v[0]);
            Ok(tape.mean(s))
        };
        let both = |tape: &mut Tape, v: &[Var]| {
            let a = f(tape, v)?;
            let b = g(tape, v)?;
            tape.add(a, b)
        };
        let grads = |h: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
            let mut tape = Tape::new();
            let x = tape.leaf(inputs[0].clone());
            let r = h(&mut tape, &[x]).unwrap();
            tape.backward(r).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (gf, gg, gb) = (grads(&f), grads(&g), grads(&both));
        for i in 0..3 {
            assert!((gf[i] + gg[i] - gb[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let err = grad_check(
            &|tape: &mut Tape, v: &[Var]| {
                let a = tape.scale(v[0], 3.0);
                let b = tape.sub(a, v[1])?;
                Ok(tape.sum(b))
            },
            &[t(&[3], &[1.0, 2.0, 3.0]), t(&[3], &[-1.0, 0.5, 4.0])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x = t(
            &[2, 3, 2],
            &[0.3, -0.7, 1.1, 0.45, -0.2, 0.9, 1.3, -1.4, 0.6, 0.15, -0.55, 0.8],
        );
        let w = t(
            &[3, 3, 2, 3],
            &(0..54)
                .map(|i| ((i * 37 % 17) as f64 - 8.31) / 10.0)
                .collect::<Vec<_>>(),
        );
        let b = t(&[3], &[0.1, -0.2, 0.05]);
        let f = |tape: &mut Tape, v: &[Var]| {
            let c1 = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let act = tape.leaky_relu(c1, 0.1);
            let up = tape.upsample2x(act)?;
            let sig = tape.sigmoid(up);
            let soft = tape.softplus(up);
            let cat = tape.concat(&[sig, soft])?;
            let pick = tape.strided(cat, 1, 2)?;
            let sq = tape.mul(pick, pick)?;
            let half = tape.scale(sq, -0.5);
            let e = tape.exp(half);
            let l = tape.add_scalar(e, 1.5);
            let lg = tape.log(l);
            let cl = tape.clamp(lg, -10.0, 10.0);
            let rows = tape.reshape(cl, &[24, 3])?;
            let sums = tape.sum_leading(rows)?;
            let m = tape.reshape(sums, &[1, 3])?;
            let mt = tape.reshape(v[2], &[3, 1])?;
            let mm = tape.matmul(m, mt)?;
            let two = tape.constant(Tensor::full(&[1, 1], 2.0));
            let d = tape.div(mm, two)?;
            let n = tape.neg(d);
            let mx = tape.reduce_max(cat)?;
            let mn = tape.reduce_min(cat)?;
            let spread = tape.sub(mx, mn)?;
            let spread = tape.reshape(spread, &[1, 1])?;
            let tot = tape.add(n, spread)?;
            let tot = tape.reshape(tot, &[1])?;
            let hi = tape.constant(Tensor::full(&[1], 100.0));
            let lo = tape.constant(Tensor::full(&[1], -100.0));
            let other = tape.minimum(tot, hi)?;
            let other = tape.maximum(other, lo)?;
            Ok(tape.mean(other))
        };
        let err = grad_check(&f, &[x, w, b], 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
