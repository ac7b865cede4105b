//! HWC convolution kernels. The output channel is the innermost loop so the
//! hot loops run over contiguous memory.

pub(super) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Self {
        let (h, w, cin) = (input[0], input[1], input[2]);
        let (kh, kw, cout) = (kernel[0], kernel[1], kernel[3]);
        Geometry {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Input pixel under kernel tap `(ky, kx)` for output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

pub(super) fn forward(g: &Geometry, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some(px) = g.source(oy, ox, ky, kx) else { continue };
                    let xin = &x[px * g.cin..(px + 1) * g.cin];
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &v) in xin.iter().enumerate() {
                        let row = &k[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn backward_input(g: &Geometry, gout: &[f64], k: &[f64], dx: &mut [f64]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let go = &gout[o..o + g.cout];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some(px) = g.source(oy, ox, ky, kx) else { continue };
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    let dst = &mut dx[px * g.cin..(px + 1) * g.cin];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let row = &k[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        let mut s = 0.0;
                        for (a, b) in go.iter().zip(row) {
                            s += a * b;
                        }
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(super) fn backward_weight(g: &Geometry, gout: &[f64], x: &[f64], dk: &mut [f64]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let go = &gout[o..o + g.cout];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some(px) = g.source(oy, ox, ky, kx) else { continue };
                    let xin = &x[px * g.cin..(px + 1) * g.cin];
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &v) in xin.iter().enumerate() {
                        let row = &mut dk[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        for (d, &gv) in row.iter_mut().zip(go) {
                            *d += v * gv;
                        }
                    }
                }
            }
        }
    }
}
