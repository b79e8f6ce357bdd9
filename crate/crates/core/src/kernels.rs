//! Forward and backward numeric kernels for the spatial operators.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Option<Self> {
        let (kh, kw) = (weight.h, weight.w);
        if input.h + 2 * pad < kh || input.w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            in_c: input.c,
            out_c: weight.n,
            kh,
            kw,
            stride,
            pad,
            h: input.h,
            w: input.w,
            oh: (input.h + 2 * pad - kh) / stride + 1,
            ow: (input.w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &col[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.shape().n;
    let out_shape = Shape::new(n, g.out_c, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let (k, p) = (g.k(), g.p());
    let wv = view(weight.data(), g.out_c, k);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * p;
    for b in 0..n {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out.data_mut()[b * out_per..(b + 1) * out_per];
        for (oc, chunk) in ob.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        let cv = if g.is_pointwise() {
            view(xb, k, p)
        } else {
            im2col(g, xb, &mut col);
            view(&col, k, p)
        };
        general_mat_mul(1.0, &wv, &cv, 1.0, &mut view_mut(ob, g.out_c, p));
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    dx: Option<&mut Tensor>,
    dw: &mut Tensor,
    db: &mut Tensor,
) {
    let n = x.shape().n;
    let (k, p) = (g.k(), g.p());
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * p;
    let wv = view(weight.data(), g.out_c, k);
    let mut col = vec![0.0; k * p];
    let mut dx = dx;
    for b in 0..n {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let gb = &dout.data()[b * out_per..(b + 1) * out_per];
        for (oc, chunk) in gb.chunks_exact(p).enumerate() {
            db.data_mut()[oc] += chunk.iter().sum::<f64>();
        }
        let gv = view(gb, g.out_c, p);
        {
            let cv = if g.is_pointwise() {
                view(xb, k, p)
            } else {
                im2col(g, xb, &mut col);
                view(&col, k, p)
            };
            general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut view_mut(dw.data_mut(), g.out_c, k));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                general_mat_mul(1.0, &wv.t(), &gv, 1.0, &mut view_mut(dxb, k, p));
            } else {
                general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut view_mut(&mut col, k, p));
                col2im(g, &col, dxb);
            }
        }
    }
}

/// Source index pair and interpolation weight per output coordinate, using
/// half-pixel centers: `src = (dst + 0.5) / factor - 0.5`, clamped at 0.
pub(crate) fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let a = src[y0 * s.w + x0];
                    let b = src[y0 * s.w + x1];
                    let c_ = src[y1 * s.w + x0];
                    let d = src[y1 * s.w + x1];
                    let top = a + lx * (b - a);
                    let bottom = c_ + lx * (d - c_);
                    dst[oy * ow + ox] = top + ly * (bottom - top);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &Tensor, in_shape: Shape, factor: usize) -> Tensor {
    let s = in_shape;
    let ow = s.w * factor;
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dout.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    dst[y0 * s.w + x0] += v * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * s.w + x1] += v * (1.0 - ly) * lx;
                    dst[y1 * s.w + x0] += v * ly * (1.0 - lx);
                    dst[y1 * s.w + x1] += v * ly * lx;
                }
            }
        }
    }
    dx
}
