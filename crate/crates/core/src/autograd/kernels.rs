//! Forward and backward numeric kernels used by the graph ops.

use crate::tensor::{Interp, Shape, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvOpts {
    /// Stride 1 with "same" padding for an odd kernel at the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every index touched by the
    // given strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub opts: ConvOpts,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ConvOpts {
        stride,
        padding,
        dilation,
    } = g.opts;
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((ci * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ConvOpts {
        stride,
        padding,
        dilation,
    } = g.opts;
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((ci * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let s = x.shape();
    let cout = w.shape().n;
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(Shape::new(s.n, cout, g.ho, g.wo));
    let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_per = s.c * s.plane();
    let out_per = cout * p;
    for n in 0..s.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let b: &[f64] = if g.pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let yn = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        gemm(cout, k, p, w.data(), false, b, false, yn, 0.0);
        if let Some(bias) = bias {
            for (co, chunk) in yn.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; each only if requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let s = x.shape();
    let cout = w.shape().n;
    let (k, p) = (g.k(), g.p());
    let in_per = s.c * s.plane();
    let out_per = cout * p;
    let mut dx = need.0.then(|| Tensor::zeros(s));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut db = need.2.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1)));
    let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcol = if need.0 && !g.pointwise() {
        vec![0.0; k * p]
    } else {
        Vec::new()
    };
    for n in 0..s.n {
        let dyn_ = &dy.data()[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyn_.chunks(p).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f64>();
            }
        }
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let b: &[f64] = if g.pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            gemm(cout, p, k, dyn_, false, b, true, dw.data_mut(), 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[n * in_per..(n + 1) * in_per];
            if g.pointwise() {
                gemm(k, cout, p, w.data(), true, dyn_, false, dxn, 1.0);
            } else {
                gemm(k, cout, p, w.data(), true, dyn_, false, &mut dcol, 0.0);
                col2im(&dcol, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Normalizes each (sample, channel group) to zero mean and unit variance,
/// then applies the per-channel affine transform. Returns the output and the
/// per-(sample, group) mean and reciprocal standard deviation.
pub(crate) fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let cpg = s.c / groups;
    let plane = s.plane();
    let m = (cpg * plane) as f64;
    let mut out = Tensor::zeros(s);
    let mut means = Vec::with_capacity(s.n * groups);
    let mut rstds = Vec::with_capacity(s.n * groups);
    for n in 0..s.n {
        for gi in 0..groups {
            let start = (n * s.c + gi * cpg) * plane;
            let block = &x.data()[start..start + cpg * plane];
            let mean = block.iter().sum::<f64>() / m;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let dst = &mut out.data_mut()[start..start + cpg * plane];
            for (cc, (d, src)) in dst.chunks_mut(plane).zip(block.chunks(plane)).enumerate() {
                let c = gi * cpg + cc;
                let (ga, be) = (gamma.data()[c], beta.data()[c]);
                for (o, &v) in d.iter_mut().zip(src) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    groups: usize,
    means: &[f64],
    rstds: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let cpg = s.c / groups;
    let plane = s.plane();
    let m = (cpg * plane) as f64;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for n in 0..s.n {
        for gi in 0..groups {
            let (mean, rstd) = (means[n * groups + gi], rstds[n * groups + gi]);
            let start = (n * s.c + gi * cpg) * plane;
            let xb = &x.data()[start..start + cpg * plane];
            let dyb = &dy.data()[start..start + cpg * plane];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cc in 0..cpg {
                let c = gi * cpg + cc;
                let ga = gamma.data()[c];
                let (mut dg, mut dbt) = (0.0, 0.0);
                for i in cc * plane..(cc + 1) * plane {
                    let xhat = (xb[i] - mean) * rstd;
                    dg += dyb[i] * xhat;
                    dbt += dyb[i];
                    let dxhat = dyb[i] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma.data_mut()[c] += dg;
                dbeta.data_mut()[c] += dbt;
            }
            let dxb = &mut dx.data_mut()[start..start + cpg * plane];
            for cc in 0..cpg {
                let ga = gamma.data()[gi * cpg + cc];
                for i in cc * plane..(cc + 1) * plane {
                    let xhat = (xb[i] - mean) * rstd;
                    let dxhat = dyb[i] * ga;
                    dxb[i] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Adjoint of [`Tensor::resize_bilinear`]: scatters output gradients back to
/// the input grid.
pub(crate) fn resize_bilinear_backward(dy: &Tensor, input: Shape) -> Tensor {
    let so = dy.shape();
    let ry = Interp::new(input.h, so.h);
    let rx = Interp::new(input.w, so.w);
    let mut dx = Tensor::zeros(input);
    for n in 0..so.n {
        for c in 0..so.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for oy in 0..so.h {
                let (y0, y1, fy) = ry.at(oy);
                for ox in 0..so.w {
                    let (x0, x1, fx) = rx.at(ox);
                    let g = src[oy * so.w + ox];
                    dst[y0 * input.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * input.w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * input.w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * input.w + x1] += g * fy * fx;
                }
            }
        }
    }
    dx
}

/// Broadcast-compatible output shape of two operands.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for (i, (x, y)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[i] = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return None;
        };
    }
    Some(Shape::from_dims(out))
}

fn broadcast_strides(s: Shape) -> [usize; 4] {
    let full = [s.c * s.h * s.w, s.h * s.w, s.w, 1];
    let d = s.dims();
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if d[i] == 1 { 0 } else { full[i] };
    }
    out
}

/// Visits every output element with the flat indices of both operands.
pub(crate) fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a);
    let sb = broadcast_strides(b);
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for y in 0..out.h {
                let ba = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out.w {
                    f(o, ba + x * sa[3], bb + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums `g` (shaped like the broadcast output) down to `target`.
pub(crate) fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let gs = g.shape();
    for_each_broadcast(gs, target, gs, |o, it, _| {
        out.data_mut()[it] += g.data()[o];
    });
    out
}
