//! Forward and backward kernels over plain tensors.
//!
//! Both the recording [`Graph`](super::Graph) and the [`Eager`](super::Eager)
//! executor call into these, so a forward pass yields the same bits whichever
//! path runs it.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BLOCK_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps the spatial size of a square
    /// odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = input + 2 * spec.padding;
    if padded < kernel || spec.stride == 0 {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

pub fn conv2d_output_shape(x: Shape, w: Shape, b: Shape, spec: ConvSpec) -> Result<Shape> {
    let [n, cin, h, wd] = x;
    let [cout, wcin, kh, kw] = w;
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {wcin}"),
        ));
    }
    if b != [1, cout, 1, 1] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {b:?} does not match {cout} output channels"),
        ));
    }
    let (Some(ho), Some(wo)) = (conv_output_size(h, kh, spec), conv_output_size(wd, kw, spec)) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
        ));
    };
    Ok([n, cout, ho, wo])
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: Shape, w: Shape, out: Shape, spec: ConvSpec) -> Self {
        Self {
            cin: x[1],
            h: x[2],
            w: x[3],
            kh: w[2],
            kw: w[3],
            ho: out[2],
            wo: out[3],
            stride: spec.stride,
            pad: spec.padding,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Input can be fed to the GEMM directly without unrolling.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_block(&self) -> usize {
        (COL_BLOCK_ELEMS / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Unrolls output rows `[r0, r1)` of one image into `cols` (`k x (rows*wo)`).
    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let bc = (r1 - r0) * self.wo;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * bc..(row + 1) * bc];
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[(oy - r0) * self.wo..(oy - r0 + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `cols` back into `gx`.
    fn col2im<T: Scalar>(&self, cols: &[T], r0: usize, r1: usize, gx: &mut [T]) {
        let bc = (r1 - r0) * self.wo;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * bc..(row + 1) * bc];
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[(oy - r0) * self.wo..(oy - r0 + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let out_shape = conv2d_output_shape(x.shape(), w.shape(), b.shape(), spec)?;
    let geom = ConvGeom::new(x.shape(), w.shape(), out_shape, spec);
    let [n, cout, ho, wo] = out_shape;
    let k = geom.k();
    let hwo = ho * wo;
    let in_plane = geom.cin * geom.h * geom.w;

    let mut out = Tensor::zeros(out_shape);
    {
        let od = out.data_mut();
        for (co, chunk) in od.chunks_exact_mut(hwo).enumerate() {
            chunk.fill(b.data()[co % cout]);
        }
    }
    let rows = geom.rows_per_block();
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * rows * wo]
    };
    for ni in 0..n {
        let xs = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let out_img = &mut out.data_mut()[ni * cout * hwo..(ni + 1) * cout * hwo];
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + rows).min(ho);
            let bc = (r1 - r0) * wo;
            let rhs: &[T] = if geom.is_pointwise() {
                &xs[r0 * wo..]
            } else {
                geom.im2col(xs, r0, r1, &mut cols);
                &cols[..k * bc]
            };
            let rhs_rs = if geom.is_pointwise() { hwo } else { bc };
            T::gemm(
                cout,
                k,
                bc,
                T::one(),
                w.data(),
                (k as isize, 1),
                rhs,
                (rhs_rs as isize, 1),
                T::one(),
                &mut out_img[r0 * wo..],
                (hwo as isize, 1),
            );
            r0 = r1;
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a convolution given the upstream gradient `g`. Only the
/// requested operands are computed.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>, spec: ConvSpec, want: [bool; 3]) -> ConvGrads<T> {
    let out_shape = g.shape();
    let geom = ConvGeom::new(x.shape(), w.shape(), out_shape, spec);
    let [n, cout, ho, wo] = out_shape;
    let k = geom.k();
    let hwo = ho * wo;
    let in_plane = geom.cin * geom.h * geom.w;

    let mut gx = want[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = want[1].then(|| Tensor::zeros(w.shape()));
    let gb = want[2].then(|| {
        let mut gb = Tensor::zeros([1, cout, 1, 1]);
        for (idx, plane) in g.data().chunks_exact(hwo).enumerate() {
            let s: f64 = plane.iter().map(|v| v.as_f64()).sum();
            gb.data_mut()[idx % cout] += T::lit(s);
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads {
            input: None,
            weight: None,
            bias: gb,
        };
    }

    let rows = geom.rows_per_block();
    let pointwise = geom.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * rows * wo }];
    for ni in 0..n {
        let xs = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let gs = &g.data()[ni * cout * hwo..(ni + 1) * cout * hwo];
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + rows).min(ho);
            let bc = (r1 - r0) * wo;
            let g_block = &gs[r0 * wo..];
            if let Some(gw) = gw.as_mut() {
                let (rhs, rs): (&[T], usize) = if pointwise {
                    (&xs[r0 * wo..], hwo)
                } else {
                    geom.im2col(xs, r0, r1, &mut cols);
                    (&cols[..k * bc], bc)
                };
                // gW (cout x k) += g_block (cout x bc) * cols^T (bc x k)
                T::gemm(
                    cout,
                    bc,
                    k,
                    T::one(),
                    g_block,
                    (hwo as isize, 1),
                    rhs,
                    (1, rs as isize),
                    T::one(),
                    gw.data_mut(),
                    (k as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx.data_mut()[ni * in_plane..(ni + 1) * in_plane];
                if pointwise {
                    // gx block (k x bc) += W^T (k x cout) * g_block (cout x bc)
                    T::gemm(
                        k,
                        cout,
                        bc,
                        T::one(),
                        w.data(),
                        (1, k as isize),
                        g_block,
                        (hwo as isize, 1),
                        T::one(),
                        &mut gxs[r0 * wo..],
                        (hwo as isize, 1),
                    );
                } else {
                    let gcols = &mut cols[..k * bc];
                    T::gemm(
                        k,
                        cout,
                        bc,
                        T::one(),
                        w.data(),
                        (1, k as isize),
                        g_block,
                        (hwo as isize, 1),
                        T::zero(),
                        gcols,
                        (bc as isize, 1),
                    );
                    geom.col2im(gcols, r0, r1, gxs);
                }
            }
            r0 = r1;
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gaussian_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (-x * T::lit(FRAC_1_SQRT_2)).erfc()
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * gaussian_cdf(v))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(x, g, |v, gv| {
        let pdf = T::lit(FRAC_1_SQRT_2PI) * (-(v * v) * T::lit(0.5)).exp();
        gv * (gaussian_cdf(v) + v * pdf)
    })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(y, g, |s, gv| gv * s * (T::one() - s))
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index that won (first in row-major order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial size {h}x{w} must be even and non-empty"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = xd[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec([n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(input_shape: Shape, argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&idx, &gv) in argmax.iter().zip(g.data()) {
        gd[idx] += gv;
    }
    gx
}

/// Extends the bottom/right edges by replicating the last row/column.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, hh, ww] = x.shape();
    if h < hh || w < ww || hh == 0 || ww == 0 {
        return Err(Error::shape("pad_replicate", format!("cannot pad {hh}x{ww} to {h}x{w}")));
    }
    Ok(Tensor::from_fn([n, c, h, w], |[ni, ci, y, xx]| {
        x.at([ni, ci, y.min(hh - 1), xx.min(ww - 1)])
    }))
}

pub fn pad_replicate_backward<T: Scalar>(input_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [_, _, hh, ww] = input_shape;
    let [n, c, h, w] = g.shape();
    let mut gx = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let idx = gx.offset([ni, ci, y.min(hh - 1), xx.min(ww - 1)]);
                    gx.data_mut()[idx] += g.at([ni, ci, y, xx]);
                }
            }
        }
    }
    gx
}

/// Keeps the top-left `h x w` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [_, _, hh, ww] = x.shape();
    if h > hh || w > ww {
        return Err(Error::shape("crop", format!("cannot crop {hh}x{ww} to {h}x{w}")));
    }
    Ok(x.window(0, 0, h, w))
}

pub fn crop_backward<T: Scalar>(input_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = g.shape();
    let mut gx = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = g.offset([ni, ci, y, 0]);
                let dst = gx.offset([ni, ci, y, 0]);
                gx.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
            }
        }
    }
    gx
}

/// Source taps for 2x upsampling along one axis (half-pixel centers).
fn upsample_taps<T: Scalar>(len: usize) -> Vec<(usize, usize, T)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, lx) in &tx {
                let top = (T::one() - lx) * r0[x0] + lx * r0[x1];
                let bot = (T::one() - lx) * r1[x0] + lx * r1[x1];
                out.push((T::one() - ly) * top + ly * bot);
            }
        }
    }
    Tensor::from_vec([n, c, 2 * h, 2 * w], out).expect("shape")
}

pub fn upsample_bilinear2x_backward<T: Scalar>(input_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let mut gx = Tensor::zeros(input_shape);
    for (gplane, dplane) in g.data().chunks_exact(4 * h * w).zip(gx.data_mut().chunks_exact_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gplane[oy * 2 * w + ox];
                let top = (T::one() - ly) * gv;
                let bot = ly * gv;
                dplane[y0 * w + x0] += (T::one() - lx) * top;
                dplane[y0 * w + x1] += lx * top;
                dplane[y1 * w + x0] += (T::one() - lx) * bot;
                dplane[y1 * w + x1] += lx * bot;
            }
        }
    }
    gx
}

pub struct InstanceNormSaved<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_affine(x: Shape, p: Shape, op: &'static str) -> Result<()> {
    if p != [1, x[1], 1, 1] {
        return Err(Error::shape(
            op,
            format!("per-channel parameter shape {p:?} does not match input {x:?}"),
        ));
    }
    Ok(())
}

/// Per-(batch, channel) standardization followed by a per-channel affine map.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, InstanceNormSaved<T>)> {
    check_affine(x.shape(), gain.shape(), "instance_norm")?;
    check_affine(x.shape(), bias.shape(), "instance_norm")?;
    let [_, c, h, w] = x.shape();
    let hw = h * w;
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.len() / hw.max(1));
    for (p, plane) in x.data().chunks_exact(hw).enumerate() {
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let var = plane
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / hw as f64;
        let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        let (mean_t, is_t) = (T::lit(mean), T::lit(is));
        inv_std.push(is_t);
        let (g, b) = (gain.data()[p % c], bias.data()[p % c]);
        let nd = &mut normalized.data_mut()[p * hw..(p + 1) * hw];
        for (d, &v) in nd.iter_mut().zip(plane) {
            *d = (v - mean_t) * is_t;
        }
        let od = &mut out.data_mut()[p * hw..(p + 1) * hw];
        for (o, &nv) in od.iter_mut().zip(&normalized.data()[p * hw..(p + 1) * hw]) {
            *o = g * nv + b;
        }
    }
    Ok((out, InstanceNormSaved { normalized, inv_std }))
}

pub fn instance_norm_backward<T: Scalar>(
    saved: &InstanceNormSaved<T>,
    gain: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = g.shape();
    let [_, c, h, w] = shape;
    let hw = h * w;
    let mut gx = Tensor::zeros(shape);
    let mut ggain = Tensor::zeros([1, c, 1, 1]);
    let mut gbias = Tensor::zeros([1, c, 1, 1]);
    let inv_n = 1.0 / hw as f64;
    for (p, (gp, np)) in g.data().chunks_exact(hw).zip(saved.normalized.data().chunks_exact(hw)).enumerate() {
        let ch = p % c;
        let gain_c = gain.data()[ch].as_f64();
        let mut sum_g = 0.0;
        let mut sum_gn = 0.0;
        for (&gv, &nv) in gp.iter().zip(np) {
            sum_g += gv.as_f64();
            sum_gn += gv.as_f64() * nv.as_f64();
        }
        ggain.data_mut()[ch] += T::lit(sum_gn);
        gbias.data_mut()[ch] += T::lit(sum_g);
        // d/dx of gain * xhat, with sums of dxhat = gain * g.
        let mean_dg = gain_c * sum_g * inv_n;
        let mean_dgn = gain_c * sum_gn * inv_n;
        let is = saved.inv_std[p].as_f64();
        let dst = &mut gx.data_mut()[p * hw..(p + 1) * hw];
        for ((d, &gv), &nv) in dst.iter_mut().zip(gp).zip(np) {
            let dxhat = gain_c * gv.as_f64();
            *d = T::lit(is * (dxhat - mean_dg - nv.as_f64() * mean_dgn));
        }
    }
    (gx, ggain, gbias)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    let [n, _, h, w] = first;
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat", format!("{:?} incompatible with {first:?}", p.shape())));
        }
        c_total += pc;
    }
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for ni in 0..n {
        for p in parts {
            let plane = p.shape()[1] * h * w;
            data.extend_from_slice(&p.data()[ni * plane..(ni + 1) * plane]);
        }
    }
    Tensor::from_vec([n, c_total, h, w], data)
}

pub fn concat_channels_backward<T: Scalar>(shapes: &[Shape], g: &Tensor<T>) -> Vec<Tensor<T>> {
    let [n, c_total, h, w] = g.shape();
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for ni in 0..n {
        let mut c0 = 0;
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let start = (ni * c_total + c0) * h * w;
            out.extend_from_slice(&g.data()[start..start + s[1] * h * w]);
            c0 += s[1];
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(&s, d)| Tensor::from_vec(s, d).expect("shape"))
        .collect()
}

pub fn broadcast_shape(a: Shape, b: Shape, op: &'static str) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn broadcast_strides(s: Shape) -> [usize; 4] {
    let dense = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if s[i] == 1 { 0 } else { dense[i] };
    }
    out
}

/// Visits every output element with the flat offsets of both operands.
fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a);
    let sb = broadcast_strides(b);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ba + w * sa[3], bb + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape(), op.name())?;
    let mut out = Tensor::zeros(shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(shape, a.shape(), b.shape(), |o, ia, ib| {
        od[o] = op.apply(ad[ia], bd[ib]);
    });
    Ok(out)
}

/// Gradients of a broadcasting binary op, reduced back onto each operand's shape.
pub fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let shape = g.shape();
    let mut ga = want[0].then(|| Tensor::zeros(a.shape()));
    let mut gb = want[1].then(|| Tensor::zeros(b.shape()));
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(shape, a.shape(), b.shape(), |o, ia, ib| {
        let gv = gd[o];
        if let Some(ga) = ga.as_mut() {
            ga.data_mut()[ia] += match op {
                BinaryOp::Mul => gv * bd[ib],
                _ => gv,
            };
        }
        if let Some(gb) = gb.as_mut() {
            gb.data_mut()[ib] += match op {
                BinaryOp::Add => gv,
                BinaryOp::Sub => -gv,
                BinaryOp::Mul => gv * ad[ia],
            };
        }
    });
    (ga, gb)
}

pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    x.map(|v| v.max(lo).min(hi))
}

/// Gradient passes where the input lies inside `[lo, hi]` (inclusive).
pub fn clamp_backward<T: Scalar>(x: &Tensor<T>, lo: T, hi: T, g: &Tensor<T>) -> Tensor<T> {
    zip_map(x, g, |v, gv| if v >= lo && v <= hi { gv } else { T::zero() })
}

/// Sum over all elements, accumulated in double precision.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    T::lit(x.data().iter().map(|v| v.as_f64()).sum::<f64>())
}

pub fn l1_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(T::lit(s / a.len() as f64))
}

/// Gradient of `mean |a - b|` w.r.t. `a` (negate for `b`); zero at ties.
pub fn l1_mean_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> Tensor<T> {
    let scale = g / T::lit(a.len() as f64);
    zip_map(a, b, |x, y| {
        if x > y {
            scale
        } else if x < y {
            -scale
        } else {
            T::zero()
        }
    })
}

/// Continuous lattice position of a color component when the lattice
/// spans `[0, c_max]` with `size` evenly spaced nodes.
#[inline]
pub fn grid_position<T: Scalar>(v: T, size: usize, c_max: T) -> (usize, T, bool) {
    let top = T::lit((size - 1) as f64);
    let u = v * top / c_max;
    let inside = u >= T::zero() && u <= top;
    let u = u.max(T::zero()).min(top);
    let i0 = u.floor().as_f64() as usize;
    let i0 = i0.min(size - 2);
    (i0, u - T::lit(i0 as f64), inside)
}

pub fn check_lut_shapes(x: Shape, grid: Shape) -> Result<usize> {
    let m = grid[0];
    if grid != [m, m, m, 3] || m < 2 {
        return Err(Error::shape("lut", format!("grid shape {grid:?} is not [M, M, M, 3] with M >= 2")));
    }
    if x[1] != 3 {
        return Err(Error::shape("lut", format!("input has {} channels, expected 3", x[1])));
    }
    Ok(m)
}

struct Cell<T> {
    base: [usize; 3],
    frac: [T; 3],
    inside: [bool; 3],
}

impl<T: Scalar> Cell<T> {
    fn locate(rgb: [T; 3], m: usize, c_max: T) -> Self {
        let mut base = [0; 3];
        let mut frac = [T::zero(); 3];
        let mut inside = [false; 3];
        for a in 0..3 {
            let (i, f, ok) = grid_position(rgb[a], m, c_max);
            base[a] = i;
            frac[a] = f;
            inside[a] = ok;
        }
        Self { base, frac, inside }
    }

    /// Flat offsets (times 3) and weights of the 8 corners.
    fn corners(&self, m: usize) -> [(usize, T); 8] {
        let mut out = [(0, T::zero()); 8];
        for (idx, slot) in out.iter_mut().enumerate() {
            let mut weight = T::one();
            let mut off = [0; 3];
            for a in 0..3 {
                let bit = (idx >> (2 - a)) & 1;
                off[a] = self.base[a] + bit;
                weight *= if bit == 1 { self.frac[a] } else { T::one() - self.frac[a] };
            }
            *slot = (((off[0] * m + off[1]) * m + off[2]) * 3, weight);
        }
        out
    }
}

pub fn lut_trilinear<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>, c_max: T) -> Result<Tensor<T>> {
    let m = check_lut_shapes(x.shape(), grid.shape())?;
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let (xd, gd) = (x.data(), grid.data());
    for ni in 0..n {
        let base = ni * 3 * hw;
        for p in 0..hw {
            let rgb = [xd[base + p], xd[base + hw + p], xd[base + 2 * hw + p]];
            let cell = Cell::locate(rgb, m, c_max);
            let mut acc = [T::zero(); 3];
            for (off, wgt) in cell.corners(m) {
                for c in 0..3 {
                    acc[c] += wgt * gd[off + c];
                }
            }
            let od = out.data_mut();
            for c in 0..3 {
                od[base + c * hw + p] = acc[c];
            }
        }
    }
    Ok(out)
}

/// Returns (grad wrt input image, grad wrt grid).
pub fn lut_trilinear_backward<T: Scalar>(
    x: &Tensor<T>,
    grid: &Tensor<T>,
    c_max: T,
    g: &Tensor<T>,
    want: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let m = grid.shape()[0];
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let mut gx = want[0].then(|| Tensor::zeros(x.shape()));
    let mut ggrid = want[1].then(|| Tensor::zeros(grid.shape()));
    let (xd, gd, upd) = (x.data(), grid.data(), g.data());
    let coord_scale = T::lit((m - 1) as f64) / c_max;
    for ni in 0..n {
        let base = ni * 3 * hw;
        for p in 0..hw {
            let rgb = [xd[base + p], xd[base + hw + p], xd[base + 2 * hw + p]];
            let up = [upd[base + p], upd[base + hw + p], upd[base + 2 * hw + p]];
            let cell = Cell::locate(rgb, m, c_max);
            let corners = cell.corners(m);
            if let Some(gg) = ggrid.as_mut() {
                let ggd = gg.data_mut();
                for &(off, wgt) in &corners {
                    for c in 0..3 {
                        ggd[off + c] += wgt * up[c];
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                for a in 0..3 {
                    if !cell.inside[a] {
                        continue;
                    }
                    // derivative of each corner weight along axis `a`
                    let mut acc = T::zero();
                    for (idx, &(off, _)) in corners.iter().enumerate() {
                        let mut dw = T::one();
                        for b in 0..3 {
                            let bit = (idx >> (2 - b)) & 1;
                            dw *= if b == a {
                                if bit == 1 {
                                    T::one()
                                } else {
                                    -T::one()
                                }
                            } else if bit == 1 {
                                cell.frac[b]
                            } else {
                                T::one() - cell.frac[b]
                            };
                        }
                        for c in 0..3 {
                            acc += dw * gd[off + c] * up[c];
                        }
                    }
                    gx.data_mut()[base + a * hw + p] += acc * coord_scale;
                }
            }
        }
    }
    (gx, ggrid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_formula() {
        let spec = ConvSpec { stride: 2, padding: 1 };
        assert_eq!(conv_output_size(32, 3, spec), Some(16));
        assert_eq!(conv_output_size(33, 3, spec), Some(17));
        assert_eq!(conv_output_size(7, 1, ConvSpec { stride: 1, padding: 0 }), Some(7));
        assert_eq!(conv_output_size(1, 3, ConvSpec { stride: 1, padding: 0 }), None);
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let x = Tensor::<f64>::from_fn([2, 2, 5, 6], |[n, c, h, w]| ((n * 7 + c * 3 + h * 5 + w) % 11) as f64 - 4.0);
        let w = Tensor::<f64>::from_fn([3, 2, 3, 3], |[o, i, y, z]| ((o + 2 * i + 3 * y + z) % 5) as f64 * 0.25 - 0.5);
        let b = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let spec = ConvSpec { stride: 2, padding: 1 };
        let out = conv2d(&x, &w, &b, spec).unwrap();
        assert_eq!(out.shape(), [2, 3, 3, 3]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b.data()[o];
                        for i in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                        acc += w.at([o, i, ky, kx]) * x.at([n, i, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert!((out.at([n, o, oy, ox]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_taps_use_half_pixel_centers() {
        let taps = upsample_taps::<f64>(2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.25));
    }

    #[test]
    fn grid_position_clamps_to_last_cell() {
        let (i, f, inside) = grid_position(1.0f64, 33, 1.0);
        assert_eq!((i, f, inside), (31, 1.0, true));
        let (i, f, inside) = grid_position(1.5f64, 33, 1.0);
        assert_eq!((i, f, inside), (31, 1.0, false));
        let (i, f, _) = grid_position(0.5f64, 33, 1.0);
        assert_eq!((i, f), (16, 0.0));
    }
}
