//! Forward kernels and their adjoints for the handful of operations the
//! network is built from. Everything here is a pure function of its
//! arguments; the tape in [`crate::tape`] wires them together.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How out-of-range frame indices are resolved by a temporally padded
/// convolution. Spatial padding is always zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalPadding {
    Zeros,
    Replicate,
    #[default]
    Circular,
}

impl TemporalPadding {
    pub fn name(self) -> &'static str {
        match self {
            TemporalPadding::Zeros => "zeros",
            TemporalPadding::Replicate => "replicate",
            TemporalPadding::Circular => "circular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zeros" => Some(TemporalPadding::Zeros),
            "replicate" => Some(TemporalPadding::Replicate),
            "circular" => Some(TemporalPadding::Circular),
            _ => None,
        }
    }

    fn resolve(self, idx: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&idx) {
            return Some(idx as usize);
        }
        match self {
            TemporalPadding::Zeros => None,
            TemporalPadding::Replicate => Some(idx.clamp(0, n - 1) as usize),
            TemporalPadding::Circular => Some(idx.rem_euclid(n) as usize),
        }
    }
}

/// Stride and padding of a 3-D convolution. Spatial stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride_t: usize,
    /// `(t, h, w)` padding.
    pub pad: [usize; 3],
    pub temporal: TemporalPadding,
}

impl ConvGeom {
    pub fn new(stride_t: usize, pad: [usize; 3], temporal: TemporalPadding) -> Self {
        ConvGeom {
            stride_t,
            pad,
            temporal,
        }
    }

    /// Output `(T, H, W)` for an input of `(T, H, W)` and a kernel of `(kt, kh, kw)`.
    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let [t, h, w] = input;
        let [kt, kh, kw] = kernel;
        let [pt, ph, pw] = self.pad;
        if self.stride_t == 0 || t + 2 * pt < kt || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some([
            (t + 2 * pt - kt) / self.stride_t + 1,
            h + 2 * ph - kh + 1,
            w + 2 * pw - kw + 1,
        ])
    }
}

/// A bias-free 3-D convolution kernel, weights shaped `(C_out, C_in, k_t, k_h, k_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel3<T> {
    pub weights: Tensor<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvKernel3<T> {
    pub fn new(weights: Tensor<T>, geom: ConvGeom) -> Result<Self> {
        check_kernel(&weights)?;
        Ok(ConvKernel3 { weights, geom })
    }
}

fn check_kernel<T: Scalar>(w: &Tensor<T>) -> Result<[usize; 5]> {
    match *w.shape() {
        [co, ci, kt, kh, kw] if kt % 2 == 1 && kh % 2 == 1 && kw % 2 == 1 => {
            Ok([co, ci, kt, kh, kw])
        }
        _ => Err(Error::shape(
            "conv kernel (odd k_t, k_h, k_w)",
            w.shape(),
            &[0; 5],
        )),
    }
}

struct ConvPlan {
    x: [usize; 4],
    k: [usize; 5],
    out: [usize; 4],
}

impl ConvPlan {
    fn rows(&self) -> usize {
        self.k[1] * self.k[2] * self.k[3] * self.k[4]
    }

    fn out_plane(&self) -> usize {
        self.out[2] * self.out[3]
    }
}

fn plan<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Result<ConvPlan> {
    let xd = x.dims4()?;
    let kd = check_kernel(w)?;
    if xd[0] != kd[1] {
        return Err(Error::shape(
            "conv3d (input channels vs kernel C_in)",
            x.shape(),
            w.shape(),
        ));
    }
    let [to, ho, wo] = geom
        .output_dims([xd[1], xd[2], xd[3]], [kd[2], kd[3], kd[4]])
        .ok_or_else(|| {
            Error::shape(
                "conv3d (kernel larger than padded input)",
                x.shape(),
                w.shape(),
            )
        })?;
    Ok(ConvPlan {
        x: xd,
        k: kd,
        out: [kd[0], to, ho, wo],
    })
}

/// Unfold the receptive fields of output frame `to` into `cols`, laid out
/// as `rows() x (H_out * W_out)`.
fn im2col_frame<T: Scalar>(x: &[T], p: &ConvPlan, geom: &ConvGeom, to: usize, cols: &mut [T]) {
    let [c, t, h, w] = p.x;
    let [_, _, kt, kh, kw] = p.k;
    let [_, _, ho, wo] = p.out;
    let [pt, ph, pw] = geom.pad;
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        for dt in 0..kt {
            let src_t = geom
                .temporal
                .resolve((to * geom.stride_t + dt) as isize - pt as isize, t);
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    row += 1;
                    let Some(ti) = src_t else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let base = (ci * t + ti) * h * w;
                    let lo = pw.saturating_sub(dw).min(wo);
                    let hi = (w + pw).saturating_sub(dw).min(wo).max(lo);
                    for oh in 0..ho {
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        let ih = (oh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo < hi {
                            let src = base + ih as usize * w + lo + dw - pw;
                            drow[lo..hi].copy_from_slice(&x[src..src + hi - lo]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_frame`]: scatter-add `cols` back into `gx`.
fn col2im_frame<T: Scalar>(cols: &[T], p: &ConvPlan, geom: &ConvGeom, to: usize, gx: &mut [T]) {
    let [c, t, h, w] = p.x;
    let [_, _, kt, kh, kw] = p.k;
    let [_, _, ho, wo] = p.out;
    let [pt, ph, pw] = geom.pad;
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        for dt in 0..kt {
            let src_t = geom
                .temporal
                .resolve((to * geom.stride_t + dt) as isize - pt as isize, t);
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    row += 1;
                    let Some(ti) = src_t else { continue };
                    let base = (ci * t + ti) * h * w;
                    let lo = pw.saturating_sub(dw).min(wo);
                    let hi = (w + pw).saturating_sub(dw).min(wo).max(lo);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = (oh + dh) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = base + ih as usize * w + lo + dw - pw;
                        for (g, &v) in gx[dst..dst + hi - lo]
                            .iter_mut()
                            .zip(&src[oh * wo + lo..oh * wo + hi])
                        {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// Bias-free 3-D convolution of a `(C, T, H, W)` map.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, k: &ConvKernel3<T>) -> Result<Tensor<T>> {
    conv3d_raw(x, &k.weights, &k.geom)
}

pub(crate) fn conv3d_raw<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    let p = plan(x, w, geom)?;
    let [co, to, _, _] = p.out;
    let plane = p.out_plane();
    let rows = p.rows();
    let mut out = Tensor::zeros(&p.out);
    let mut cols = vec![T::zero(); rows * plane];
    for t in 0..to {
        im2col_frame(x.data(), &p, geom, t, &mut cols);
        T::gemm(
            co,
            rows,
            plane,
            T::one(),
            w.data(),
            (rows, 1),
            &cols,
            (plane, 1),
            T::zero(),
            &mut out.data_mut()[t * plane..],
            (to * plane, 1),
        );
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input (when requested)
/// and its weights, given the gradient of the output.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    gout: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let p = plan(x, w, geom)?;
    if gout.shape() != p.out {
        return Err(Error::shape("conv3d backward", gout.shape(), &p.out));
    }
    let [co, to, _, _] = p.out;
    let plane = p.out_plane();
    let rows = p.rows();
    let mut gw = Tensor::zeros(w.shape());
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); rows * plane];
    for t in 0..to {
        let g = &gout.data()[t * plane..];
        im2col_frame(x.data(), &p, geom, t, &mut cols);
        // gw (co x rows) += g (co x plane) * cols^T (plane x rows)
        T::gemm(
            co,
            plane,
            rows,
            T::one(),
            g,
            (to * plane, 1),
            &cols,
            (1, plane),
            T::one(),
            gw.data_mut(),
            (rows, 1),
        );
        if let Some(gx) = gx.as_mut() {
            // gcols (rows x plane) = w^T (rows x co) * g (co x plane)
            T::gemm(
                rows,
                co,
                plane,
                T::one(),
                w.data(),
                (1, rows),
                g,
                (to * plane, 1),
                T::zero(),
                &mut cols,
                (plane, 1),
            );
            col2im_frame(&cols, &p, geom, t, gx.data_mut());
        }
    }
    Ok((gx, gw))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub(crate) fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    gout: &Tensor<T>,
    slope: T,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Temporal mean, `(C, T, H, W) -> (C, 1, H, W)`.
///
/// Accumulated relative to the first frame, so a temporally constant input
/// yields that frame exactly.
pub fn mean_over_time<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, t, h, w] = x.dims4()?;
    if t == 0 {
        return Err(Error::EmptySequence("mean_over_time on T = 0".into()));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(t).unwrap();
    let mut out = Tensor::zeros(&[c, 1, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    let mut acc = vec![T::zero(); hw];
    for ci in 0..c {
        let first = &xd[ci * t * hw..ci * t * hw + hw];
        acc.fill(T::zero());
        for ti in 1..t {
            let f = &xd[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
            for ((a, &v), &f0) in acc.iter_mut().zip(f).zip(first) {
                *a += v - f0;
            }
        }
        for ((o, &a), &f0) in od[ci * hw..(ci + 1) * hw].iter_mut().zip(&acc).zip(first) {
            *o = f0 + a * inv;
        }
    }
    Ok(out)
}

/// `out[:, t] = x[:, t] - m[:, 0]` for every frame.
pub fn subtract_broadcast<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, t, h, w] = x.dims4()?;
    if m.shape() != [c, 1, h, w] {
        return Err(Error::shape("subtract_broadcast", x.shape(), m.shape()));
    }
    let hw = h * w;
    let mut out = x.clone();
    for ci in 0..c {
        let mf = &m.data()[ci * hw..(ci + 1) * hw];
        for ti in 0..t {
            let off = (ci * t + ti) * hw;
            for (o, &mv) in out.data_mut()[off..off + hw].iter_mut().zip(mf) {
                *o -= mv;
            }
        }
    }
    Ok(out)
}

/// Elementwise maximum over frames; also returns the winning frame per cell
/// (first occurrence on ties).
pub fn max_over_time<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [c, t, h, w] = x.dims4()?;
    if t == 0 {
        return Err(Error::EmptySequence("max_over_time on T = 0".into()));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, 1, h, w]);
    let mut arg = vec![0u32; c * hw];
    let xd = x.data();
    for ci in 0..c {
        let o = &mut out.data_mut()[ci * hw..(ci + 1) * hw];
        o.copy_from_slice(&xd[ci * t * hw..ci * t * hw + hw]);
        let a = &mut arg[ci * hw..(ci + 1) * hw];
        for ti in 1..t {
            let f = &xd[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
            for ((ov, av), &v) in o.iter_mut().zip(a.iter_mut()).zip(f) {
                if v > *ov {
                    *ov = v;
                    *av = ti as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Non-overlapping spatial max pooling; trailing rows/columns that do not
/// fill a window are dropped. Returns the flat input index of each winner
/// (first occurrence on ties).
pub fn maxpool_spatial<T: Scalar>(
    x: &Tensor<T>,
    window: (usize, usize),
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [c, t, h, w] = x.dims4()?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || h < wh || w < ww {
        return Err(Error::shape(
            "maxpool_spatial (window larger than map)",
            x.shape(),
            &[wh, ww],
        ));
    }
    let (oh, ow) = (h / wh, w / ww);
    let mut out = Tensor::zeros(&[c, t, oh, ow]);
    let mut arg = vec![0u32; c * t * oh * ow];
    let xd = x.data();
    for ct in 0..c * t {
        let base = ct * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * wh * w + j * ww;
                for di in 0..wh {
                    for dj in 0..ww {
                        let idx = base + (i * wh + di) * w + j * ww + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (ct * oh + i) * ow + j;
                out.data_mut()[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

/// Strip pooling for a single-frame map `(C, 1, H, W)`: split into `strips`
/// horizontal bands and reduce each band to `max + mean` per channel.
/// Output is `(strips, C)`; the second value holds each max's flat index.
pub fn strip_pool<T: Scalar>(x: &Tensor<T>, strips: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let [c, t, h, w] = x.dims4()?;
    if t != 1 {
        return Err(Error::shape(
            "strip_pool (expects T = 1)",
            x.shape(),
            &[c, 1, h, w],
        ));
    }
    if strips == 0 || h % strips != 0 {
        return Err(Error::shape(
            "strip_pool (strips must divide H)",
            x.shape(),
            &[strips],
        ));
    }
    let band = (h / strips) * w;
    let inv = T::one() / T::from_usize(band).unwrap();
    let mut out = Tensor::zeros(&[strips, c]);
    let mut arg = vec![0u32; strips * c];
    let xd = x.data();
    for ci in 0..c {
        for s in 0..strips {
            let off = ci * h * w + s * band;
            let cells = &xd[off..off + band];
            let mut best = 0;
            let mut sum = T::zero();
            for (i, &v) in cells.iter().enumerate() {
                sum += v;
                if v > cells[best] {
                    best = i;
                }
            }
            out.data_mut()[s * c + ci] = cells[best] + sum * inv;
            arg[s * c + ci] = (off + best) as u32;
        }
    }
    Ok((out, arg))
}

/// Matrix-vector product `W x` with `W` shaped `(d_out, d_in)`; no bias.
pub fn strip_linear<T: Scalar>(x: &[T], w: &Tensor<T>) -> Result<Vec<T>> {
    match *w.shape() {
        [d_out, d_in] if d_in == x.len() => {
            let mut y = vec![T::zero(); d_out];
            T::gemm(
                d_out,
                d_in,
                1,
                T::one(),
                w.data(),
                (d_in, 1),
                x,
                (1, 1),
                T::zero(),
                &mut y,
                (1, 1),
            );
            Ok(y)
        }
        _ => Err(Error::shape("strip_linear", &[x.len()], w.shape())),
    }
}

/// Per-strip linear maps: `pooled (S, C)` through `w (S, d, C)` gives `(S, d)`.
pub(crate) fn strip_linear_batch<T: Scalar>(
    pooled: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (s, c, d) = match (pooled.shape(), w.shape()) {
        (&[s, c], &[s2, d, c2]) if s == s2 && c == c2 => (s, c, d),
        _ => {
            return Err(Error::shape(
                "horizontal mapping",
                pooled.shape(),
                w.shape(),
            ))
        }
    };
    let mut out = Tensor::zeros(&[s, d]);
    for si in 0..s {
        T::gemm(
            d,
            c,
            1,
            T::one(),
            &w.data()[si * d * c..],
            (c, 1),
            &pooled.data()[si * c..],
            (1, 1),
            T::zero(),
            &mut out.data_mut()[si * d..],
            (1, 1),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Seven nested loops, zero padding, written independently of im2col.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, st: usize, pad: [usize; 3]) -> Tensor<f64> {
        let [c, t, h, wd] = x.dims4().unwrap();
        let [co, ci, kt, kh, kw] = <[usize; 5]>::try_from(w.shape()).unwrap();
        assert_eq!(c, ci);
        let to = (t + 2 * pad[0] - kt) / st + 1;
        let ho = h + 2 * pad[1] - kh + 1;
        let wo = wd + 2 * pad[2] - kw + 1;
        let mut out = Tensor::zeros(&[co, to, ho, wo]);
        for o in 0..co {
            for a in 0..to {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for q in 0..c {
                            for u in 0..kt {
                                for v in 0..kh {
                                    for z in 0..kw {
                                        let ti = (a * st + u) as isize - pad[0] as isize;
                                        let hi = (i + v) as isize - pad[1] as isize;
                                        let wi = (j + z) as isize - pad[2] as isize;
                                        if ti < 0
                                            || hi < 0
                                            || wi < 0
                                            || ti >= t as isize
                                            || hi >= h as isize
                                            || wi >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((q * t + ti as usize) * h + hi as usize) * wd
                                            + wi as usize;
                                        let wi_ = (((o * c + q) * kt + u) * kh + v) * kw + z;
                                        s += x.data()[xi] * w.data()[wi_];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((o * to + a) * ho + i) * wo + j] = s;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn zeros_geom(st: usize, pad: [usize; 3]) -> ConvGeom {
        ConvGeom::new(st, pad, TemporalPadding::Zeros)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(&[1, 4, 5, 3], 1);
        let k =
            ConvKernel3::new(Tensor::full(&[1, 1, 1, 1, 1], 1.0), zeros_geom(1, [0; 3])).unwrap();
        assert_eq!(conv3d(&x, &k).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_27() {
        let x = Tensor::full(&[1, 3, 3, 3], 1.0f64);
        let k =
            ConvKernel3::new(Tensor::full(&[1, 1, 3, 3, 3], 1.0), zeros_geom(1, [0; 3])).unwrap();
        let y = conv3d(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 27.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = random(&[2, 4, 6, 5], 2);
        let w = random(&[3, 2, 3, 3, 3], 3);
        let y = conv3d_raw(&x, &w, &zeros_geom(1, [1, 1, 1])).unwrap();
        assert!(max_abs_diff(&y, &conv_oracle(&x, &w, 1, [1, 1, 1])) < 1e-12);
    }

    #[test]
    fn strided_temporal_conv_matches_oracle() {
        let x = random(&[3, 30, 4, 3], 4);
        let w = random(&[2, 3, 3, 1, 1], 5);
        let y = conv3d_raw(&x, &w, &zeros_geom(3, [0, 0, 0])).unwrap();
        assert_eq!(y.shape(), &[2, 10, 4, 3]);
        assert!(max_abs_diff(&y, &conv_oracle(&x, &w, 3, [0, 0, 0])) < 1e-12);
    }

    #[test]
    fn circular_padding_matches_wrapped_oracle() {
        // Circular padding equals zero-padded convolution of the input with
        // one extra frame glued on each end.
        let x = random(&[2, 5, 4, 4], 6);
        let w = random(&[2, 2, 3, 3, 3], 7);
        let [c, t, h, wd] = x.dims4().unwrap();
        let mut ext = Tensor::zeros(&[c, t + 2, h, wd]);
        for ci in 0..c {
            for te in 0..t + 2 {
                let src = (te + t - 1) % t;
                for p in 0..h * wd {
                    ext.data_mut()[(ci * (t + 2) + te) * h * wd + p] =
                        x.data()[(ci * t + src) * h * wd + p];
                }
            }
        }
        let want = conv_oracle(&ext, &w, 1, [0, 1, 1]);
        let got = conv3d_raw(
            &x,
            &w,
            &ConvGeom::new(1, [1, 1, 1], TemporalPadding::Circular),
        )
        .unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(&[2, 3, 3, 3], 8);
        let w = random(&[1, 3, 1, 1, 1], 9);
        let err = conv3d_raw(&x, &w, &zeros_geom(1, [0; 3])).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[2, 3, 3, 3]") && msg.contains("[1, 3, 1, 1, 1]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> and the weight gradient is the
        // same bilinear form differentiated in w.
        for temporal in [
            TemporalPadding::Zeros,
            TemporalPadding::Replicate,
            TemporalPadding::Circular,
        ] {
            let geom = ConvGeom::new(1, [1, 1, 1], temporal);
            let x = random(&[2, 4, 5, 4], 10);
            let w = random(&[3, 2, 3, 3, 3], 11);
            let y = conv3d_raw(&x, &w, &geom).unwrap();
            let g = random(y.shape(), 12);
            let (gx, gw) = conv3d_backward(&x, &w, &geom, &g, true).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x
                .data()
                .iter()
                .zip(gx.unwrap().data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{temporal:?}");
            assert!((lhs - rhs_w).abs() < 1e-10, "{temporal:?}");
        }
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::from_vec(&[2], vec![2.0, -2.0f64]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[2.0, -0.02]);
        let g = leaky_relu_backward(&Tensor::scalar(-1.0f64), &Tensor::scalar(1.0), 0.01);
        assert_eq!(g.data()[0], 0.01);
        let pos = random(&[1, 2, 3, 3], 13).map(f64::abs);
        assert_eq!(leaky_relu(&pos, 0.01), pos);
    }

    #[test]
    fn mean_over_time_cases() {
        let x = random(&[2, 1, 3, 3], 14);
        assert_eq!(mean_over_time(&x).unwrap(), x);

        let mut two = Tensor::zeros(&[1, 2, 2, 2]);
        two.data_mut()[4..].fill(2.0f64);
        assert!(mean_over_time(&two)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));

        let x = random(&[3, 7, 4, 4], 15);
        let m = mean_over_time(&x).unwrap();
        for c in 0..3 {
            for p in 0..16 {
                let s: f64 = (0..7).map(|t| x.data()[(c * 7 + t) * 16 + p]).sum();
                assert!((m.data()[c * 16 + p] - s / 7.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            mean_over_time(&Tensor::<f64>::zeros(&[1, 0, 2, 2])),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn subtract_broadcast_cases() {
        let frame = random(&[2, 1, 3, 3], 16);
        let mut constant = Tensor::zeros(&[2, 5, 3, 3]);
        for c in 0..2 {
            for t in 0..5 {
                constant.data_mut()[(c * 5 + t) * 9..(c * 5 + t + 1) * 9]
                    .copy_from_slice(&frame.data()[c * 9..(c + 1) * 9]);
            }
        }
        let d = subtract_broadcast(&constant, &mean_over_time(&constant).unwrap()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));

        let x = random(&[2, 5, 3, 3], 17);
        assert_eq!(
            subtract_broadcast(&x, &Tensor::zeros(&[2, 1, 3, 3])).unwrap(),
            x
        );
        assert!(subtract_broadcast(&x, &Tensor::zeros(&[2, 1, 3, 2])).is_err());

        let xf: Tensor<f32> = x.cast();
        let df = subtract_broadcast(&xf, &mean_over_time(&xf).unwrap()).unwrap();
        let norm = xf.norm();
        for c in 0..2 {
            for p in 0..9 {
                let s: f32 = (0..5).map(|t| df.data()[(c * 5 + t) * 9 + p]).sum();
                assert!(s.abs() <= 1e-6 * norm);
            }
        }
    }

    #[test]
    fn max_over_time_cases() {
        let x = random(&[2, 1, 2, 2], 18);
        assert_eq!(max_over_time(&x).unwrap().0, x);
        let mut f = Tensor::zeros(&[1, 3, 2, 2]);
        for (t, v) in [1.0, 3.0, 2.0f64].iter().enumerate() {
            f.data_mut()[t * 4..(t + 1) * 4].fill(*v);
        }
        assert!(max_over_time(&f)
            .unwrap()
            .0
            .data()
            .iter()
            .all(|&v| v == 3.0));
        assert!(max_over_time(&Tensor::<f64>::zeros(&[1, 0, 1, 1])).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let x = random(&[2, 3, 4, 6], 19);
        assert_eq!(maxpool_spatial(&x, (1, 1)).unwrap().0, x);
        let b = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0f64]).unwrap();
        assert_eq!(maxpool_spatial(&b, (2, 2)).unwrap().0.data(), &[4.0]);
        assert!(maxpool_spatial(&x, (5, 2)).is_err());
        // odd sizes drop the trailing row
        let (y, _) = maxpool_spatial(&x, (3, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 3]);

        let (y, _) = maxpool_spatial(&x, (2, 3)).unwrap();
        for ct in 0..6 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..3 {
                            m = m.max(x.data()[ct * 24 + (2 * i + di) * 6 + 3 * j + dj]);
                        }
                    }
                    assert_eq!(y.data()[ct * 4 + i * 2 + j], m);
                }
            }
        }
    }

    #[test]
    fn strip_linear_cases() {
        let x = [0.5, -1.0, 2.0f64];
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(strip_linear(&x, &eye).unwrap(), x.to_vec());
        assert_eq!(
            strip_linear(&x, &Tensor::zeros(&[2, 3])).unwrap(),
            vec![0.0; 2]
        );
        assert!(strip_linear(&x, &Tensor::zeros(&[2, 4])).is_err());

        let w = random(&[4, 3], 20);
        let y = strip_linear(&x, &w).unwrap();
        for (i, yi) in y.iter().enumerate() {
            let want: f64 = (0..3).map(|j| w.data()[i * 3 + j] * x[j]).sum();
            assert!((yi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn strip_pool_of_constant_is_twice_value() {
        let x = Tensor::full(&[3, 1, 8, 4], 1.5f64);
        let (p, _) = strip_pool(&x, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 3.0));
        assert!(strip_pool(&x, 3).is_err());
    }

    #[test]
    fn conv_is_deterministic() {
        let x = random(&[2, 4, 6, 5], 21);
        let w = random(&[3, 2, 3, 3, 3], 22);
        let g = ConvGeom::new(1, [1, 1, 1], TemporalPadding::Circular);
        let a = conv3d_raw(&x, &w, &g).unwrap();
        let b = conv3d_raw(&x, &w, &g).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
