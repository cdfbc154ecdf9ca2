//! Raw compute kernels over [`Tensor`]s. No autograd bookkeeping here; the
//! differentiable wrappers live in [`crate::var`].
//!
//! Batched kernels process one sample per work item through [`crate::par`],
//! so results are bit-identical with and without the `parallel` feature and
//! do not depend on a sample's position within the batch.

use crate::error::{Result, TensorError};
use crate::{par, Float, Tensor};

/// Stride/padding of a 2-d convolution (zero padding, square kernels allowed
/// to be rectangular).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    let hw = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    let hw = g.cols();
    x.fill(T::zero());
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(in_chw: (usize, usize, usize), w_shape: &[usize], spec: ConvSpec, op: &'static str) -> Result<(usize, ConvGeom)> {
    let [o, c, kh, kw] = w_shape[..] else {
        return Err(TensorError::Rank {
            op,
            expected: 4,
            got: w_shape.to_vec(),
        });
    };
    let (ci, h, w) = in_chw;
    if c != ci {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![o, ci, kh, kw],
            got: w_shape.to_vec(),
        });
    }
    if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw || spec.stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {kh}x{kw} does not fit input {h}x{w} with pad {}", spec.pad),
        });
    }
    let ho = spec.out_size(h, kh);
    let wo = spec.out_size(w, kw);
    Ok((
        o,
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            spec,
        },
    ))
}

/// Cross-correlation of `x [B,C,H,W]` with `w [O,C,kh,kw]`.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, g) = conv_geom((c, h, wd), w.shape(), spec, "conv2d")?;
    let (rows, hw) = (g.rows(), g.cols());
    let in_len = c * h * wd;
    let mut out = vec![T::zero(); b * o * hw];
    let xd = x.data();
    let wdata = w.data();
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    par::for_each_chunk_mut(&mut out, o * hw, |bi, dst| {
        let xb = &xd[bi * in_len..(bi + 1) * in_len];
        if pointwise {
            T::gemm(o, rows, hw, T::one(), wdata, false, xb, false, T::zero(), dst);
        } else {
            let mut cols = vec![T::zero(); rows * hw];
            im2col(&g, xb, &mut cols);
            T::gemm(o, rows, hw, T::one(), wdata, false, &cols, false, T::zero(), dst);
        }
    });
    Ok(Tensor::new_unchecked(out, &[b, o, g.ho, g.wo]))
}

/// Gradient of [`conv2d`] with respect to its input (a transposed
/// convolution of `gy` with `w`).
pub fn conv2d_input_grad<T: Float>(gy: &Tensor<T>, w: &Tensor<T>, in_hw: (usize, usize), spec: ConvSpec) -> Result<Tensor<T>> {
    let (b, o, ho, wo) = gy.dims4()?;
    let c = w.shape()[1];
    let (o2, g) = conv_geom((c, in_hw.0, in_hw.1), w.shape(), spec, "conv2d_input_grad")?;
    if o2 != o || g.ho != ho || g.wo != wo {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_input_grad",
            expected: vec![b, o2, g.ho, g.wo],
            got: gy.shape().to_vec(),
        });
    }
    let (rows, hw) = (g.rows(), g.cols());
    let in_len = c * in_hw.0 * in_hw.1;
    let mut out = vec![T::zero(); b * in_len];
    let gyd = gy.data();
    let wdata = w.data();
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    par::for_each_chunk_mut(&mut out, in_len, |bi, dst| {
        let gyb = &gyd[bi * o * hw..(bi + 1) * o * hw];
        if pointwise {
            T::gemm(rows, o, hw, T::one(), wdata, true, gyb, false, T::zero(), dst);
        } else {
            let mut cols = vec![T::zero(); rows * hw];
            T::gemm(rows, o, hw, T::one(), wdata, true, gyb, false, T::zero(), &mut cols);
            col2im(&g, &cols, dst);
        }
    });
    Ok(Tensor::new_unchecked(out, &[b, c, in_hw.0, in_hw.1]))
}

/// Gradient of [`conv2d`] with respect to its weight, summed over the batch
/// in sample order.
pub fn conv2d_weight_grad<T: Float>(x: &Tensor<T>, gy: &Tensor<T>, k_hw: (usize, usize), spec: ConvSpec) -> Result<Tensor<T>> {
    let (b, c, h, wd) = x.dims4()?;
    let (b2, o, ho, wo) = gy.dims4()?;
    let w_shape = [o, c, k_hw.0, k_hw.1];
    let (_, g) = conv_geom((c, h, wd), &w_shape, spec, "conv2d_weight_grad")?;
    if b2 != b || g.ho != ho || g.wo != wo {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_weight_grad",
            expected: vec![b, o, g.ho, g.wo],
            got: gy.shape().to_vec(),
        });
    }
    let (rows, hw) = (g.rows(), g.cols());
    let in_len = c * h * wd;
    let xd = x.data();
    let gyd = gy.data();
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    let partials = par::map_indexed(b, |bi| {
        let xb = &xd[bi * in_len..(bi + 1) * in_len];
        let gyb = &gyd[bi * o * hw..(bi + 1) * o * hw];
        let mut part = vec![T::zero(); o * rows];
        if pointwise {
            T::gemm(o, hw, rows, T::one(), gyb, false, xb, true, T::zero(), &mut part);
        } else {
            let mut cols = vec![T::zero(); rows * hw];
            im2col(&g, xb, &mut cols);
            T::gemm(o, hw, rows, T::one(), gyb, false, &cols, true, T::zero(), &mut part);
        }
        part
    });
    Ok(Tensor::new_unchecked(sum_in_order(partials, o * rows), &w_shape))
}

fn sum_in_order<T: Float>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// 2x2 average pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "avg_pool2",
            msg: format!("odd spatial size {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for (plane, dst) in out.chunks_mut(ho * wo).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Ok(Tensor::new_unchecked(out, &[b, c, ho, wo]))
}

/// Nearest-neighbour 2x upsampling; each input value is copied into a 2x2
/// block scaled by `factor`. With `factor = 1/4` this is the adjoint of
/// [`avg_pool2`].
pub fn upsample2<T: Float>(x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h * 2, w * 2);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for (plane, dst) in out.chunks_mut(ho * wo).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2] * factor;
            }
        }
    }
    Ok(Tensor::new_unchecked(out, &[b, c, ho, wo]))
}

/// Split a tensor of rank >= 2 into `(B, C, S)` where `S` is the product of
/// the trailing dimensions.
pub fn bcs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Rank {
            op: "channel op",
            expected: 2,
            got: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `x + bias[c]` broadcast over batch and trailing dims.
pub fn add_channel<T: Float>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, s) = bcs(x.shape())?;
    if bias.numel() != c {
        return Err(TensorError::ShapeMismatch {
            op: "add_channel",
            expected: vec![c],
            got: bias.shape().to_vec(),
        });
    }
    let bd = bias.data();
    let out = x
        .data()
        .chunks(s)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let v = bd[i % c];
            chunk.iter().map(move |&e| e + v)
        })
        .collect();
    Ok(Tensor::new_unchecked(out, x.shape()))
}

/// Sum over batch and trailing dims, leaving `[C]`.
pub fn sum_channel<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, s) = bcs(x.shape())?;
    let mut out = vec![T::zero(); c];
    for (i, chunk) in x.data().chunks(s).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
    Ok(Tensor::new_unchecked(out, &[c]))
}

/// Broadcast `[C]` to `shape` (inverse direction of [`sum_channel`]).
pub fn broadcast_channel<T: Float>(v: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    add_channel(&Tensor::zeros(shape), v)
}

/// Sum over trailing dims, `[B,C,...] -> [B,C]`.
pub fn sum_spatial<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, s) = bcs(x.shape())?;
    let out = x.data().chunks(s).map(|ch| ch.iter().copied().sum()).collect();
    Ok(Tensor::new_unchecked(out, &[b, c]))
}

/// Broadcast `[B,C]` over the trailing dims of `shape`.
pub fn broadcast_spatial<T: Float>(v: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let (b, c, s) = bcs(shape)?;
    if v.shape() != [b, c] {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_spatial",
            expected: vec![b, c],
            got: v.shape().to_vec(),
        });
    }
    let out = v.data().iter().flat_map(|&e| std::iter::repeat_n(e, s)).collect();
    Ok(Tensor::new_unchecked(out, shape))
}

/// `x * scale[b,c] + shift[b,c]`, constant over the trailing dims.
pub fn affine_spatial<T: Float>(x: &Tensor<T>, scale: &Tensor<T>, shift: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, c, s) = bcs(x.shape())?;
    for t in std::iter::once(scale).chain(shift) {
        if t.shape() != [b, c] {
            return Err(TensorError::ShapeMismatch {
                op: "affine_spatial",
                expected: vec![b, c],
                got: t.shape().to_vec(),
            });
        }
    }
    let sc = scale.data();
    let out = x
        .data()
        .chunks(s)
        .enumerate()
        .flat_map(|(i, ch)| {
            let (a, m) = (sc[i], shift.map_or(T::zero(), |t| t.data()[i]));
            ch.iter().map(move |&e| e * a + m)
        })
        .collect();
    Ok(Tensor::new_unchecked(out, x.shape()))
}

/// Per-(sample, channel) normalisation over the trailing dims. Returns the
/// normalised tensor and `1/sqrt(var + eps)` per `(b, c)`.
pub fn instance_norm<T: Float>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, _, s) = bcs(x.shape())?;
    let n = T::from_usize(s).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / s.max(1));
    for (src, dst) in x.data().chunks(s).zip(out.chunks_mut(s)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((Tensor::new_unchecked(out, x.shape()), inv_std))
}

/// Backward of [`instance_norm`] given its output `y` and `inv_std`.
pub fn instance_norm_backward<T: Float>(gy: &Tensor<T>, y: &Tensor<T>, inv_std: &[T]) -> Result<Tensor<T>> {
    gy.expect_same_shape(y, "instance_norm_backward")?;
    let (_, _, s) = bcs(y.shape())?;
    let n = T::from_usize(s).unwrap();
    let mut out = vec![T::zero(); y.numel()];
    for (i, ((g, yy), dst)) in gy.data().chunks(s).zip(y.data().chunks(s)).zip(out.chunks_mut(s)).enumerate() {
        let mg = g.iter().copied().sum::<T>() / n;
        let mgy = g.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(yy) {
            *d = inv_std[i] * (gv - mg - yv * mgy);
        }
    }
    Ok(Tensor::new_unchecked(out, y.shape()))
}

/// Row-major `a [M,K] x b [K,N]` with optional transposes of the stored
/// operands.
pub fn matmul<T: Float>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            expected: vec![m, k],
            got: vec![k2, n],
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), trans_a, b.data(), trans_b, T::zero(), &mut out);
    Ok(Tensor::new_unchecked(out, &[m, n]))
}

/// Mean over groups of `k` consecutive leading-axis entries,
/// `[B*k, ...] -> [B, ...]`. Values are sorted before summation so the result
/// is exactly invariant to the order of entries within a group.
pub fn group_mean_sorted<T: Float>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let lead = *x.shape().first().ok_or(TensorError::Empty { op: "group_mean" })?;
    if k == 0 || lead % k != 0 {
        return Err(TensorError::Invalid {
            op: "group_mean",
            msg: format!("leading dim {lead} not divisible by group size {k}"),
        });
    }
    let b = lead / k;
    let inner = x.numel() / lead.max(1);
    let kf = T::from_usize(k).unwrap();
    let xd = x.data();
    let mut out = vec![T::zero(); b * inner];
    let mut buf = vec![T::zero(); k];
    for bi in 0..b {
        for j in 0..inner {
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = xd[(bi * k + t) * inner + j];
            }
            buf.sort_by(|p, q| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal));
            out[bi * inner + j] = buf.iter().copied().sum::<T>() / kf;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    Ok(Tensor::new_unchecked(out, &shape))
}

/// Repeat each leading-axis entry `k` times, scaled by `factor`.
pub fn group_repeat<T: Float>(x: &Tensor<T>, k: usize, factor: T) -> Tensor<T> {
    let lead = x.shape()[0];
    let inner = x.numel() / lead.max(1);
    let mut out = Vec::with_capacity(x.numel() * k);
    for row in x.data().chunks(inner.max(1)).take(lead) {
        for _ in 0..k {
            out.extend(row.iter().map(|&v| v * factor));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = lead * k;
    Tensor::new_unchecked(out, &shape)
}

/// Spatial mean of channel `classes[b]` for each sample:
/// `[B,S,h,w] -> [B]`.
pub fn select_channel_mean<T: Float>(x: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>> {
    let (b, c, s) = bcs(x.shape())?;
    check_classes(b, c, classes)?;
    let n = T::from_usize(s).unwrap();
    let xd = x.data();
    let out = classes
        .iter()
        .enumerate()
        .map(|(bi, &k)| {
            let o = (bi * c + k) * s;
            xd[o..o + s].iter().copied().sum::<T>() / n
        })
        .collect();
    Ok(Tensor::new_unchecked(out, &[b]))
}

/// Adjoint of [`select_channel_mean`]: spreads `g[b] / (h*w)` over channel
/// `classes[b]` and zeros elsewhere.
pub fn select_channel_mean_adjoint<T: Float>(g: &Tensor<T>, classes: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    let (b, c, s) = bcs(shape)?;
    check_classes(b, c, classes)?;
    let n = T::from_usize(s).unwrap();
    let mut out = vec![T::zero(); b * c * s];
    for (bi, &k) in classes.iter().enumerate() {
        let v = g.data()[bi] / n;
        let o = (bi * c + k) * s;
        out[o..o + s].fill(v);
    }
    Ok(Tensor::new_unchecked(out, shape))
}

fn check_classes(b: usize, c: usize, classes: &[usize]) -> Result<()> {
    if classes.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "select_channel",
            expected: vec![b],
            got: vec![classes.len()],
        });
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(TensorError::Index {
            op: "select_channel",
            index: bad,
            bound: c,
        });
    }
    Ok(())
}

/// Row-wise log-softmax of `[N, C]` logits.
pub fn log_softmax<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Ok(Tensor::new_unchecked(out, logits.shape()))
}

pub fn softmax<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax(logits)?.map(|v| v.exp()))
}
