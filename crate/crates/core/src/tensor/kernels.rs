//! Convolution, padding and pooling kernels on raw NCHW buffers.
//!
//! Convolutions go through im2col + GEMM. The `*_direct` functions are the
//! straightforward nested-loop definitions, kept as the reference the fast
//! path is tested against.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided convolution along one axis, `None` when the
/// kernel does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transposed_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    ((extent - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .filter(|&e| e > 0)
}

/// Geometry shared by im2col and col2im: an image of `channels x height x
/// width` scanned by a `kernel x kernel` window producing `out_h x out_w`
/// columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_extent(height, kernel, stride, pad)?,
            out_w: conv_out_extent(width, kernel, stride, pad)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(col_row, image_row_offset, out_y, ox_lo, ox_hi)` for every
    /// run of in-bounds taps; shared by im2col and col2im.
    #[inline]
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        // valid ox satisfy 0 <= ox*s + kj - p < width
                        let lo = ((p - kj as isize).max(0) + s - 1) / s;
                        let hi_num = self.width as isize - 1 + p - kj as isize;
                        if hi_num < 0 {
                            continue;
                        }
                        let hi = (hi_num / s).min(self.out_w as isize - 1);
                        if lo > hi {
                            continue;
                        }
                        f(row, img_row, oy, lo as usize, hi as usize);
                    }
                }
            }
        }
    }
}

/// Inner product with independent partial sums, so the loop vectorizes
/// instead of waiting on one serial accumulator.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Unfolds `image` (one batch item, `channels*height*width`) into `cols`
/// (`col_rows x col_cols`, row-major). Out-of-bounds taps are zero.
pub fn im2col<T: Real>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    cols.iter_mut().for_each(|v| *v = T::zero());
    let (s, k_off) = (g.stride, g.pad);
    g.for_each_span(|row, img_row, oy, lo, hi| {
        let kj = row % g.kernel;
        let base = row * g.col_cols() + oy * g.out_w;
        for ox in lo..=hi {
            let ix = ox * s + kj - k_off;
            cols[base + ox] = image[img_row + ix];
        }
    });
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `image`, accumulating.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (s, k_off) = (g.stride, g.pad);
    g.for_each_span(|row, img_row, oy, lo, hi| {
        let kj = row % g.kernel;
        let base = row * g.col_cols() + oy * g.out_w;
        for ox in lo..=hi {
            let ix = ox * s + kj - k_off;
            image[img_row + ix] += cols[base + ox];
        }
    });
}

fn check_conv_operands<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    transposed: bool,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input
        .dims4()
        .map_err(|_| Error::shape(op, format!("input must be rank 4, got {:?}", input.shape())))?;
    let (w0, w1, kh, kw) = weight.dims4().map_err(|_| {
        Error::shape(
            op,
            format!("weight must be rank 4, got {:?}", weight.shape()),
        )
    })?;
    if kh != kw {
        return Err(Error::shape(
            op,
            format!(
                "only square kernels are supported, weight {:?}",
                weight.shape()
            ),
        ));
    }
    // conv weight is (out, in, k, k); transposed weight is (in, out, k, k)
    let (in_c, out_c) = if transposed { (w0, w1) } else { (w1, w0) };
    if in_c != c {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} has {c} channels but weight {:?} expects {in_c}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::shape(
                op,
                format!("bias {:?} must have shape [{out_c}]", b.shape()),
            ));
        }
    }
    Ok((n, c, h, w, out_c, kh))
}

fn geometry_or_err(
    op: &'static str,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1"));
    }
    ConvGeometry::new(c, h, w, k, stride, pad).ok_or_else(|| {
        Error::shape(
            op,
            format!("kernel {k} with pad {pad} does not fit a {h}x{w} input"),
        )
    })
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(grad_out: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = grad_out.dims4().expect("rank-4 gradient");
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let start = (b * c + ch) * h * w;
            *acc += grad_out.data()[start..start + h * w]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    db
}

/// 2-D cross-correlation. `weight` is `(out_c, in_c, k, k)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w, out_c, k) = check_conv_operands("conv2d", input, weight, bias, false)?;
    let g = geometry_or_err("conv2d", c, h, w, k, stride, pad)?;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut out = vec![T::zero(); n * out_c * cols_n];
    for b in 0..n {
        im2col(
            &input.data()[b * g.image_len()..(b + 1) * g.image_len()],
            &g,
            &mut cols,
        );
        let dst = &mut out[b * out_c * cols_n..(b + 1) * out_c * cols_n];
        T::gemm(
            out_c,
            rows,
            cols_n,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &cols,
            (cols_n as isize, 1),
            T::zero(),
            dst,
            (cols_n as isize, 1),
        );
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), cols_n);
        }
    }
    Tensor::new(&[n, out_c, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and weight (each only
/// when requested) and its bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, w) = input.dims4().expect("validated in forward");
    let (out_c, _, k, _) = weight.dims4().expect("validated in forward");
    let g = ConvGeometry::new(c, h, w, k, stride, pad).expect("validated in forward");
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.numel()]);
    for b in 0..n {
        let gy = &grad_out.data()[b * out_c * cols_n..(b + 1) * out_c * cols_n];
        if let Some(dw) = dw.as_mut() {
            im2col(
                &input.data()[b * g.image_len()..(b + 1) * g.image_len()],
                &g,
                &mut cols,
            );
            T::gemm(
                out_c,
                cols_n,
                rows,
                T::one(),
                gy,
                (cols_n as isize, 1),
                &cols,
                (1, cols_n as isize),
                T::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                rows,
                out_c,
                cols_n,
                T::one(),
                weight.data(),
                (1, rows as isize),
                gy,
                (cols_n as isize, 1),
                T::zero(),
                &mut cols,
                (cols_n as isize, 1),
            );
            col2im_add(
                &cols,
                &g,
                &mut dx[b * g.image_len()..(b + 1) * g.image_len()],
            );
        }
    }
    (
        dx.map(|d| Tensor::from_vec(input.shape(), d)),
        dw.map(|d| Tensor::from_vec(weight.shape(), d)),
        Tensor::from_vec(&[out_c], bias_grad(grad_out)),
    )
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same weight.
/// `weight` is `(in_c, out_c, k, k)`.
pub fn conv2d_transposed<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_transposed";
    let (n, in_c, h, w, out_c, k) = check_conv_operands(OP, input, weight, bias, true)?;
    if stride == 0 {
        return Err(Error::shape(OP, "stride must be >= 1"));
    }
    let out_h = conv_transposed_out_extent(h, k, stride, pad);
    let out_w = conv_transposed_out_extent(w, k, stride, pad);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::shape(
            OP,
            format!("pad {pad} too large for kernel {k} on a {h}x{w} input"),
        ));
    };
    let g = geometry_or_err(OP, out_c, out_h, out_w, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut out = vec![T::zero(); n * g.image_len()];
    for b in 0..n {
        let x = &input.data()[b * in_c * cols_n..(b + 1) * in_c * cols_n];
        T::gemm(
            rows,
            in_c,
            cols_n,
            T::one(),
            weight.data(),
            (1, rows as isize),
            x,
            (cols_n as isize, 1),
            T::zero(),
            &mut cols,
            (cols_n as isize, 1),
        );
        let dst = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        col2im_add(&cols, &g, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), out_h * out_w);
        }
    }
    Tensor::new(&[n, out_c, out_h, out_w], out)
}

pub fn conv2d_transposed_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, in_c, _, _) = input.dims4().expect("validated in forward");
    let (_, out_c, oh, ow) = grad_out.dims4().expect("validated in forward");
    let k = weight.shape()[2];
    let g = ConvGeometry::new(out_c, oh, ow, k, stride, pad).expect("validated in forward");
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.numel()]);
    if dx.is_some() || dw.is_some() {
        for b in 0..n {
            let gy = &grad_out.data()[b * g.image_len()..(b + 1) * g.image_len()];
            im2col(gy, &g, &mut cols);
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    in_c,
                    rows,
                    cols_n,
                    T::one(),
                    weight.data(),
                    (rows as isize, 1),
                    &cols,
                    (cols_n as isize, 1),
                    T::zero(),
                    &mut dx[b * in_c * cols_n..(b + 1) * in_c * cols_n],
                    (cols_n as isize, 1),
                );
            }
            if let Some(dw) = dw.as_mut() {
                let x = &input.data()[b * in_c * cols_n..(b + 1) * in_c * cols_n];
                T::gemm(
                    in_c,
                    cols_n,
                    rows,
                    T::one(),
                    x,
                    (cols_n as isize, 1),
                    &cols,
                    (1, cols_n as isize),
                    T::one(),
                    dw,
                    (rows as isize, 1),
                );
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(input.shape(), d)),
        dw.map(|d| Tensor::from_vec(weight.shape(), d)),
        Tensor::from_vec(&[out_c], bias_grad(grad_out)),
    )
}

/// Nested-loop reference for [`conv2d`].
pub fn conv2d_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w, out_c, k) = check_conv_operands("conv2d", input, weight, bias, false)?;
    let g = geometry_or_err("conv2d", c, h, w, k, stride, pad)?;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![T::zero(); n * out_c * g.out_h * g.out_w];
    for b in 0..n {
        for o in 0..out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
                    for i in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + i) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + i) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((b * out_c + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, out_c, g.out_h, g.out_w], out)
}

/// Nested-loop reference for [`conv2d_transposed`]: every input pixel stamps
/// the kernel onto the output.
pub fn conv2d_transposed_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_transposed";
    let (n, in_c, h, w, out_c, k) = check_conv_operands(OP, input, weight, bias, true)?;
    let out_h = conv_transposed_out_extent(h, k, stride, pad)
        .ok_or_else(|| Error::shape(OP, "pad too large"))?;
    let out_w = conv_transposed_out_extent(w, k, stride, pad)
        .ok_or_else(|| Error::shape(OP, "pad too large"))?;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![T::zero(); n * out_c * out_h * out_w];
    for b in 0..n {
        for i in 0..in_c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[((b * in_c + i) * h + y) * w + xx];
                    for o in 0..out_c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (y * stride + ki) as isize - pad as isize;
                                let ox = (xx * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= out_h as isize || ox >= out_w as isize
                                {
                                    continue;
                                }
                                out[((b * out_c + o) * out_h + oy as usize) * out_w
                                    + ox as usize] += v * wt[((i * out_c + o) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let plane = out_h * out_w;
            let start = b * out_c * plane;
            add_bias(&mut out[start..start + out_c * plane], bias.data(), plane);
        }
    }
    Tensor::new(&[n, out_c, out_h, out_w], out)
}

/// Mirror index without repeating the edge sample, folding repeatedly for
/// pads wider than the extent; a single-sample axis replicates.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Reflection padding (edge pixel not repeated).
pub fn reflect_pad<T: Real>(input: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    let x = input.data();
    for plane in 0..n * c {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                out.push(x[(plane * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(&[n, c, ph, pw], out)
}

pub fn reflect_pad_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    pad: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let planes = input_shape[0] * input_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    let g = grad_out.data();
    for plane in 0..planes {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dx[(plane * h + sy) * w + sx] += g[(plane * ph + y) * pw + xx];
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// Non-overlapping `factor x factor` box average.
pub fn downsample_avg<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample_avg",
            format!("spatial extents {h}x{w} are not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::one() / T::from_usize_lossy(factor * factor);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                out[(plane * oh + y / factor) * ow + xx / factor] += x[(plane * h + y) * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn downsample_avg_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    factor: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::one() / T::from_usize_lossy(factor * factor);
    let g = grad_out.data();
    let planes = input_shape[0] * input_shape[1];
    let mut dx = Vec::with_capacity(planes * h * w);
    for plane in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                dx.push(g[(plane * oh + y / factor) * ow + xx / factor] * scale);
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}
