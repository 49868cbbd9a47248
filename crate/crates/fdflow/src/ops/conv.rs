//! Convolution and transposed convolution on CPU.
//!
//! Both directions are expressed as im2col/col2im plus one GEMM per batch
//! item, which is where virtually all of the model's time goes. The column
//! matrix has one row per (channel, ky, kx) tap and one column per output
//! pixel.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{gemm, gemm_at, gemm_bt, Elem, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 1,
            dilation: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output spatial extents: floor((n + 2p - d*(k-1) - 1) / s) + 1, both >= 1.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || self.dilation == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs positive kernel/stride/dilation, got {self:?}"
            )));
        }
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        if h + 2 * self.padding < span_h || w + 2 * self.padding < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than effective kernel {span_h}x{span_w}"),
            ));
        }
        let oh = (h + 2 * self.padding - span_h) / self.stride + 1;
        let ow = (w + 2 * self.padding - span_w) / self.stride + 1;
        Ok((oh, ow))
    }

    fn col_rows(&self) -> usize {
        let (kh, kw) = self.kernel;
        self.in_channels * kh * kw
    }
}

/// Gradients of a convolution; `input` is absent when the caller does not
/// need it (e.g. the first layer, whose input is data).
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Unrolls one CHW image into a (channels*kh*kw, out_h*out_w) column matrix.
fn im2col<T: Elem>(
    image: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
    col: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let cols = out_h * out_w;
    debug_assert_eq!(col.len(), channels * kh * kw * cols);
    debug_assert_eq!(image.len(), channels * h * w);
    let (stride, pad, dil) = (spec.stride, spec.padding, spec.dilation);

    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (c * kh + ky) * kw + kx;
                let row = &mut col[row_idx * cols..(row_idx + 1) * cols];
                let x_off = (kx * dil) as isize - pad as isize;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    let seg = &mut row[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + x_off; valid while 0 <= ix < w
                        let ox0 = (-x_off).max(0).min(out_w as isize) as usize;
                        let ox1 = (w as isize - x_off).clamp(0, out_w as isize) as usize;
                        seg[..ox0].fill(T::zero());
                        if ox1 > ox0 {
                            let s0 = (ox0 as isize + x_off) as usize;
                            seg[ox0..ox1].copy_from_slice(&src[s0..s0 + (ox1 - ox0)]);
                        }
                        seg[ox1.max(ox0)..].fill(T::zero());
                    } else {
                        for (ox, out) in seg.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + x_off;
                            *out = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of `im2col`: scatter-adds a column matrix back into a CHW image.
fn col2im<T: Elem>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
    image: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let cols = out_h * out_w;
    debug_assert_eq!(col.len(), channels * kh * kw * cols);
    debug_assert_eq!(image.len(), channels * h * w);
    let (stride, pad, dil) = (spec.stride, spec.padding, spec.dilation);

    for c in 0..channels {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (c * kh + ky) * kw + kx;
                let row = &col[row_idx * cols..(row_idx + 1) * cols];
                let x_off = (kx * dil) as isize - pad as isize;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &row[oy * out_w..(oy + 1) * out_w];
                    if stride == 1 {
                        let ox0 = (-x_off).max(0).min(out_w as isize) as usize;
                        let ox1 = (w as isize - x_off).clamp(0, out_w as isize) as usize;
                        if ox1 > ox0 {
                            let s0 = (ox0 as isize + x_off) as usize;
                            for (d, s) in dst[s0..s0 + (ox1 - ox0)].iter_mut().zip(&seg[ox0..ox1]) {
                                *d = *d + *s;
                            }
                        }
                    } else {
                        for (ox, s) in seg.iter().enumerate() {
                            let ix = (ox * stride) as isize + x_off;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let (kh, kw) = spec.kernel;
    if weight.shape() != [spec.out_channels, spec.in_channels, kh, kw] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight shape {:?} does not match (out={}, in={}, kh={kh}, kw={kw})",
                weight.shape(),
                spec.out_channels,
                spec.in_channels
            ),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels),
        ));
    }
    Ok((b, h, w))
}

pub fn conv2d_forward<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (batch, h, w) = check_conv_shapes(input, weight, bias, spec)?;
    let (oh, ow) = spec.out_size(h, w)?;
    let cols = oh * ow;
    let k = spec.col_rows();
    let m = spec.out_channels;

    let mut out = Tensor::zeros(&[batch, m, oh, ow]);
    let in_len = spec.in_channels * h * w;
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();

    parallel::par_chunks_mut(out.data_mut(), m * cols, |b, out_b| {
        let mut col = vec![T::zero(); k * cols];
        im2col(&in_data[b * in_len..(b + 1) * in_len], spec.in_channels, h, w, spec, oh, ow, &mut col);
        gemm(m, k, cols, T::one(), w_data, &col, T::zero(), out_b);
        for (oc, row) in out_b.chunks_exact_mut(cols).enumerate() {
            let bv = b_data[oc];
            for v in row.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    Ok(out)
}

pub fn conv2d_backward<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, _, h, w) = input.dims4()?;
    let (oh, ow) = spec.out_size(h, w)?;
    let (gb_, gc, gh, gw_) = grad_out.dims4()?;
    if (gb_, gc, gh, gw_) != (batch, spec.out_channels, oh, ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {:?}, expected [{batch}, {}, {oh}, {ow}]", grad_out.shape(), spec.out_channels),
        ));
    }
    let cols = oh * ow;
    let k = spec.col_rows();
    let m = spec.out_channels;
    let in_len = spec.in_channels * h * w;
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = grad_out.data();

    // Per-batch partials, reduced in batch order so results do not depend on
    // the thread count.
    struct Partial<T> {
        gw: Vec<T>,
        gx: Option<Vec<T>>,
    }
    let parts: Vec<Partial<T>> = parallel::par_map_indexed(batch, |b| {
        let mut col = vec![T::zero(); k * cols];
        im2col(&in_data[b * in_len..(b + 1) * in_len], spec.in_channels, h, w, spec, oh, ow, &mut col);
        let go_b = &go_data[b * m * cols..(b + 1) * m * cols];

        // gw = go_b (m x cols) @ col^T (cols x k)
        let mut gw = vec![T::zero(); m * k];
        gemm_bt(m, cols, k, T::one(), go_b, &col, T::zero(), &mut gw);

        let gx = if need_input_grad {
            // gx_col = W^T (k x m) @ go_b (m x cols)
            let mut gx_col = vec![T::zero(); k * cols];
            gemm_at(k, m, cols, T::one(), w_data, go_b, T::zero(), &mut gx_col);
            let mut gx = vec![T::zero(); in_len];
            col2im(&gx_col, spec.in_channels, h, w, spec, oh, ow, &mut gx);
            Some(gx)
        } else {
            None
        };
        Partial { gw, gx }
    });

    let mut gw_total = vec![T::zero(); m * k];
    let mut gx_total = need_input_grad.then(|| vec![T::zero(); batch * in_len]);
    for (b, p) in parts.into_iter().enumerate() {
        for (acc, v) in gw_total.iter_mut().zip(&p.gw) {
            *acc = *acc + *v;
        }
        if let (Some(gx_total), Some(gx)) = (gx_total.as_mut(), p.gx) {
            gx_total[b * in_len..(b + 1) * in_len].copy_from_slice(&gx);
        }
    }

    let mut gb = vec![T::zero(); m];
    for b in 0..batch {
        for oc in 0..m {
            let row = &go_data[(b * m + oc) * cols..(b * m + oc + 1) * cols];
            let mut s = T::zero();
            for v in row {
                s = s + *v;
            }
            gb[oc] = gb[oc] + s;
        }
    }

    Ok(ConvGrads {
        input: match gx_total {
            Some(gx) => Some(Tensor::new(input.shape().to_vec(), gx)?),
            None => None,
        },
        weight: Tensor::new(weight.shape().to_vec(), gw_total)?,
        bias: Tensor::new(vec![m], gb)?,
    })
}

pub fn conv_transpose2d_forward<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (batch, c_in, h, w) = input.dims4()?;
    let [wc_in, c_out, kh, kw] = weight_dims_t(weight)?;
    if wc_in != c_in {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
        ));
    }
    let oh = (h - 1) * stride + kh - 2 * padding;
    let ow = (w - 1) * stride + kw - 2 * padding;
    // The equivalent forward conv that maps (oh, ow) back to (h, w).
    let spec = ConvSpec {
        in_channels: c_out,
        out_channels: c_in,
        kernel: (kh, kw),
        stride,
        padding,
        dilation: 1,
    };
    let (ch, cw) = spec.out_size(oh, ow)?;
    debug_assert_eq!((ch, cw), (h, w));

    let m = c_out * kh * kw;
    let cols = h * w;
    let in_data = input.data();
    let w_data = weight.data(); // (c_in, c_out*kh*kw) row-major
    let b_data = bias.data();
    let out_len = c_out * oh * ow;

    let mut out = Tensor::zeros(&[batch, c_out, oh, ow]);
    parallel::par_chunks_mut(out.data_mut(), out_len, |b, out_b| {
        // col = W^T (m x c_in) @ x (c_in x cols)
        let x_b = &in_data[b * c_in * cols..(b + 1) * c_in * cols];
        let mut col = vec![T::zero(); m * cols];
        gemm_at(m, c_in, cols, T::one(), w_data, x_b, T::zero(), &mut col);
        col2im(&col, c_out, oh, ow, &spec, h, w, out_b);
        for (oc, plane) in out_b.chunks_exact_mut(oh * ow).enumerate() {
            let bv = b_data[oc];
            for v in plane.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, c_in, h, w) = input.dims4()?;
    let [_, c_out, kh, kw] = weight_dims_t(weight)?;
    let (gb_, gc, goh, gow) = grad_out.dims4()?;
    let oh = (h - 1) * stride + kh - 2 * padding;
    let ow = (w - 1) * stride + kw - 2 * padding;
    if (gb_, gc, goh, gow) != (batch, c_out, oh, ow) {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!("grad shape {:?}, expected [{batch}, {c_out}, {oh}, {ow}]", grad_out.shape()),
        ));
    }
    let spec = ConvSpec {
        in_channels: c_out,
        out_channels: c_in,
        kernel: (kh, kw),
        stride,
        padding,
        dilation: 1,
    };
    let m = c_out * kh * kw;
    let cols = h * w;
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = grad_out.data();
    let go_len = c_out * oh * ow;

    struct Partial<T> {
        gw: Vec<T>,
        gx: Option<Vec<T>>,
    }
    let parts: Vec<Partial<T>> = parallel::par_map_indexed(batch, |b| {
        let mut col = vec![T::zero(); m * cols];
        im2col(&go_data[b * go_len..(b + 1) * go_len], c_out, oh, ow, &spec, h, w, &mut col);
        let x_b = &in_data[b * c_in * cols..(b + 1) * c_in * cols];

        // gW (c_in x m) = x (c_in x cols) @ col^T (cols x m)
        let mut gw = vec![T::zero(); c_in * m];
        gemm_bt(c_in, cols, m, T::one(), x_b, &col, T::zero(), &mut gw);

        let gx = need_input_grad.then(|| {
            // gx (c_in x cols) = W (c_in x m) @ col (m x cols)
            let mut gx = vec![T::zero(); c_in * cols];
            gemm(c_in, m, cols, T::one(), w_data, &col, T::zero(), &mut gx);
            gx
        });
        Partial { gw, gx }
    });

    let mut gw_total = vec![T::zero(); c_in * m];
    let mut gx_total = need_input_grad.then(|| vec![T::zero(); batch * c_in * cols]);
    for (b, p) in parts.into_iter().enumerate() {
        for (acc, v) in gw_total.iter_mut().zip(&p.gw) {
            *acc = *acc + *v;
        }
        if let (Some(gx_total), Some(gx)) = (gx_total.as_mut(), p.gx) {
            gx_total[b * c_in * cols..(b + 1) * c_in * cols].copy_from_slice(&gx);
        }
    }

    let mut gb = vec![T::zero(); c_out];
    for b in 0..batch {
        for oc in 0..c_out {
            let plane = &go_data[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
            let mut s = T::zero();
            for v in plane {
                s = s + *v;
            }
            gb[oc] = gb[oc] + s;
        }
    }

    Ok(ConvGrads {
        input: match gx_total {
            Some(gx) => Some(Tensor::new(input.shape().to_vec(), gx)?),
            None => None,
        },
        weight: Tensor::new(weight.shape().to_vec(), gw_total)?,
        bias: Tensor::new(vec![c_out], gb)?,
    })
}

fn weight_dims_t<T: Elem>(weight: &Tensor<T>) -> Result<[usize; 4]> {
    match weight.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(Error::shape(
            "transposed_conv2d",
            format!("weight must be 4-D (in, out, kh, kw), got {other:?}"),
        )),
    }
}
