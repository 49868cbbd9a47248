//! Pointwise ops and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// `max(x, slope * x)` elementwise; slope 1 is the identity, slope 0 is ReLU.
pub fn leaky_relu_forward<T: Elem>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v >= T::zero() { v } else { v * slope })
}

/// Routes `grad_out` by the sign of the saved *input*; the subgradient at
/// exactly zero is `slope`.
pub fn leaky_relu_backward<T: Elem>(input: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x < T::zero() {
            *gv = *gv * slope;
        }
    }
    g
}

/// Concatenates along the channel axis. All inputs must agree on batch and
/// spatial extents. A single input is passed through unchanged.
pub fn concat_channels_forward<T: Elem>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let (b0, _, h0, w0) = inputs[0].dims4()?;
    let mut c_total = 0;
    for t in inputs {
        let (b, c, h, w) = t.dims4()?;
        if (b, h, w) != (b0, h0, w0) {
            return Err(Error::shape(
                "concat_channels",
                format!("extents {:?} do not match first input {:?}", t.shape(), inputs[0].shape()),
            ));
        }
        c_total += c;
    }
    let mut out = Tensor::zeros(&[b0, c_total, h0, w0]);
    let plane = h0 * w0;
    let out_data = out.data_mut();
    for b in 0..b0 {
        let mut c_off = 0;
        for t in inputs {
            let c = t.shape()[1];
            let src = &t.data()[b * c * plane..(b + 1) * c * plane];
            let dst_start = (b * c_total + c_off) * plane;
            out_data[dst_start..dst_start + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Ok(out)
}

/// Splits `grad_out` back into per-input gradients given the input channel
/// counts used in the forward pass.
pub fn concat_channels_backward<T: Elem>(
    channels: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let (b0, c_total, h, w) = grad_out.dims4()?;
    let sum: usize = channels.iter().sum();
    if sum != c_total {
        return Err(Error::shape(
            "concat_channels_backward",
            format!("grad has {c_total} channels, inputs sum to {sum}"),
        ));
    }
    let plane = h * w;
    let go = grad_out.data();
    let mut grads = Vec::with_capacity(channels.len());
    let mut c_off = 0;
    for &c in channels {
        let mut g = Tensor::zeros(&[b0, c, h, w]);
        let gd = g.data_mut();
        for b in 0..b0 {
            let src_start = (b * c_total + c_off) * plane;
            gd[b * c * plane..(b + 1) * c * plane]
                .copy_from_slice(&go[src_start..src_start + c * plane]);
        }
        grads.push(g);
        c_off += c;
    }
    Ok(grads)
}

/// `k * x`. Backward is scaling the incoming gradient by the same `k`.
pub fn scale_forward<T: Elem>(input: &Tensor<T>, k: T) -> Tensor<T> {
    input.map(|v| v * k)
}

pub fn add_forward<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    Ok(out)
}

pub fn sub_forward<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "sub",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o - v;
    }
    Ok(out)
}
