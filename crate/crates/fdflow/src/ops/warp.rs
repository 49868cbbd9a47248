//! Backward warping of a feature map by a flow field.
//!
//! `out(x, y) = input(x + u(x, y), y + v(x, y))` with bilinear interpolation.
//! Samples that fall outside the image read as zero. Taps with exactly zero
//! weight are skipped, so a zero flow reproduces the input bit for bit.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Elem, Tensor};

pub struct WarpGrads<T> {
    pub input: Tensor<T>,
    pub flow: Tensor<T>,
}

fn check_shapes<T: Elem>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    let (fb, fc, fh, fw) = flow.dims4()?;
    if (fb, fc, fh, fw) != (b, 2, h, w) {
        return Err(Error::shape(
            "warp",
            format!("flow shape {:?} does not match input {:?} (flow wants [{b}, 2, {h}, {w}])", flow.shape(), input.shape()),
        ));
    }
    Ok((b, c, h, w))
}

/// Four bilinear taps around (sx, sy): linear index into an h*w plane and the
/// tap's weight. Out-of-range taps get index `usize::MAX`.
#[inline]
fn taps<T: Elem>(sx: T, sy: T, h: usize, w: usize) -> [(usize, T); 4] {
    let fx = sx.floor();
    let fy = sy.floor();
    let tx = sx - fx;
    let ty = sy - fy;
    let x0 = fx.to_f64_() as isize;
    let y0 = fy.to_f64_() as isize;
    let one = T::one();
    let idx = |yy: isize, xx: isize| -> usize {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            yy as usize * w + xx as usize
        } else {
            usize::MAX
        }
    };
    [
        (idx(y0, x0), (one - tx) * (one - ty)),
        (idx(y0, x0 + 1), tx * (one - ty)),
        (idx(y0 + 1, x0), (one - tx) * ty),
        (idx(y0 + 1, x0 + 1), tx * ty),
    ]
}

pub fn warp_forward<T: Elem>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_shapes(input, flow)?;
    let hw = h * w;
    let in_data = input.data();
    let flow_data = flow.data();

    let mut out = Tensor::zeros(&[b, c, h, w]);
    parallel::par_chunks_mut(out.data_mut(), c * hw, |bi, out_b| {
        let in_b = &in_data[bi * c * hw..(bi + 1) * c * hw];
        let u = &flow_data[bi * 2 * hw..bi * 2 * hw + hw];
        let v = &flow_data[bi * 2 * hw + hw..(bi + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = T::from_f64(x as f64) + u[i];
                let sy = T::from_f64(y as f64) + v[i];
                let taps = taps(sx, sy, h, w);
                for ci in 0..c {
                    let plane = &in_b[ci * hw..(ci + 1) * hw];
                    let mut acc = T::zero();
                    for &(t, wgt) in &taps {
                        if t != usize::MAX && wgt != T::zero() {
                            acc = acc + wgt * plane[t];
                        }
                    }
                    out_b[ci * hw + i] = acc;
                }
            }
        }
    });
    Ok(out)
}

pub fn warp_backward<T: Elem>(
    input: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<WarpGrads<T>> {
    let (b, c, h, w) = check_shapes(input, flow)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "warp_backward",
            format!("grad shape {:?}, expected {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let hw = h * w;
    let in_data = input.data();
    let flow_data = flow.data();
    let go_data = grad_out.data();

    let parts: Vec<(Vec<T>, Vec<T>)> = parallel::par_map_indexed(b, |bi| {
        let in_b = &in_data[bi * c * hw..(bi + 1) * c * hw];
        let go_b = &go_data[bi * c * hw..(bi + 1) * c * hw];
        let u = &flow_data[bi * 2 * hw..bi * 2 * hw + hw];
        let v = &flow_data[bi * 2 * hw + hw..(bi + 1) * 2 * hw];
        let mut g_in = vec![T::zero(); c * hw];
        let mut g_flow = vec![T::zero(); 2 * hw];
        let one = T::one();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = T::from_f64(x as f64) + u[i];
                let sy = T::from_f64(y as f64) + v[i];
                let fx = sx.floor();
                let fy = sy.floor();
                let tx = sx - fx;
                let ty = sy - fy;
                let x0 = fx.to_f64_() as isize;
                let y0 = fy.to_f64_() as isize;
                let at = |yy: isize, xx: isize, plane: &[T]| -> T {
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        plane[yy as usize * w + xx as usize]
                    } else {
                        T::zero()
                    }
                };
                let mut gu = T::zero();
                let mut gv = T::zero();
                for ci in 0..c {
                    let plane = &in_b[ci * hw..(ci + 1) * hw];
                    let go = go_b[ci * hw + i];
                    if go == T::zero() {
                        continue;
                    }
                    let v00 = at(y0, x0, plane);
                    let v01 = at(y0, x0 + 1, plane);
                    let v10 = at(y0 + 1, x0, plane);
                    let v11 = at(y0 + 1, x0 + 1, plane);
                    // d out / d sx and d sy, with out-of-image taps pinned to 0.
                    gu = gu + go * ((one - ty) * (v01 - v00) + ty * (v11 - v10));
                    gv = gv + go * ((one - tx) * (v10 - v00) + tx * (v11 - v01));
                    let gp = &mut g_in[ci * hw..(ci + 1) * hw];
                    let mut scatter = |yy: isize, xx: isize, wgt: T| {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            let t = yy as usize * w + xx as usize;
                            gp[t] = gp[t] + wgt * go;
                        }
                    };
                    scatter(y0, x0, (one - tx) * (one - ty));
                    scatter(y0, x0 + 1, tx * (one - ty));
                    scatter(y0 + 1, x0, (one - tx) * ty);
                    scatter(y0 + 1, x0 + 1, tx * ty);
                }
                g_flow[i] = gu;
                g_flow[hw + i] = gv;
            }
        }
        (g_in, g_flow)
    });

    let mut g_input = Tensor::zeros(&[b, c, h, w]);
    let mut g_flow = Tensor::zeros(&[b, 2, h, w]);
    for (bi, (gi, gf)) in parts.into_iter().enumerate() {
        g_input.data_mut()[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&gi);
        g_flow.data_mut()[bi * 2 * hw..(bi + 1) * 2 * hw].copy_from_slice(&gf);
    }
    Ok(WarpGrads { input: g_input, flow: g_flow })
}
