//! Flow visualization: the standard 55-entry flow color wheel, rendered to
//! raw RGB bytes or a binary PPM.
//!
//! Hue encodes direction (rightward motion is red), saturation encodes
//! magnitude: zero flow is white and colors saturate at the normalization
//! magnitude. Pixels beyond it are darkened, non-finite pixels are black.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ramp lengths between the six anchor hues red→yellow→green→cyan→blue→
/// magenta→red.
const RAMPS: [usize; 6] = [15, 6, 4, 11, 13, 6];
pub const WHEEL_SIZE: usize = 55;

/// The interpolation wheel as RGB bytes.
pub fn color_wheel() -> [[u8; 3]; WHEEL_SIZE] {
    let mut wheel = [[0u8; 3]; WHEEL_SIZE];
    let mut k = 0;
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    for i in 0..RAMPS[0] {
        wheel[k] = [255, ramp(i, RAMPS[0]), 0]; // red → yellow
        k += 1;
    }
    for i in 0..RAMPS[1] {
        wheel[k] = [255 - ramp(i, RAMPS[1]), 255, 0]; // yellow → green
        k += 1;
    }
    for i in 0..RAMPS[2] {
        wheel[k] = [0, 255, ramp(i, RAMPS[2])]; // green → cyan
        k += 1;
    }
    for i in 0..RAMPS[3] {
        wheel[k] = [0, 255 - ramp(i, RAMPS[3]), 255]; // cyan → blue
        k += 1;
    }
    for i in 0..RAMPS[4] {
        wheel[k] = [ramp(i, RAMPS[4]), 0, 255]; // blue → magenta
        k += 1;
    }
    for i in 0..RAMPS[5] {
        wheel[k] = [255, 0, 255 - ramp(i, RAMPS[5])]; // magenta → red
        k += 1;
    }
    debug_assert_eq!(k, WHEEL_SIZE);
    wheel
}

/// Robust normalization magnitude: the 99th-percentile endpoint magnitude
/// (nearest rank), so a stray huge vector cannot wash out the rest.
pub fn auto_max(flow: &Tensor<f32>) -> Result<f64> {
    let (b, c, h, w) = flow.dims4()?;
    if c != 2 {
        return Err(Error::shape("colorize", format!("flow needs 2 channels, got {c}")));
    }
    let mut mags = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        let (u, v) = (flow.plane(bi, 0), flow.plane(bi, 1));
        for i in 0..h * w {
            let m = ((u[i] as f64).powi(2) + (v[i] as f64).powi(2)).sqrt();
            if m.is_finite() {
                mags.push(m);
            }
        }
    }
    if mags.is_empty() {
        return Ok(1.0);
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((mags.len() - 1) as f64 * 0.99).floor() as usize;
    Ok(mags[idx].max(1e-6))
}

/// Renders the first batch item to row-major RGB bytes. Returns the pixel
/// buffer and the normalization magnitude actually used.
pub fn colorize(flow: &Tensor<f32>, max: Option<f64>) -> Result<(Vec<u8>, f64)> {
    let (_, c, h, w) = flow.dims4()?;
    if c != 2 {
        return Err(Error::shape("colorize", format!("flow needs 2 channels, got {c}")));
    }
    let max = match max {
        Some(m) if m > 0.0 => m,
        Some(m) => return Err(Error::InvalidArgument(format!("max must be positive, got {m}"))),
        None => auto_max(flow)?,
    };
    let wheel = color_wheel();
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    let mut rgb = vec![0u8; h * w * 3];
    for i in 0..h * w {
        let (fu, fv) = (u[i] as f64, v[i] as f64);
        let px = &mut rgb[i * 3..i * 3 + 3];
        if !fu.is_finite() || !fv.is_finite() {
            px.fill(0);
            continue;
        }
        let rad = (fu * fu + fv * fv).sqrt() / max;
        let angle = fv.atan2(fu).rem_euclid(std::f64::consts::TAU);
        let fk = angle / std::f64::consts::TAU * WHEEL_SIZE as f64;
        let k0 = (fk.floor() as usize) % WHEEL_SIZE;
        let k1 = (k0 + 1) % WHEEL_SIZE;
        let f = fk - fk.floor();
        for ch in 0..3 {
            let c0 = wheel[k0][ch] as f64 / 255.0;
            let c1 = wheel[k1][ch] as f64 / 255.0;
            let mut col = c0 + f * (c1 - c0);
            if rad <= 1.0 {
                col = 1.0 - rad * (1.0 - col);
            } else {
                col *= 0.75;
            }
            px[ch] = (col * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((rgb, max))
}

pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidArgument(format!(
            "pixel buffer holds {} bytes, {}x{} needs {}",
            rgb.len(),
            width,
            height,
            width * height * 3
        )));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    Ok(())
}

pub fn write_flow_ppm<P: AsRef<Path>>(
    path: P,
    flow: &Tensor<f32>,
    max: Option<f64>,
) -> Result<f64> {
    let (_, _, h, w) = flow.dims4()?;
    let (rgb, used) = colorize(flow, max)?;
    let f = std::fs::File::create(path)?;
    write_ppm(std::io::BufWriter::new(f), w, h, &rgb)?;
    Ok(used)
}

/// Reads a binary P6 image (8-bit, comments allowed) into an RGB tensor of
/// shape (1, 3, h, w) scaled to [0, 1].
pub fn read_ppm<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::InvalidArgument("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::InvalidArgument(format!("not a binary ppm (magic {magic:?})")));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::InvalidArgument("bad ppm width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::InvalidArgument("bad ppm height".into()))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| Error::InvalidArgument("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::InvalidArgument(format!("only maxval 255 supported, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::InvalidArgument(format!(
            "ppm payload holds {} bytes, {w}x{h} needs {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut img = Tensor::zeros(&[1, 3, h, w]);
    for c in 0..3 {
        let plane = img.plane_mut(0, c);
        for i in 0..h * w {
            plane[i] = bytes[pos + i * 3 + c] as f32 / 255.0;
        }
    }
    Ok(img)
}

pub fn read_ppm_file<P: AsRef<Path>>(path: P) -> Result<Tensor<f32>> {
    let f = std::fs::File::open(path)?;
    read_ppm(std::io::BufReader::new(f))
}

/// Writes an RGB tensor in [0, 1] as a binary P6 image.
pub fn write_image_ppm<P: AsRef<Path>>(path: P, img: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::shape("write_image_ppm", format!("need 3 channels, got {c}")));
    }
    let mut rgb = vec![0u8; h * w * 3];
    for ch in 0..3 {
        let plane = img.plane(0, ch);
        for i in 0..h * w {
            rgb[i * 3 + ch] = (plane[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let f = std::fs::File::create(path)?;
    write_ppm(std::io::BufWriter::new(f), w, h, &rgb)
}
