//! Middlebury `.flo` flow files.
//!
//! Layout: the 4-byte tag "PIEH" (the float 202021.25 in little-endian),
//! width and height as little-endian i32, then h·w interleaved (u, v) f32
//! pairs in row-major order. Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLO_MAGIC: [u8; 4] = *b"PIEH";
/// Guards against corrupt headers; matches the reference reader's sanity cap.
const MAX_DIM: i32 = 99_999;

pub fn write_flo<W: Write>(mut w: W, flow: &Tensor<f32>) -> Result<()> {
    let (b, c, h, wd) = flow.dims4()?;
    if b != 1 || c != 2 {
        return Err(Error::shape(
            "write_flo",
            format!("need shape (1, 2, h, w), got {:?}", flow.shape()),
        ));
    }
    w.write_all(&FLO_MAGIC)?;
    w.write_all(&(wd as i32).to_le_bytes())?;
    w.write_all(&(h as i32).to_le_bytes())?;
    let u = flow.plane(0, 0);
    let v = flow.plane(0, 1);
    let mut row = Vec::with_capacity(wd * 8);
    for y in 0..h {
        row.clear();
        for x in 0..wd {
            row.extend_from_slice(&u[y * wd + x].to_le_bytes());
            row.extend_from_slice(&v[y * wd + x].to_le_bytes());
        }
        w.write_all(&row)?;
    }
    Ok(())
}

pub fn read_flo<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::FloTruncated { expected: 4, got: 0 })?;
    if magic != FLO_MAGIC {
        return Err(Error::FloBadMagic(magic));
    }
    let mut dim = [0u8; 4];
    r.read_exact(&mut dim).map_err(|_| Error::FloTruncated { expected: 12, got: 4 })?;
    let w = i32::from_le_bytes(dim);
    r.read_exact(&mut dim).map_err(|_| Error::FloTruncated { expected: 12, got: 8 })?;
    let h = i32::from_le_bytes(dim);
    if w <= 0 || h <= 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(Error::FloBadDimensions { width: w, height: h });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = h * w * 8;
    let mut payload = vec![0u8; expected];
    let mut got = 0;
    while got < expected {
        match r.read(&mut payload[got..])? {
            0 => {
                return Err(Error::FloTruncated { expected: expected + 12, got: got + 12 });
            }
            n => got += n,
        }
    }

    let mut flow = Tensor::<f32>::zeros(&[1, 2, h, w]);
    {
        let u = flow.plane_mut(0, 0);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            u[i] = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        }
    }
    {
        let v = flow.plane_mut(0, 1);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            v[i] = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        }
    }
    Ok(flow)
}

pub fn write_flo_file<P: AsRef<Path>>(path: P, flow: &Tensor<f32>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_flo(std::io::BufWriter::new(f), flow)
}

pub fn read_flo_file<P: AsRef<Path>>(path: P) -> Result<Tensor<f32>> {
    let f = std::fs::File::open(path)?;
    read_flo(std::io::BufReader::new(f))
}
