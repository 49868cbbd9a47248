//! Named parameter store, initialization, and checkpoint serialization.
//!
//! Parameters keep their insertion order, which is the model construction
//! order; checkpoints therefore serialize identically for identical runs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

const MAGIC: &[u8; 8] = b"FDFLOWCP";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Insertion-order iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Serializes `config` (an opaque summary string) and every parameter,
    /// bit-exactly, in insertion order.
    pub fn save<W: Write>(&self, mut w: W, config: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = config.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save_file(&self, path: &Path, config: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f, config)?;
        f.flush()?;
        Ok(())
    }

    /// Inverse of [`Self::save`]; returns the parameters and the config string.
    pub fn load<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config = String::from_utf8(cfg)
            .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;

        let count = read_u32(&mut r)? as usize;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
            let mut meta = [0u8; 2];
            r.read_exact(&mut meta)?;
            if meta[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", meta[0])));
            }
            let rank = meta[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok((params, config))
    }

    pub fn load_file(path: &Path) -> Result<(Self, String)> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters pushed onto a tape, addressable by name. Casting goes through
/// f64, so binding to an f64 tape gives exact promotions for gradient checks.
pub struct BoundParams {
    map: HashMap<String, crate::tape::Var>,
}

impl BoundParams {
    pub fn bind<T: Elem>(tape: &mut crate::tape::Tape<T>, params: &ModelParams) -> Self {
        let mut map = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            map.insert(name.to_string(), tape.param(tensor.cast::<T>()));
        }
        BoundParams { map }
    }

    /// Binds explicit tensors under the names (and order) of `params`,
    /// e.g. perturbed copies during finite-difference checks.
    pub fn bind_values<T: Elem>(
        tape: &mut crate::tape::Tape<T>,
        params: &ModelParams,
        values: &[Tensor<T>],
    ) -> Result<Self> {
        if values.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors bound to {} parameter names",
                values.len(),
                params.len()
            )));
        }
        let mut map = HashMap::with_capacity(params.len());
        for ((name, _), value) in params.iter().zip(values) {
            map.insert(name.to_string(), tape.param(value.clone()));
        }
        Ok(BoundParams { map })
    }

    pub fn var(&self, name: &str) -> Result<crate::tape::Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradients for every bound parameter, pulled off the tape in `params`
    /// order. Parameters with no gradient (not on the loss path) yield `None`.
    pub fn collect_grads<T: Elem>(
        &self,
        tape: &mut crate::tape::Tape<T>,
        params: &ModelParams,
    ) -> Vec<Option<Tensor<T>>> {
        params
            .names()
            .map(|n| self.map.get(n).and_then(|&v| tape.take_grad(v)))
            .collect()
    }
}

/// He-uniform weight: bound sqrt(6 / fan_in), with fan_in counted as input
/// channels times kernel taps. Biases start at zero.
pub fn init_conv_weight<T: Elem>(
    rng: &mut impl Rng,
    shape: &[usize; 4],
    fan_in: usize,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}
