//! Named parameter storage, initialization, and binary tensor I/O.

use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Ordered set of named parameter tensors. Order is creation order and is
/// part of the optimizer-state contract.
#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Arc<ArrayD<F>>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: ArrayD<F>) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(tensor));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &ArrayD<F> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut ArrayD<F> {
        Arc::make_mut(&mut self.tensors[idx])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every parameter as a differentiable leaf on a tape,
    /// in storage order.
    pub fn leaves(&self, tape: &Tape<F>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf_arc(t.clone()))
            .collect()
    }

    /// Registers every parameter as a frozen constant (inference path).
    pub fn constants(&self, tape: &Tape<F>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant_arc(t.clone()))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// He-style normal init for a conv weight `(Co, Ci, kd, kh, kw)`.
    pub fn add_conv(
        &mut self,
        name: &str,
        co: usize,
        ci: usize,
        kshape: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize) {
        let fan_in = ci * kshape.0 * kshape.1 * kshape.2;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ArrayD::from_shape_fn(
            IxDyn(&[co, ci, kshape.0, kshape.1, kshape.2]),
            |_| F::from_f64(normal_sample(rng) * std),
        );
        let b = ArrayD::zeros(IxDyn(&[co]));
        let wi = self.add(&format!("{name}.weight"), w);
        let bi = self.add(&format!("{name}.bias"), b);
        (wi, bi)
    }

    pub fn to_f32_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.clone(),
                    (
                        t.shape().to_vec(),
                        t.iter().map(|&v| v.to_f64() as f32).collect(),
                    ),
                )
            })
            .collect()
    }

    /// Replaces tensor contents from a name -> (shape, data) map. Shapes must
    /// match the registered parameters exactly.
    pub fn load_f32_map(&mut self, map: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (shape, data) = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name} in checkpoint"))
            })?;
            if shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} expected",
                    shape,
                    tensor.shape()
                )));
            }
            let new = ArrayD::from_shape_vec(
                IxDyn(shape),
                data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
            *tensor = Arc::new(new);
        }
        Ok(())
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Box-Muller standard normal draw; two uniforms per sample keeps the
/// consumption pattern deterministic.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const TENSOR_MAGIC: &[u8; 4] = b"RSGT";

/// Writes a name -> (shape, f32 data) map as a little-endian binary blob.
pub fn write_tensors(
    path: impl AsRef<Path>,
    map: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, (shape, data)) in map {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated tensor file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != TENSOR_MAGIC {
        return Err(Error::Checkpoint("bad tensor file magic".into()));
    }
    let _version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(name, (shape, data));
    }
    Ok(map)
}
