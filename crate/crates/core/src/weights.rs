//! Named weight collections, the `.fsrw` binary weight format, and the
//! Adam optimizer step. ModelWeights is the unit exchanged between the
//! server and clients.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"FSRW";
pub const WEIGHT_VERSION: u32 = 1;

/// Ordered list of (name, tensor). Two instances built from the same
/// model config share name sequence and shapes, which is what makes
/// averaging well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor)>,
}

impl ModelWeights {
    pub fn new() -> Self {
        ModelWeights { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn same_schema(&self, other: &ModelWeights) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    pub fn check_aligned(&self, other: &ModelWeights, what: &str) -> Result<()> {
        if !self.same_schema(other) {
            return Err(Error::invalid_argument(format!(
                "{what}: weight schemas are not aligned"
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[tensor.shape().len() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ModelWeights> {
        let parse_err = |msg: &str| Error::Parse {
            path: "<weights>".into(),
            offset: 0,
            message: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| parse_err("truncated magic"))?;
        if &magic != WEIGHT_MAGIC {
            return Err(parse_err("bad magic, not a weight file"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| parse_err("truncated version"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != WEIGHT_VERSION {
            return Err(parse_err(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(|_| parse_err("truncated count"))?;
        let count = u32::from_le_bytes(u32buf);
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf).map_err(|_| parse_err("truncated name length"))?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| parse_err("truncated name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| parse_err("name not UTF-8"))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim).map_err(|_| parse_err("truncated ndim"))?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                r.read_exact(&mut u32buf).map_err(|_| parse_err("truncated dims"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut u32buf).map_err(|_| parse_err("truncated payload"))?;
                data.push(f32::from_le_bytes(u32buf));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(ModelWeights { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelWeights> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Parse { offset, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                offset,
                message,
            },
            other => other,
        })
    }
}

impl Default for ModelWeights {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction; moments live alongside each parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelWeights, lr: f32) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

pub fn adam_step(params: &mut ModelWeights, grads: &ModelWeights, state: &mut AdamState) -> Result<()> {
    params.check_aligned(grads, "adam_step")?;
    if state.m.len() != params.len() {
        return Err(Error::invalid_argument("adam_step: state not built for these params"));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let lr = state.lr as f64;
    let eps = state.eps as f64;
    for i in 0..params.len() {
        let g = grads.tensor(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            p[j] = (p[j] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}
