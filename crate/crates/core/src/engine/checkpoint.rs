//! Binary checkpoint of a model.
//!
//! ```text
//! magic      8 bytes  "FCSDCKPT"
//! version    u32 LE   (1)
//! activation u8       0 = tanh, 1 = relu
//! num_dims   u32 LE
//! dims       num_dims x u64 LE
//! num_params u64 LE   must equal the layout size implied by dims
//! params     num_params x f64 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_nn::{Activation, Architecture, MlpModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_DIMS: usize = 64;

pub fn encode_checkpoint(model: &MlpModel) -> Vec<u8> {
    let arch = model.architecture();
    let params = model.params().values();
    let mut out = Vec::with_capacity(32 + 8 * (arch.dims().len() + params.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(arch.activation().tag());
    out.extend_from_slice(&(arch.dims().len() as u32).to_le_bytes());
    for &d in arch.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Decode("checkpoint truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader { bytes };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Decode("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let activation = Activation::from_tag(r.take(1)?[0])
        .ok_or_else(|| Error::Decode("unknown activation tag".into()))?;
    let num_dims = r.u32()? as usize;
    if !(2..=MAX_DIMS).contains(&num_dims) {
        return Err(Error::Decode(format!("implausible layer count {num_dims}")));
    }
    let mut dims = Vec::with_capacity(num_dims);
    let mut expected: u64 = 0;
    let mut prev: Option<u64> = None;
    for _ in 0..num_dims {
        let d = r.u64()?;
        if d == 0 {
            return Err(Error::Decode("zero layer width".into()));
        }
        if let Some(p) = prev {
            expected = p
                .checked_mul(d)
                .and_then(|w| w.checked_add(d))
                .and_then(|w| w.checked_add(expected))
                .ok_or_else(|| Error::Decode("layout size overflows".into()))?;
        }
        prev = Some(d);
        dims.push(usize::try_from(d).map_err(|_| Error::Decode("layer width overflows".into()))?);
    }
    let num_params = r.u64()?;
    if num_params != expected {
        return Err(Error::Decode(format!(
            "header declares {num_params} parameters, layout needs {expected}"
        )));
    }
    // Check the payload length before allocating anything sized by the header.
    let payload_len = usize::try_from(num_params)
        .ok()
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Decode("parameter count overflows".into()))?;
    let payload = r.take(payload_len)?;
    if !r.bytes.is_empty() {
        return Err(Error::Decode("trailing bytes after parameters".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Decode("non-finite parameter".into()));
    }
    let arch = Architecture::new(dims, activation).map_err(|e| Error::Decode(e.to_string()))?;
    let params = crate::tensor_nn::ParamVector::from_values(arch.layout().clone(), values)?;
    arch.model(params)
}

pub fn write_checkpoint(path: &Path, model: &MlpModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<MlpModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
