use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::tensor_nn::MlpModel;

/// Per-class mean teacher logits: row `c` is the average logit vector over
/// samples of class `c`. Classes without samples have a zero row and
/// `present[c] == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    num_classes: usize,
    rows: Vec<f64>,
    present: Vec<bool>,
}

impl PrototypeMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        PrototypeMatrix {
            num_classes,
            rows: vec![0.0; num_classes * num_classes],
            present: vec![false; num_classes],
        }
    }

    /// Builds a matrix from row-major values; absent rows must be zero.
    pub fn from_parts(num_classes: usize, rows: Vec<f64>, present: Vec<bool>) -> Result<Self> {
        if rows.len() != num_classes * num_classes || present.len() != num_classes {
            return Err(Error::shape("prototype matrix must be |Y| x |Y| with |Y| flags"));
        }
        let m = PrototypeMatrix {
            num_classes,
            rows,
            present,
        };
        for c in 0..num_classes {
            if !m.present[c] && m.row(c).iter().any(|v| *v != 0.0) {
                return Err(Error::invalid(format!("absent class {c} has a nonzero row")));
            }
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.num_classes..(class + 1) * self.num_classes]
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.present[class]
    }

    pub fn present_mask(&self) -> &[bool] {
        &self.present
    }

    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    /// Exchange format: `|Y|` as u32 LE, the presence flags packed LSB-first
    /// into `ceil(|Y| / 8)` bytes, then `|Y|^2` row-major f64 LE values.
    pub fn encode(&self) -> Vec<u8> {
        let k = self.num_classes;
        let mut out = Vec::with_capacity(4 + k.div_ceil(8) + 8 * k * k);
        out.extend_from_slice(&(k as u32).to_le_bytes());
        let mut bits = vec![0u8; k.div_ceil(8)];
        for (c, &p) in self.present.iter().enumerate() {
            if p {
                bits[c / 8] |= 1 << (c % 8);
            }
        }
        out.extend_from_slice(&bits);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Decode("prototype header truncated".into()));
        }
        let k = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if k == 0 {
            return Err(Error::Decode("prototype with zero classes".into()));
        }
        let mask_len = k.div_ceil(8);
        let expected = k
            .checked_mul(k)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(4 + mask_len))
            .ok_or_else(|| Error::Decode("prototype size overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Decode(format!(
                "prototype for {k} classes needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let mask = &bytes[4..4 + mask_len];
        if !k.is_multiple_of(8) && mask[mask_len - 1] >> (k % 8) != 0 {
            return Err(Error::Decode("padding bits set in presence mask".into()));
        }
        let present = (0..k).map(|c| mask[c / 8] & (1 << (c % 8)) != 0).collect();
        let rows: Vec<f64> = bytes[4 + mask_len..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("non-finite prototype value".into()));
        }
        PrototypeMatrix::from_parts(k, rows, present).map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Mean teacher logits per class over one client's data.
pub fn local_prototype(teacher: &MlpModel, data: &Dataset) -> Result<PrototypeMatrix> {
    let k = teacher.num_classes();
    if data.num_classes() != k {
        return Err(Error::shape(format!(
            "teacher has {k} outputs, data has {} classes",
            data.num_classes()
        )));
    }
    let logits = teacher.logits(data.features())?;
    let mut proto = PrototypeMatrix::zeros(k);
    let mut counts = vec![0usize; k];
    for (z, &y) in logits.iter_rows().zip(data.labels()) {
        counts[y] += 1;
        for (p, v) in proto.rows[y * k..(y + 1) * k].iter_mut().zip(z) {
            *p += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            proto.present[c] = true;
            proto.rows[c * k..(c + 1) * k].iter_mut().for_each(|p| *p /= n as f64);
        }
    }
    Ok(proto)
}

/// How client prototypes are averaged on the server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMean {
    /// `(1/K) sum_k P_k`; clients lacking a class contribute a zero row.
    #[default]
    AllClients,
    /// Each row averaged over the clients that observed the class.
    PresentOnly,
}

pub fn aggregate_prototypes(locals: &[PrototypeMatrix], mode: PrototypeMean) -> Result<PrototypeMatrix> {
    let first = locals
        .first()
        .ok_or_else(|| Error::invalid("no prototypes to aggregate"))?;
    let k = first.num_classes;
    if locals.iter().any(|p| p.num_classes != k) {
        return Err(Error::shape("prototypes disagree on the number of classes"));
    }
    let mut out = PrototypeMatrix::zeros(k);
    let mut contributors = vec![0usize; k];
    for p in locals {
        for (acc, v) in out.rows.iter_mut().zip(&p.rows) {
            *acc += v;
        }
        for c in 0..k {
            if p.present[c] {
                out.present[c] = true;
                contributors[c] += 1;
            }
        }
    }
    for c in 0..k {
        let denom = match mode {
            PrototypeMean::AllClients => locals.len(),
            PrototypeMean::PresentOnly => contributors[c].max(1),
        } as f64;
        out.rows[c * k..(c + 1) * k].iter_mut().for_each(|v| *v /= denom);
    }
    Ok(out)
}
