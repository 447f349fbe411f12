//! Little-endian float blobs shared by the manifest, embedding and checkpoint formats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a float blob. Files written by this crate use `F64`; `F32` is accepted on read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub(crate) fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `count` floats starting at byte `offset`, widening `F32` to `f64`.
pub(crate) fn read_floats(bytes: &[u8], offset: usize, count: usize, dtype: Dtype) -> Result<Vec<f64>> {
    let width = dtype.width();
    let end = count
        .checked_mul(width)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| Error::validation("blob offset", "overflow"))?;
    if end > bytes.len() {
        return Err(Error::validation(
            "blob offset",
            format!("range {offset}..{end} exceeds blob length {}", bytes.len()),
        ));
    }
    let slice = &bytes[offset..end];
    let out = match dtype {
        Dtype::F64 => slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_blobs_widen() {
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_floats(&bytes, 0, 2, Dtype::F32).unwrap(), vec![1.5, -2.25]);
        assert!(read_floats(&bytes, 4, 2, Dtype::F32).is_err());
    }

    #[test]
    fn f64_blobs_are_exact() {
        let values = [0.1, f64::MIN_POSITIVE, -1e300];
        let mut bytes = Vec::new();
        push_f64s(&mut bytes, &values);
        assert_eq!(read_floats(&bytes, 0, 3, Dtype::F64).unwrap(), values);
    }
}
