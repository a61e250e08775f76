//! Binary model bundle.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "SALIENTM"
//! version  u32      BUNDLE_VERSION
//! hlen     u64      length of the JSON header
//! header   hlen     UTF-8 JSON, including the tensor table
//! tensors           f32 values of each tensor, in table order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::arch::{NamedTensor, Parameters};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SALIENTM";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    header: H,
    tensors: Vec<TensorEntry>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::ModelFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode<H: Serialize>(header: &H, params: &Parameters) -> Result<Vec<u8>> {
    let envelope = Envelope {
        header,
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&envelope)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(H, Parameters)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a model bundle"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != BUNDLE_VERSION {
        return Err(format_err(path, format!("unsupported bundle version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(format_err(path, "truncated header"));
    }
    let envelope: Envelope<H> =
        serde_json::from_slice(&body[..hlen]).map_err(|e| format_err(path, e.to_string()))?;
    let mut data = &body[hlen..];
    let mut tensors = Vec::with_capacity(envelope.tensors.len());
    for entry in envelope.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 4 * n {
            return Err(format_err(path, format!("truncated tensor `{}`", entry.name)));
        }
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        data = &data[4 * n..];
        tensors.push(NamedTensor {
            name: entry.name,
            tensor: Tensor::new(entry.shape, values)?,
        });
    }
    if !data.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", data.len())));
    }
    Ok((envelope.header, Parameters { tensors }))
}

pub fn write<H: Serialize>(path: &Path, header: &H, params: &Parameters) -> Result<()> {
    let bytes = encode(header, params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Parameters)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ArchitectureSpec;

    #[test]
    fn round_trip_and_corruption() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let params = Parameters::init(&spec, 11);
        let bytes = encode(&spec, &params).unwrap();
        let (spec2, params2): (ArchitectureSpec, Parameters) = decode(&bytes, Path::new("m")).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2, params);
        assert!(decode::<ArchitectureSpec>(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<ArchitectureSpec>(&bad, Path::new("m")).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode::<ArchitectureSpec>(&v2, Path::new("m")).is_err());
    }
}
