//! Weight files: one line of JSON header, a newline, then the parameters as a
//! flat little-endian `f32` blob in [`Cae::params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Cae, ARCHITECTURE};
use super::tensor::Tensor;
use super::NnError;

pub const FORMAT: &str = "towscan-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format: String,
    pub version: u32,
    pub architecture: String,
    pub latent_dim: usize,
    pub input_size: usize,
    pub params: Vec<ParamSpec>,
    pub blob_len: usize,
    /// Hex SHA-256 of the blob.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_weights(model: &Cae<f32>) -> Vec<u8> {
    let mut blob = Vec::new();
    for p in model.params() {
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = WeightHeader {
        format: FORMAT.into(),
        version: VERSION,
        architecture: ARCHITECTURE.into(),
        latent_dim: model.latent_dim(),
        input_size: model.input_size(),
        params: model
            .param_specs()
            .into_iter()
            .map(|(name, shape)| ParamSpec { name, shape })
            .collect(),
        blob_len: blob.len(),
        checksum: sha256_hex(&blob),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Cae<f32>, NnError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::WeightFormat("missing header terminator".into()))?;
    let header: WeightHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| NnError::WeightFormat(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(NnError::WeightFormat(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let blob = &bytes[split + 1..];
    if blob.len() != header.blob_len || sha256_hex(blob) != header.checksum {
        return Err(NnError::Checksum {
            expected_len: header.blob_len,
            actual_len: blob.len(),
        });
    }
    if header.architecture != ARCHITECTURE {
        return Err(NnError::Architecture(format!(
            "file holds {:?}, this build knows {ARCHITECTURE:?}",
            header.architecture
        )));
    }
    let mut model = Cae::<f32>::new(header.latent_dim, header.input_size, 0)
        .map_err(|e| NnError::Architecture(e.to_string()))?;
    let expected = model.param_specs();
    let declared: Vec<(String, Vec<usize>)> = header
        .params
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    if expected != declared {
        return Err(NnError::Architecture(format!(
            "parameter shapes do not match latent_dim {} / input {}",
            header.latent_dim, header.input_size
        )));
    }
    let total: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if total * 4 != blob.len() {
        return Err(NnError::Architecture(format!(
            "blob holds {} values, architecture needs {total}",
            blob.len() / 4
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for p in model.params_mut() {
        let data: Vec<f32> = values.by_ref().take(p.len()).collect();
        *p = Tensor::from_vec(p.shape(), data)?;
    }
    Ok(model)
}

pub fn save_weights(model: &Cae<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model))
        .map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Cae<f32>, NnError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let model = Cae::<f32>::new(16, 32, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.weights");
        save_weights(&model, &path).unwrap();
        let back = load_weights(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[4, 32, 32], (0..4096).map(|_| rng.gen()).collect()).unwrap();
        let (a, b) = (model.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let bytes = encode_weights(&Cae::<f32>::new(4, 32, 1).unwrap());
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 10]),
            Err(NnError::Checksum { .. })
        ));
    }

    #[test]
    fn edited_latent_dim_is_an_architecture_error() {
        let bytes = encode_weights(&Cae::<f32>::new(4, 32, 1).unwrap());
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..split].to_vec()).unwrap();
        let edited = header.replace("\"latent_dim\":4", "\"latent_dim\":5");
        assert_ne!(edited, header);
        let mut tampered = edited.into_bytes();
        tampered.extend_from_slice(&bytes[split..]);
        assert!(matches!(
            decode_weights(&tampered),
            Err(NnError::Architecture(_))
        ));
    }
}
