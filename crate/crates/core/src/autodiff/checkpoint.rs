//! Binary checkpoint format.
//!
//! ```text
//! "ATCW" | version: u16 LE | manifest_len: u32 LE | manifest (UTF-8 JSON) | f32 LE params
//! ```
//!
//! Parameter data follows the manifest's `params` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, LayerSpec, Network, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATCW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub input_channels: usize,
    pub head_class_count: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
    /// Free-form training metadata (pair, epochs, accuracy, seed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    net: &Network<f32>,
    meta: Option<serde_json::Value>,
) -> Result<(), AutodiffError> {
    let manifest = CheckpointManifest {
        input_channels: net.input_channels(),
        head_class_count: net.head_class_count(),
        layers: net.layers().to_vec(),
        params: net
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json =
        serde_json::to_vec(&manifest).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len())
        .map_err(|_| AutodiffError::Checkpoint("manifest too large".into()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for p in net.params() {
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(
    mut input: R,
) -> Result<(Network<f32>, CheckpointManifest), AutodiffError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic bytes".into()));
    }
    let mut v = [0u8; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut l = [0u8; 4];
    input.read_exact(&mut l)?;
    let mut json = vec![0u8; u32::from_le_bytes(l) as usize];
    input.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)
        .map_err(|e| AutodiffError::Checkpoint(format!("manifest: {e}")))?;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(AutodiffError::Checkpoint(
            "trailing bytes after parameters".into(),
        ));
    }
    let net = Network::from_parts(manifest.input_channels, manifest.layers.clone(), tensors)?;
    if net.head_class_count() != manifest.head_class_count {
        return Err(AutodiffError::Checkpoint(
            "head class count mismatch".into(),
        ));
    }
    Ok((net, manifest))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Network<f32>,
    meta: Option<serde_json::Value>,
) -> Result<(), AutodiffError> {
    write_checkpoint(BufWriter::new(File::create(path)?), net, meta)
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Network<f32>, CheckpointManifest), AutodiffError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let net = Network::<f32>::small_cnn(3, &[2], 2, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, None).unwrap();
        assert_eq!(&buf[0..4], b"ATCW");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        let len = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&buf[10..10 + len]).unwrap();
        assert_eq!(manifest["layers"][0]["kind"], "conv2d");
        let nparams: usize = net.params().iter().map(|p| p.tensor.len()).sum();
        assert_eq!(buf.len(), 10 + len + 4 * nparams);
        let first = f32::from_le_bytes(buf[10 + len..14 + len].try_into().unwrap());
        assert_eq!(first, net.params()[0].tensor.data()[0]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let net = Network::<f32>::small_cnn(3, &[4, 4], 8, 11).unwrap();
        let meta = serde_json::json!({"epochs_run": 3});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, Some(meta.clone())).unwrap();
        let (back, manifest) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(manifest.meta, Some(meta));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
