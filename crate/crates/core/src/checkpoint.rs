//! Versioned binary container for named parameter arrays.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use stitchforge_tensor::{ParamStore, Scalar, Tensor};

use crate::dataset::SynthesisConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Homography,
    Deformation,
    /// Frozen perceptual feature extractor weights.
    Perceptual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// Architecture of the stored network.
    pub network: serde_json::Value,
    pub synthesis: Option<SynthesisConfig>,
    pub net_size: usize,
    pub step: u64,
    pub epoch: u64,
    /// Optimizer step count; moment tensors follow the parameters when set.
    pub adam_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Network configuration stored in the header, after checking the kind.
    pub fn network_config<C: serde::de::DeserializeOwned>(&self, kind: ModelKind) -> Result<C> {
        if self.header.kind != kind {
            return Err(Error::CheckpointIncompatible(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        serde_json::from_value(self.header.network.clone())
            .map_err(|e| Error::CheckpointIncompatible(format!("network configuration: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header.tensors.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    /// Copies every parameter of `store` out of the checkpoint; names and
    /// shapes must match exactly.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::CheckpointIncompatible(format!("missing parameter {name}")))?;
            store.set(&name, t.cast()).map_err(Error::CheckpointIncompatible)?;
        }
        Ok(())
    }

    /// Optimizer moments stored under `adam.m.*` / `adam.v.*`.
    pub fn adam_moments<T: Scalar>(&self, store: &ParamStore<T>) -> Option<(u64, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let step = self.header.adam_step?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in store.names() {
            m.push(self.tensor(&format!("adam.m.{name}"))?.cast());
            v.push(self.tensor(&format!("adam.v.{name}"))?.cast());
        }
        Some((step, m, v))
    }
}

/// Parameter entries (and optional optimizer moments) of a store.
pub fn collect_tensors<T: Scalar>(
    store: &ParamStore<T>,
    moments: Option<(&[Tensor<T>], &[Tensor<T>])>,
) -> (Vec<TensorEntry>, Vec<Tensor<f32>>) {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in store.iter() {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec() });
        tensors.push(t.cast());
    }
    if let Some((m, v)) = moments {
        for (prefix, set) in [("adam.m", m), ("adam.v", v)] {
            for (name, t) in store.names().iter().zip(set) {
                entries.push(TensorEntry { name: format!("{prefix}.{name}"), shape: t.shape().to_vec() });
                tensors.push(t.cast());
            }
        }
    }
    (entries, tensors)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.header.tensors.len() != ckpt.tensors.len() {
        return Err(Error::CheckpointIncompatible("header and tensor count differ".into()));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = serde_json::to_vec(&ckpt.header)?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        for (e, t) in ckpt.header.tensors.iter().zip(&ckpt.tensors) {
            if e.shape != t.shape() {
                return Err(Error::CheckpointIncompatible(format!("{}: header shape differs from data", e.name)));
            }
            for v in t.data() {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointIncompatible(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointIncompatible(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|err| Error::CheckpointIncompatible(format!("{}: truncated data ({err})", e.name)))?;
        tensors.push(Tensor::from_vec(&e.shape, data));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]));
        store.add("b", Tensor::from_vec(&[3], vec![7.0, 8.0, 9.0]));
        let (tensors, data) = collect_tensors(&store, None);
        Checkpoint {
            header: CheckpointHeader {
                kind: ModelKind::Homography,
                network: serde_json::json!({"net_size": 32}),
                synthesis: None,
                net_size: 32,
                step: 5,
                epoch: 1,
                adam_step: None,
                tensors,
            },
            tensors: data,
        }
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.tensors, ck.tensors);

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointIncompatible(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let ck = sample();
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::zeros(&[2, 2]));
        ck.load_into(&mut store).unwrap();
        assert_eq!(store.get(store.id("a").unwrap()).data()[2], 3.5);
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("b", Tensor::zeros(&[4]));
        assert!(ck.load_into(&mut wrong).is_err());
    }
}
