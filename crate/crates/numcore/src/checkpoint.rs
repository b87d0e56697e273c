//! Parameter checkpoints: a directory holding `manifest.json` plus one
//! little-endian raw float file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::graph::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "mepoi-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_le<T: Scalar>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::BYTES);
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

/// Decodes raw little-endian floats of the given dtype into `T`.
pub fn decode_le<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    match dtype {
        "f32" => decode_as::<f32, T>(bytes),
        "f64" => decode_as::<f64, T>(bytes),
        other => Err(NumError::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

fn decode_as<S: Scalar, T: Scalar>(bytes: &[u8]) -> Result<Vec<T>> {
    if bytes.len() % S::BYTES != 0 {
        return Err(NumError::Checkpoint(format!(
            "{} bytes is not a multiple of {}",
            bytes.len(),
            S::BYTES
        )));
    }
    Ok(bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::c(S::read_le(c).f()))
        .collect())
}

/// Writes every tensor of `store` under `dir` (created if missing).
pub fn save<T: Scalar>(dir: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for (id, name, t) in store.iter() {
        let file = format!("{:04}.bin", id.index());
        fs::write(dir.join(&file), encode_le(t.data()))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        dtype: T::DTYPE.to_string(),
        endianness: "little".to_string(),
        tensors,
        meta,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path)
        .map_err(|e| NumError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT {
        return Err(NumError::Checkpoint(format!("unexpected format `{}`", manifest.format)));
    }
    if manifest.endianness != "little" {
        return Err(NumError::Checkpoint(format!(
            "unsupported endianness `{}`",
            manifest.endianness
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint directory, converting to `T` when the stored dtype
/// differs.
pub fn load<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let bytes = fs::read(dir.join(&e.file))?;
        let data = decode_le::<T>(&bytes, &manifest.dtype)?;
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| NumError::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
        store.add(e.name.clone(), t)?;
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::randn(vec![3, 4], 1.0, &mut rng)).unwrap();
        store.add("b.bias", Tensor::randn(vec![7], 0.1, &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store, serde_json::json!({"epoch": 2})).unwrap();
        let (back, meta) = load::<f32>(dir.path()).unwrap();
        assert_eq!(meta["epoch"], 2);
        assert_eq!(back.len(), 2);
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.dtype, "f32");
        assert_eq!(manifest.endianness, "little");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![4])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store, serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("0000.bin"), [0u8; 12]).unwrap();
        assert!(load::<f64>(dir.path()).is_err());
    }
}
