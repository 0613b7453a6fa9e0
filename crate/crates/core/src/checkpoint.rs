//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "STDNCKPT"
//! version u32
//! manifest_len u64, manifest JSON (UTF-8)
//! n_tensors u64
//! per tensor:
//!   name_len u32, name UTF-8        e.g. "mnet.enc0.block1.conv.weight"
//!   ndim u32, dims u64 x ndim
//!   data f64 LE x prod(dims)
//! ```
//!
//! Tensor names follow the `module.layer.kind` scheme used by the parameter
//! store (`extractor.conv3.weight`, `texture_block.norm.bn.gamma`,
//! `mnet.dec1.block2.bn.running_var`, ...). Writing and reading preserve
//! the exact f64 bit patterns, so a save/load round trip is bit-identical.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"STDNCKPT";
const VERSION: u32 = 1;

/// Write the manifest plus every parameter array in `store`.
pub fn save(path: &Path, manifest: &serde_json::Value, store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let manifest_bytes = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&manifest_bytes).map_err(io_err)?;

    let n = store.len() as u64;
    w.write_all(&n.to_le_bytes()).map_err(io_err)?;
    for (name, value, _) in store.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let dims = value.shape();
        w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read the manifest and all tensors.
pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let mlen = u64::from_le_bytes(u64buf) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    r.read_exact(&mut manifest_bytes).map_err(io_err)?;
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes)?;

    r.read_exact(&mut u64buf).map_err(io_err)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u64buf).map_err(io_err)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf).map_err(io_err)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    Ok((manifest, tensors))
}

/// Fill `store` from loaded tensors; every entry must be present and no
/// extras are allowed.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, ArrayD<f64>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, value) in tensors {
        store.load_named(&name, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use crate::rng::stream_rng;
    use tempfile::TempDir;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, "ckpt");
        store.register("a.weight", randn(&mut rng, &[3, 2, 3, 3]), true);
        store.register("a.bias", randn(&mut rng, &[3]), true);
        store.register("bn.running_var", randn(&mut rng, &[1]).mapv(f64::abs), false);

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.stdck");
        let manifest = serde_json::json!({"step": 12, "seed": 7});
        save(&path, &manifest, &store).unwrap();

        let (m2, tensors) = load(&path).unwrap();
        assert_eq!(m2["step"], 12);
        let mut store2 = ParamStore::new();
        store2.register("a.weight", ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 2, 3, 3])), true);
        store2.register("a.bias", ndarray::ArrayD::zeros(ndarray::IxDyn(&[3])), true);
        store2.register("bn.running_var", ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])), false);
        restore(&mut store2, tensors).unwrap();
        for (id, id2) in store.ids().zip(store2.ids()) {
            let a = store.value(id);
            let b = store2.value(id2);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_magic_and_mismatches() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bogus.stdck");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(load(&path).is_err());

        let mut store = ParamStore::new();
        store.register("x", ndarray::ArrayD::zeros(ndarray::IxDyn(&[2])), true);
        let good = dir.path().join("good.stdck");
        save(&good, &serde_json::json!({}), &store).unwrap();
        let (_, tensors) = load(&good).unwrap();

        let mut other = ParamStore::new();
        other.register("y", ndarray::ArrayD::zeros(ndarray::IxDyn(&[2])), true);
        assert!(restore(&mut other, tensors.clone()).is_err());

        let mut shaped = ParamStore::new();
        shaped.register("x", ndarray::ArrayD::zeros(ndarray::IxDyn(&[3])), true);
        assert!(restore(&mut shaped, tensors).is_err());
    }
}
