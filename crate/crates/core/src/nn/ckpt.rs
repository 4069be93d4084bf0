//! Checkpoint archive: JSON header followed by named tensors in raw
//! little-endian form. Reload is bit-exact.

use super::layers::NamedTensor;
use super::{build_model_with_input, Arch, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FUNCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkptHeader {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub dtype: String,
    pub seed: u64,
    pub round: usize,
}

pub fn save<F: Scalar>(model: &Model<F>, header: &CkptHeader, path: &Path) -> Result<()> {
    let err = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if header.dtype != F::DTYPE {
        return Err(err(format!(
            "header dtype {} does not match scalar {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let header_json = serde_json::to_vec(header)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    let tensors = model.state_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u8).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.data.len() * F::BYTES);
        for &v in &t.data {
            v.write_le(&mut bytes);
        }
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<(Model<F>, CkptHeader)> {
    let err = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| err(e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(err("bad magic bytes".to_string()));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)?;
    if header.dtype != F::DTYPE {
        return Err(err(format!(
            "checkpoint dtype {} cannot load as {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| err(e.to_string()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let byte_len = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; byte_len];
        r.read_exact(&mut bytes)?;
        if byte_len % F::BYTES != 0 {
            return Err(err(format!("tensor {name} has ragged byte length")));
        }
        let data: Vec<F> = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
        if data.len() != shape.iter().product::<usize>() {
            return Err(err(format!("tensor {name} shape/data mismatch")));
        }
        tensors.push(NamedTensor { name, shape, data });
    }
    let mut model =
        build_model_with_input::<F>(header.arch, header.num_classes, header.input_shape, 0)?;
    model.load_state_tensors(&tensors)?;
    Ok((model, header))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(Arch::Lenet5, 10, 42).unwrap();
        let header = CkptHeader {
            arch: Arch::Lenet5,
            num_classes: 10,
            input_shape: model.input_shape,
            dtype: "f32".to_string(),
            seed: 42,
            round: 3,
        };
        save(&model, &header, &path).unwrap();
        let (loaded, h2) = load::<f32>(&path).unwrap();
        assert_eq!(h2.round, 3);
        assert_eq!(h2.seed, 42);
        let a = model.params();
        let b = loaded.params();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn resnet_checkpoint_preserves_running_stats() {
        use crate::nn::layers::BnMode;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resnet.ckpt");
        let mut model = build_model::<f32>(Arch::Resnet32, 10, 7).unwrap();
        // push some activity through so running stats move off their defaults
        let x = ndarray::Array4::from_elem((2, 3, 32, 32), 0.5f32);
        let _ = model.forward_tape(&x, BnMode::Train).unwrap();
        let header = CkptHeader {
            arch: Arch::Resnet32,
            num_classes: 10,
            input_shape: model.input_shape,
            dtype: "f32".to_string(),
            seed: 7,
            round: 0,
        };
        save(&model, &header, &path).unwrap();
        let (loaded, _) = load::<f32>(&path).unwrap();
        let before: Vec<_> = model.state_tensors();
        let after: Vec<_> = loaded.state_tensors();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f64>(Arch::Lenet5, 10, 1).unwrap();
        let header = CkptHeader {
            arch: Arch::Lenet5,
            num_classes: 10,
            input_shape: model.input_shape,
            dtype: "f64".to_string(),
            seed: 1,
            round: 0,
        };
        save(&model, &header, &path).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
