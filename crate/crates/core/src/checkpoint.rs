//! Versioned checkpoint container for cascade models.
//!
//! Little-endian layout: magic "DMCK", u8 version = 1, u8 scalar code
//! (0 = f32, 1 = f64), u16 reserved, u32 config JSON length + bytes, u32
//! tensor count, then per tensor: u16 name length + UTF-8 name, u8 ndim,
//! ndim x u32 dims, payload. Save -> load -> save is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::cascade::{CascadeConfig, CascadeError, Model, Tensor};
use crate::scalar::{Real, ScalarKind};

const MAGIC: [u8; 4] = *b"DMCK";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} does not match supported version {supported}")]
    VersionMismatch { found: u8, supported: u8 },
    #[error("unknown scalar code {0}")]
    UnknownScalar(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("config header is not valid JSON: {0}")]
    ConfigJson(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] CascadeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save_checkpoint<T: Real, P: AsRef<Path>>(
    path: P,
    model: &Model<T>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u8(T::KIND.code())?;
    w.write_u16::<LittleEndian>(0)?;
    let config = serde_json::to_vec(&model.config)?;
    w.write_u32::<LittleEndian>(config.len() as u32)?;
    w.write_all(&config)?;
    w.write_u32::<LittleEndian>(model.tensors.len() as u32)?;
    for t in &model.tensors {
        w.write_u16::<LittleEndian>(t.name.len() as u16)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        match T::KIND {
            ScalarKind::F32 => {
                for &v in &t.data {
                    w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
                }
            }
            ScalarKind::F64 => {
                for &v in &t.data {
                    w.write_f64::<LittleEndian>(v.as_f64())?;
                }
            }
        }
    }
    Ok(())
}

fn map_eof(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated
    } else {
        CheckpointError::Io(e)
    }
}

/// Loads a checkpoint into scalar type T, converting the payload if the file
/// was written at the other precision. Tensor names and shapes are validated
/// against the stored config's layout.
pub fn load_checkpoint<T: Real, P: AsRef<Path>>(path: P) -> Result<Model<T>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u8().map_err(map_eof)?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: VERSION });
    }
    let scalar = r.read_u8().map_err(map_eof)?;
    let kind = ScalarKind::from_code(scalar).ok_or(CheckpointError::UnknownScalar(scalar))?;
    r.read_u16::<LittleEndian>().map_err(map_eof)?;

    let config_len = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(map_eof)?;
    let config: CascadeConfig = serde_json::from_slice(&config_bytes)?;

    let n_tensors = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.read_u16::<LittleEndian>().map_err(map_eof)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(map_eof)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let ndim = r.read_u8().map_err(map_eof)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(map_eof)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match kind {
            ScalarKind::F32 => {
                for _ in 0..len {
                    data.push(T::of(r.read_f32::<LittleEndian>().map_err(map_eof)? as f64));
                }
            }
            ScalarKind::F64 => {
                for _ in 0..len {
                    data.push(T::of(r.read_f64::<LittleEndian>().map_err(map_eof)?));
                }
            }
        }
        tensors.push(Tensor { name, shape, data });
    }
    Ok(Model::from_tensors(config, tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::Variant;
    use crate::sim::{make_sensitivities, make_uniform_mask};
    use crate::volume::Dims;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(Variant::McCnn.expand(), 42).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &model).unwrap();
        let loaded = load_checkpoint::<f32, _>(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn forward_identical_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(8, 8, 4);
        let mut cfg = Variant::McCnnDmlp.expand();
        cfg.n_cascades = 1;
        let model = Model::<f32>::init(cfg, 7).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint::<f32, _>(&path).unwrap();

        let s = make_sensitivities::<f32>(dims, 2, 1);
        let m = make_uniform_mask(dims.pe, dims.spe, 2, (2, 2), 0).unwrap();
        let x = crate::sim::make_phantom::<f32>(dims, crate::sim::PhantomKind::Blocks, 3).unwrap();
        let y = crate::fourier::sense_forward(&x, &s, &m).unwrap();
        let (a, _) = crate::cascade::cascade_forward(&y, &s, &m, &model).unwrap();
        let (b, _) = crate::cascade::cascade_forward(&y, &s, &m, &loaded).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mismatched_config_names_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        // Save under one dMLP patch size, then claim another in the config.
        let model = Model::<f32>::init(Variant::McCnnDmlp.expand(), 0).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model).unwrap();

        let mut other = Variant::McCnnDmlp.expand();
        if let crate::cascade::LayerSpec::Dmlp { cfg } = &mut other.layers[1] {
            cfg.p_spatial = 4;
            cfg.shifts = vec![2; cfg.n_blocks];
        }
        let loaded = load_checkpoint::<f32, _>(&path).unwrap();
        let err = Model::<f32>::from_tensors(other, loaded.tensors).unwrap_err();
        match err {
            CascadeError::TensorShape { name, .. } => assert!(name.contains("l1.fc0.weight")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint::<f32, _>(&path), Err(CheckpointError::BadMagic)));

        let mut bytes = MAGIC.to_vec();
        bytes.push(9); // future version
        bytes.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32, _>(&path),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));
    }
}
