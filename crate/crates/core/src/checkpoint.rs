//! Weight checkpoints: a small self-describing binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "MRUN"
//! version u32      currently 1
//! count   u32      number of tensors
//! then per tensor, sorted by name:
//!   name_len u16, name (UTF-8), rank u8, dims u32 x rank,
//!   values f32 x product(dims), row-major
//! ```
//!
//! Values are stored as `f32` regardless of the in-memory scalar type.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ArchitectureSpec, Model};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MRUN";
const VERSION: u32 = 1;

/// Serialize `model`'s parameters to `path`.
pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(model.params().len())
        .map_err(|_| Error::Format("too many tensors for checkpoint".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in model.params() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name:?}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Format(format!("rank too large for {name:?}")))?;
        w.write_all(&[rank])?;
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension too large in {name:?}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint and bind it to `spec`, validating that the stored
/// tensors are exactly the parameters that architecture expects.
pub fn load_weights<T: Scalar>(path: &Path, spec: &ArchitectureSpec) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, not a weight checkpoint",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;

    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut r, &mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r, "dimension")? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("shape overflow in {name:?}")))?;
            shape.push(d);
        }
        let mut bytes = vec![0u8; n * 4];
        read_exact(&mut r, &mut bytes, "tensor values")?;
        let data: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("bad tensor {name:?}: {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing data after last tensor".into()));
    }

    Model::from_params(*spec, params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, Variant};

    fn spec() -> ArchitectureSpec {
        ArchitectureSpec::new(Variant::Unet, 1, 1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 123).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights::<f32>(&path, &spec()).unwrap();
        assert_eq!(model.params().len(), loaded.params().len());
        for (name, t) in model.params() {
            let l = &loaded.params()[name];
            assert_eq!(t.shape(), l.shape());
            for (a, b) in t.data().iter().zip(l.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} differs");
            }
        }
    }

    #[test]
    fn header_layout_is_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"MRUN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            model.params().len() as u32
        );
        // First tensor name follows, length-prefixed and sorted first.
        let len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let first = std::str::from_utf8(&bytes[14..14 + len]).unwrap();
        assert_eq!(first, model.params().keys().next().unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &spec()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unsupported_version_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &spec()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &spec()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &spec()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_architecture_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let model = build_model::<f32>(spec(), 0).unwrap();
        save_weights(&model, &path).unwrap();
        let mr = ArchitectureSpec::new(Variant::Mrunet, 1, 1).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &mr),
            Err(Error::Incompatible(_))
        ));
        let wider = ArchitectureSpec::new(Variant::Unet, 2, 1).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &wider),
            Err(Error::Incompatible(_))
        ));
    }
}
