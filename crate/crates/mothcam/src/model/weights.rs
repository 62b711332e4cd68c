//! Binary weight file format.
//!
//! Little-endian layout, no padding, no compression:
//!
//! ```text
//! magic "PDNW" (4 bytes)
//! format version u16 = 1
//! layer count u32                      (layers that own tensors)
//! per layer:
//!   name length u16, UTF-8 name
//!   tensor count u8
//!   per tensor:
//!     rank u8, dims u32 each, raw f32 IEEE-754 values
//! ```
//!
//! The file carries weights only; loading requires an architecture skeleton
//! (from a builder or an optimizer pipeline replay) whose layer names and
//! tensor shapes the file must match exactly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::ModelGraph;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"PDNW";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weight file i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:02x?}, not a weight file")]
    BadMagic([u8; 4]),
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u16),
    #[error("weight file truncated")]
    Truncated,
    #[error("weight file layer '{0}' does not exist in the target model")]
    UnexpectedLayer(String),
    #[error("no weights in file for model layer '{0}'")]
    MissingLayer(String),
    #[error("shape mismatch for layer '{layer}' tensor {tensor}: model expects {expected:?}, file has {got:?}")]
    ShapeMismatch {
        layer: String,
        tensor: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("malformed weight file: {0}")]
    Malformed(String),
}

pub fn save(model: &ModelGraph, path: &Path) -> Result<(), WeightsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let weighted: Vec<_> = model.iter_weights().collect();
    w.write_all(&(weighted.len() as u32).to_le_bytes())?;
    for (layer, tensors) in weighted {
        let name = layer.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[tensors.len() as u8])?;
        for t in tensors {
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], WeightsError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                WeightsError::Truncated
            } else {
                WeightsError::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
}

/// Replaces the skeleton's weights with the file contents, in file order.
pub fn load_into(model: &mut ModelGraph, path: &Path) -> Result<(), WeightsError> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.bytes::<4>()?;
    if magic != MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let layer_count = r.u32()?;
    let mut seen: Vec<String> = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let name_len = r.u16()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.inner.read_exact(&mut name_buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                WeightsError::Truncated
            } else {
                WeightsError::Io(e)
            }
        })?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| WeightsError::Malformed("layer name is not UTF-8".into()))?;
        let tensor_count = r.u8()? as usize;

        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(r.bytes()?));
            }
            tensors.push(
                Tensor::new(shape, data)
                    .map_err(|e| WeightsError::Malformed(e.to_string()))?,
            );
        }

        let expected = model
            .weights_of(&name)
            .ok_or_else(|| WeightsError::UnexpectedLayer(name.clone()))?;
        if expected.len() != tensors.len() {
            return Err(WeightsError::Malformed(format!(
                "layer '{name}' has {} tensors in file, model expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (i, (have, want)) in tensors.iter().zip(expected).enumerate() {
            if have.shape() != want.shape() {
                return Err(WeightsError::ShapeMismatch {
                    layer: name.clone(),
                    tensor: i,
                    expected: want.shape().to_vec(),
                    got: have.shape().to_vec(),
                });
            }
        }
        *model.weights_of_mut(&name).expect("checked above") = tensors;
        seen.push(name);
    }
    // every weighted model layer must have been covered
    let missing: Option<String> = model
        .iter_weights()
        .map(|(l, _)| l.name.clone())
        .find(|n| !seen.contains(n));
    if let Some(name) = missing {
        return Err(WeightsError::MissingLayer(name));
    }
    Ok(())
}
