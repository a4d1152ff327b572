//! Binary container: magic, format version, scalar width, layer sizes, seed,
//! then each layer's weights (input-major) and biases, little-endian.

use std::fs;
use std::path::Path;

use super::{Layer, Mlp, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"QMLP";
pub const FORMAT_VERSION: u16 = 1;

impl<T: Scalar> Mlp<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.sizes();
        let mut out = Vec::with_capacity(24 + 4 * sizes.len() + self.n_params() * T::BYTES as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::BYTES);
        out.push(0);
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.params().flatten() {
            v.to_le(&mut out);
        }
        out
    }

    /// Decodes a container written with any supported scalar width.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::ModelFormat("not a network file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let width = r.take(2)?[0];
        let n_sizes = r.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::ModelFormat(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let mut net = Self::zeros(&sizes).map_err(|e| Error::ModelFormat(e.to_string()))?;
        net.seed = seed;
        let read = |r: &mut Reader| -> Result<T> {
            Ok(match width {
                4 => T::from(f32::from_le(r.take(4)?)).unwrap(),
                8 => T::from(f64::from_le(r.take(8)?)).unwrap(),
                w => return Err(Error::ModelFormat(format!("unsupported scalar width {w}"))),
            })
        };
        for Layer { w, b, .. } in net.layers_mut() {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = read(&mut r)?;
            }
        }
        if r.at != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the input width against the caller's feature layout.
    pub fn load_expecting(path: impl AsRef<Path>, input_dim: usize) -> Result<Self> {
        let net = Self::load(path)?;
        net.check_input_dim(input_dim)?;
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let s = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.at)))?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
