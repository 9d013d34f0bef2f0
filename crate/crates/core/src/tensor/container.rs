//! Flat named-array container used for parameters, model bundles and fields.
//!
//! All integers are little-endian `u32`; values are little-endian IEEE-754 `f32`.
//!
//! ```text
//! magic        4 bytes  "ACRG"
//! version      u32      1
//! header_len   u32      byte length of the header text
//! header       UTF-8    "key=value\n" lines (may be empty)
//! array_count  u32
//! per array:
//!   name_len   u32
//!   name       UTF-8
//!   rank       u32      1..=4
//!   extents    rank x u32
//!   values     prod(extents) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"ACRG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_array<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.push((name.into(), t.cast()));
    }

    pub fn arrays_as<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.arrays.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, header.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_text = read_string(&mut r)?;
        let mut header = Vec::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Format(format!("array {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            read_exact(&mut r, &mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        Ok(Container { header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated container: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("non UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let mut c = Container { header: vec![("arch".into(), "x".into())], arrays: vec![] };
        c.push_array("w", &Tensor::<f64>::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let mut want = b"ACRG".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(7u32.to_le_bytes());
        want.extend(b"arch=x\n");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"w");
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::read_from(&b"NOPE"[..]).is_err());
        assert!(Container::read_from(&b"ACRG\x01\x00\x00\x00\xff"[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 1..=4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| (i as f32 + seed as f32).sin());
            let mut c = Container::default();
            c.header.push(("seed".into(), seed.to_string()));
            c.push_array("t", &t);
            let mut bytes = Vec::new();
            c.write_to(&mut bytes).unwrap();
            prop_assert_eq!(Container::read_from(&bytes[..]).unwrap(), c);
        }
    }
}
