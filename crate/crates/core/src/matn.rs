//! MATN binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MATN"            4 bytes magic
//! version  u32      = 1
//! rank     u32
//! dims     rank × u64
//! dtype    u8       0 = f32, 1 = f64
//! payload           row-major elements, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 4] = b"MATN";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum MatnData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatnTensor {
    pub dims: Vec<u64>,
    pub data: MatnData,
}

fn format_err(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        field,
        msg: msg.into(),
    }
}

impl MatnTensor {
    pub fn new<T: Element>(dims: Vec<u64>, data: Vec<T>) -> Result<Self> {
        let count: u64 = dims.iter().product();
        if count != data.len() as u64 {
            return Err(format_err(
                "dims",
                format!("dims {dims:?} describe {count} elements, got {}", data.len()),
            ));
        }
        let data = match T::DTYPE {
            DType::F32 => MatnData::F32(data.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => MatnData::F64(data.iter().map(|x| x.as_f64()).collect()),
        };
        Ok(Self { dims, data })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            MatnData::F32(_) => DType::F32,
            MatnData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            MatnData::F32(v) => v.len(),
            MatnData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Payload converted to `T`.
    pub fn to_vec<T: Element>(&self) -> Vec<T> {
        match &self.data {
            MatnData::F32(v) => v.iter().map(|&x| T::of_f64(x as f64)).collect(),
            MatnData::F64(v) => v.iter().map(|&x| T::of_f64(x)).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&[self.dtype().code()])?;
        match &self.data {
            MatnData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            MatnData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_field(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(format_err("magic", format!("expected \"MATN\", found {magic:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(format_err("version", format!("unsupported version {version}")));
        }
        let rank = read_u32(r, "rank")?;
        if rank > MAX_RANK {
            return Err(format_err("rank", format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_field(r, &mut b, "dims")?;
            dims.push(u64::from_le_bytes(b));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err("dims", format!("element count of {dims:?} overflows")))?;
        let mut code = [0u8; 1];
        read_field(r, &mut code, "dtype")?;
        let width = match code[0] {
            0 => 4,
            1 => 8,
            c => return Err(format_err("dtype", format!("unknown dtype code {c}"))),
        };
        let bytes = count
            .checked_mul(width)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| format_err("dims", "payload size does not fit in memory"))?;
        let mut payload = Vec::new();
        r.take(bytes as u64).read_to_end(&mut payload)?;
        if payload.len() != bytes {
            return Err(format_err(
                "payload",
                format!("expected {bytes} bytes, found {}", payload.len()),
            ));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(format_err("payload", "trailing bytes after payload"));
        }
        let data = if width == 4 {
            MatnData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            MatnData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        Ok(Self { dims, data })
    }
}

fn read_field(r: &mut impl Read, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(field, "file ends inside this field"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, field: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_field(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read(path: impl AsRef<Path>) -> Result<MatnTensor> {
    MatnTensor::read_from(&mut BufReader::new(File::open(path)?))
}

pub fn write(path: impl AsRef<Path>, t: &MatnTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &MatnTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout_is_exact() {
        let t = MatnTensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&t);
        let mut want = b"MATN".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.push(0);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn errors_name_the_field() {
        let good = encode(&MatnTensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let field_of = |bytes: &[u8]| match MatnTensor::read_from(&mut &bytes[..]) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field_of(&bad), "magic");

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(field_of(&bad), "version");

        let mut bad = good.clone();
        bad[8] = 200;
        assert_eq!(field_of(&bad), "rank");

        assert_eq!(field_of(&good[..14]), "dims");

        let mut bad = good.clone();
        bad[20] = 7;
        assert_eq!(field_of(&bad), "dtype");

        assert_eq!(field_of(&good[..good.len() - 1]), "payload");

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(field_of(&bad), "payload");
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1u64..5, 0..4), seed in any::<u32>(), wide in any::<bool>()) {
            let count: u64 = dims.iter().product();
            let vals: Vec<f64> = (0..count).map(|i| (i as f64 + seed as f64) * 0.37 - 3.0).collect();
            let t = if wide {
                MatnTensor::new(dims.clone(), vals).unwrap()
            } else {
                MatnTensor::new(dims.clone(), vals.iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap()
            };
            let back = MatnTensor::read_from(&mut &encode(&t)[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
