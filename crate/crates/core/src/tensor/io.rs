//! Named tensor container.
//!
//! Layout (little-endian): `"CRNNPARM"`, `u32` version, then zero or more
//! records `{u32 name_len, name bytes (UTF-8), u32 rank, rank x u32 dims,
//! prod(dims) x f32}` until end of stream.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{self, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CRNNPARM";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "tensor container",
        detail: detail.into(),
    }
}

pub fn write_tensors<T: Scalar, W: Write>(mut w: W, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<T: Scalar, R: Read>(mut r: R) -> Result<NamedTensors<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| bad(format!("truncated data for '{name}'")))?;
            data.push(T::lit(v as f64));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors<T: Scalar>(path: impl AsRef<Path>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(io::BufWriter::new(f), tensors)
}

pub fn load_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<NamedTensors<T>> {
    let f = std::fs::File::open(path)?;
    read_tensors(io::BufReader::new(f))
}
