use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STFI_MAGIC: &[u8; 4] = b"STFI";

/// `M x T x K` log-spectral image, stored channel-major then
/// frequency-major (`data[(k * M + m) * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroImage {
    pub m: usize,
    pub t: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl SpectroImage {
    pub fn new(m: usize, t: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != m * t * k {
            return Err(Error::Format {
                what: "spectro image",
                detail: format!("{m}x{t}x{k} needs {} values, got {}", m * t * k, data.len()),
            });
        }
        Ok(Self { m, t, k, data })
    }

    /// Stacks equally sized `M x T` matrices as channels.
    pub fn from_channels(channels: &[Matrix]) -> Self {
        let (m, t) = (channels[0].rows, channels[0].cols);
        let mut data = Vec::with_capacity(m * t * channels.len());
        for c in channels {
            assert_eq!((c.rows, c.cols), (m, t));
            data.extend(c.data.iter().map(|&v| v as f32));
        }
        Self {
            m,
            t,
            k: channels.len(),
            data,
        }
    }

    pub fn get(&self, m: usize, t: usize, k: usize) -> f32 {
        self.data[(k * self.m + m) * self.t + t]
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        &self.data[k * self.m * self.t..(k + 1) * self.m * self.t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `K x M x T` tensor (the network's per-sample input layout).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [self.k, self.m, self.t],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("consistent dims")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STFI_MAGIC)?;
        for d in [self.m, self.t, self.k] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "STFI image",
            detail: d.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != STFI_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        }
        let n = dims.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| bad("truncated data"))?;
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Several images in one stream (a recording's segments), each in STFI form.
pub fn write_images<W: Write>(mut w: W, images: &[SpectroImage]) -> Result<()> {
    w.write_u32::<LittleEndian>(images.len() as u32)?;
    for im in images {
        im.write_to(&mut w)?;
    }
    Ok(())
}

pub fn read_images<R: Read>(mut r: R) -> Result<Vec<SpectroImage>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n).map(|_| SpectroImage::read_from(&mut r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stfi_layout() {
        let im = SpectroImage::new(2, 3, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let mut buf = Vec::new();
        im.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"STFI");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        // channel 1, frequency 0, frame 2 is value (1*2+0)*3+2 = 8
        assert_eq!(im.get(0, 2, 1), 8.0);
        assert_eq!(&buf[16 + 8 * 4..16 + 9 * 4], &8f32.to_le_bytes());
        assert_eq!(SpectroImage::read_from(&buf[..]).unwrap(), im);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let im = SpectroImage::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        im.write_to(&mut buf).unwrap();
        assert!(SpectroImage::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(SpectroImage::read_from(&b"XXXX"[..]).is_err());
    }
}
