//! `.pst` tensor files: magic "PST1", u32 little-endian rank, u32 dims,
//! then row-major 32-bit little-endian floats.
//!
//! The format carries mel-spectrograms, F0 tracks, energy curves, duration
//! vectors and context tensors between the CLI tools and any external
//! exporter.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::Mat;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PST1";

#[derive(Clone, Debug, PartialEq)]
pub struct PstTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl PstTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims must match data length");
        PstTensor { dims, data }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn from_mat(m: &Mat) -> Self {
        PstTensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vec1(v: &[f64]) -> Self {
        PstTensor { dims: vec![v.len()], data: v.iter().map(|&x| x as f32).collect() }
    }

    /// Interpret as a matrix; rank-1 becomes Nx1.
    pub fn to_mat(&self) -> Result<Mat> {
        let (rows, cols) = match self.dims.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Shape(format!(
                    "expected rank 1 or 2 tensor, got rank {}",
                    other.len()
                )))
            }
        };
        Ok(Mat::from_vec(rows, cols, self.data.iter().map(|&v| v as f64).collect()))
    }

    pub fn to_vec1(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Shape(format!(
                "expected rank 1 tensor, got rank {}",
                self.dims.len()
            )));
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }
}

pub fn write(path: &Path, t: &PstTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read(path: &Path) -> Result<PstTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse(&bytes).map_err(|msg| Error::format(path.display().to_string(), msg))
}

fn parse(bytes: &[u8]) -> std::result::Result<PstTensor, String> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err("not a PST1 tensor file".into());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err("truncated dimension header".into());
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(format!(
            "payload size mismatch: dims {:?} imply {} bytes, file has {}",
            dims,
            expected,
            bytes.len()
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(PstTensor { dims, data })
}

/// Write via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse(b"nope").is_err());
        assert!(parse(b"PST1\x01\x00\x00\x00").is_err());
        // rank 1, dim 2, but only one float
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(parse(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in any::<u32>(),
        ) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| ((i as u32).wrapping_mul(seed.wrapping_add(7)) as f32) * 1e-3 - 1.0)
                .collect();
            let t = PstTensor::new(vec![rows, cols], data);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.pst");
            write(&p, &t).unwrap();
            let back = read(&p).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
