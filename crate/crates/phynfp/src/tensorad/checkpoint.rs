//! Raw parameter blobs: little-endian `f64`, one file per tensor.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_blob(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.numel() * 8);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_blob(path: &Path, shape: Vec<usize>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Schema(format!(
            "{}: expected {} bytes for shape {shape:?}, found {}",
            path.display(),
            numel * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 3e5, -0.0, 7.25]).unwrap();
        write_blob(&path, &t).unwrap();
        let back = read_blob(&path, vec![2, 3]).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(read_blob(&path, vec![7]).is_err());
    }
}
