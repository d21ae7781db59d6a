//! Tensor files: a short text header followed by raw little-endian `f32`s.
//!
//! ```text
//! stmask-tensor 1
//! shape 2 64 64 3
//! dtype f32
//! endian little
//!
//! <raw bytes>
//! ```
//!
//! The header ends at the first empty line.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use stmask_core::Tensor;

const MAGIC: &str = "stmask-tensor 1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let header = format!("{MAGIC}\nshape {}\ndtype f32\nendian little\n\n", dims.join(" "));
    let mut out = Vec::with_capacity(header.len() + 4 * t.len());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let end = bytes.windows(2).position(|w| w == b"\n\n").context("tensor header is not terminated")?;
    let header = std::str::from_utf8(&bytes[..end]).context("tensor header is not UTF-8")?;
    let mut lines = header.lines();
    ensure!(lines.next() == Some(MAGIC), "not a tensor file (missing `{MAGIC}`)");
    let (mut shape, mut dtype, mut endian) = (None, None, None);
    for line in lines {
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "shape" => {
                shape = Some(
                    value
                        .split_whitespace()
                        .map(|d| d.parse::<usize>().with_context(|| format!("bad dimension `{d}`")))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "dtype" => dtype = Some(value.to_string()),
            "endian" => endian = Some(value.to_string()),
            other => bail!("unknown tensor header field `{other}`"),
        }
    }
    let shape = shape.context("tensor header lacks `shape`")?;
    ensure!(dtype.as_deref() == Some("f32"), "unsupported dtype {dtype:?}");
    ensure!(endian.as_deref() == Some("little"), "unsupported byte order {endian:?}");
    let raw = &bytes[end + 2..];
    let count: usize = shape.iter().product();
    ensure!(raw.len() == 4 * count, "tensor payload has {} bytes, shape {shape:?} needs {}", raw.len(), 4 * count);
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, encode(t)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25e7, -0.0, 1.0 / 3.0]).unwrap();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_is_text() {
        let bytes = encode(&Tensor::zeros(&[1, 2]));
        assert!(bytes.starts_with(b"stmask-tensor 1\nshape 1 2\ndtype f32\nendian little\n\n"));
        assert_eq!(bytes.len(), 51 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&Tensor::zeros(&[2]));
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(decode(b"hello\n\n").is_err());
        let f64_header = b"stmask-tensor 1\nshape 1\ndtype f64\nendian little\n\n\0\0\0\0\0\0\0\0";
        assert!(decode(f64_header).is_err());
    }

    #[test]
    fn scalar_shape() {
        let t = Tensor::scalar(2.5f32);
        assert_eq!(decode(&encode(&t)).unwrap().item(), 2.5);
    }
}
