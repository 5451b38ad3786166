//! Binary tensor files: magic `WLTN`, a version byte, a `u8` rank, `u32`
//! little-endian extents, then the `f64` little-endian row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"WLTN";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(tensor: &Tensor, mut out: W) -> std::io::Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[TENSOR_VERSION, rank])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses a tensor; the error string describes what was malformed.
pub fn read_tensor<R: Read>(mut input: R) -> std::result::Result<Tensor, String> {
    let mut header = [0u8; 6];
    input
        .read_exact(&mut header)
        .map_err(|e| format!("truncated header: {e}"))?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(format!("bad magic {:?}", &header[..4]));
    }
    if header[4] != TENSOR_VERSION {
        return Err(format!("unsupported version {}", header[4]));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        input
            .read_exact(&mut word)
            .map_err(|e| format!("truncated extents: {e}"))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 8];
    input
        .read_exact(&mut payload)
        .map_err(|e| format!("truncated payload: {e}"))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after payload".into());
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor_file(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(tensor, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file)).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"WLTN");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..22], &1.0f64.to_le_bytes());
        assert_eq!(&buf[22..30], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 30);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensor(&b"XXXX\x01\x00"[..]).is_err());
        let t = Tensor::full(&[3], 1.0);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.pop();
        assert!(read_tensor(&buf[..]).unwrap_err().contains("truncated"));
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|i| (seed.wrapping_add(i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&t, &mut buf).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
