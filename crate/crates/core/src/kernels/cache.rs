//! Binary kernel container: 8-byte magic, `n` as u64, label code, normalized
//! flag, then `n²` row-major f64 values. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{KernelLabel, KernelMatrix};
use crate::error::{Error, Result};

pub const KERNEL_MAGIC: [u8; 8] = *b"SKKERN01";

const HEADER_LEN: usize = 8 + 8 + 1 + 1;

pub fn write_kernel(path: &Path, k: &KernelMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let n = k.dim();
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&KERNEL_MAGIC);
    header.extend_from_slice(&(n as u64).to_le_bytes());
    header.push(k.label.code());
    header.push(k.normalized as u8);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for i in 0..n {
        for j in 0..n {
            w.write_all(&k.matrix[(i, j)].to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_kernel(path: &Path) -> Result<KernelMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Validation(format!("{}: {msg}", path.display()));

    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| bad("truncated header".into()))?;
    if header[..8] != KERNEL_MAGIC {
        return Err(bad("not a kernel file (bad magic)".into()));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let label = KernelLabel::from_code(header[16])
        .ok_or_else(|| bad(format!("unknown label code {}", header[16])))?;
    let normalized = match header[17] {
        0 => false,
        1 => true,
        other => return Err(bad(format!("bad normalized flag {other}"))),
    };
    let n = usize::try_from(n).map_err(|_| bad(format!("dimension {n} too large")))?;
    let cells = n
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| bad(format!("dimension {n} too large")))?;

    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != cells {
        return Err(bad(format!(
            "expected {cells} payload bytes for n = {n}, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(KernelMatrix::new(
        label,
        DMatrix::from_row_slice(n, n, &values),
        normalized,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let m =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.1, -0.3, 0.1, 2.5, 1e-300, -0.3, 1e-300, 7.0]);
        let k = KernelMatrix::new(KernelLabel::Ct, m, false);
        write_kernel(&path, &k).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 18 + 9 * 8);
        assert_eq!(read_kernel(&path).unwrap(), k);
    }

    #[test]
    fn layout_is_row_major_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        write_kernel(&path, &KernelMatrix::new(KernelLabel::Dem, m, true)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &KERNEL_MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(bytes[16], KernelLabel::Dem.code());
        assert_eq!(bytes[17], 1);
        let second = f64::from_le_bytes(bytes[26..34].try_into().unwrap());
        assert_eq!(second, 2.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let k = KernelMatrix::new(KernelLabel::Ones, DMatrix::from_element(2, 2, 1.0), true);
        write_kernel(&path, &k).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_kernel(&path).is_err());

        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_kernel(&path).is_err());

        std::fs::write(&path, b"short").unwrap();
        assert!(read_kernel(&path).is_err());
    }
}
