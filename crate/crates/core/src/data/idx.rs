//! IDX files (the MNIST container): big-endian header, unsigned-byte payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

/// An n-dimensional unsigned-byte array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Usage(format!("IDX dims {dims:?} overflow")))?;
        if dims.is_empty() || dims.len() > 255 || n != data.len() || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Usage(format!("IDX dims {dims:?} do not match {} bytes", data.len())));
        }
        Ok(Self { dims, data })
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Parses raw or gzip-wrapped IDX bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| parse_err(0, format!("bad gzip stream: {e}")))?;
        return parse_raw(&raw);
    }
    parse_raw(bytes)
}

fn parse_raw(b: &[u8]) -> Result<IdxArray> {
    if b.len() < 4 {
        return Err(parse_err(b.len(), format!("expected a 4-byte magic, file has {} bytes", b.len())));
    }
    if b[0] != 0 || b[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", b[0], b[1], b[2], b[3])));
    }
    if b[2] != UBYTE {
        return Err(parse_err(2, format!("unsupported element type 0x{:02x} (only unsigned bytes)", b[2])));
    }
    let ndim = b[3] as usize;
    if ndim == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if b.len() < header {
        return Err(parse_err(
            b.len(),
            format!("truncated header: expected {header} bytes, got {}", b.len()),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count = 1usize;
    for i in 0..ndim {
        let off = 4 + 4 * i;
        let d = u32::from_be_bytes(b[off..off + 4].try_into().expect("4 bytes")) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| parse_err(off, format!("dimension sizes overflow at dim {i}")))?;
        dims.push(d);
    }
    let expected = header
        .checked_add(count)
        .ok_or_else(|| parse_err(header, "payload size overflows"))?;
    if b.len() < expected {
        return Err(parse_err(
            b.len(),
            format!("truncated payload: expected {expected} bytes, got {}", b.len()),
        ));
    }
    if b.len() > expected {
        return Err(parse_err(expected, format!("{} trailing bytes", b.len() - expected)));
    }
    Ok(IdxArray {
        dims,
        data: b[header..].to_vec(),
    })
}

pub fn encode_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * a.dims.len() + a.data.len());
    out.extend_from_slice(&[0, 0, UBYTE, a.dims.len() as u8]);
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

/// Writes `a`, gzip-compressed when the path ends in `.gz`.
pub fn write_idx(path: &Path, a: &IdxArray) -> Result<()> {
    let bytes = encode_idx(a);
    let mut f = fs::File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(f, Compression::default());
        gz.write_all(&bytes)?;
        gz.finish()?;
    } else {
        f.write_all(&bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_image_file() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 200];
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, vec![1, 1, 1]);
        assert_eq!(a.data, vec![200]);
        assert_eq!(encode_idx(&a), bytes);
    }

    #[test]
    fn truncation_names_lengths() {
        let mut bytes = encode_idx(&IdxArray::new(vec![2, 3], vec![1; 6]).unwrap());
        bytes.pop();
        match parse_idx(&bytes) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 17);
                assert!(msg.contains("expected 18") && msg.contains("got 17"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Parse { .. })));
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn huge_dims_overflow() {
        let mut b = vec![0, 0, 8, 3];
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        match parse_idx(&b) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("overflow") || msg.contains("truncated")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gzip_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = IdxArray::new(vec![4], vec![0, 1, 2, 255]).unwrap();
        for name in ["l.idx", "l.idx.gz"] {
            let p = dir.path().join(name);
            write_idx(&p, &a).unwrap();
            assert_eq!(read_idx(&p).unwrap(), a);
        }
    }
}
