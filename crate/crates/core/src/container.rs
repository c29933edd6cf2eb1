//! Flat parameter container: a JSON header followed by raw little-endian
//! `f64` values.
//!
//! Layout: magic `OCAIPRM1`, `u32` header length, UTF-8 JSON header,
//! `u64` value count, values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OCAIPRM1";

pub fn write<W: Write>(mut w: W, header: &serde_json::Value, params: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Container("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * 8 {
        return Err(Error::Container(format!("expected {} parameter bytes, found {}", n * 8, raw.len())));
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let header = serde_json::json!({"kind": "test", "shape": [2, 3]});
        let params = vec![1.5, -0.0, f64::MIN_POSITIVE];
        let mut buf = Vec::new();
        write(&mut buf, &header, &params).unwrap();
        let (h, p) = read(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), params.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(read(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read(&buf[..]).is_err());
    }
}
