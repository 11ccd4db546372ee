//! Binary container used by checkpoints and dataset caches:
//! 8-byte magic, 1-byte version, u64 LE header length, UTF-8 JSON header,
//! then a little-endian f64 blob.

use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u8 = 1;

pub fn encode(magic: &[u8; 8], header: &serde_json::Value, blob: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(17 + json.len() + 8 * blob.len());
    out.extend_from_slice(magic);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(path: &Path, magic: &[u8; 8], bytes: &[u8]) -> Result<(serde_json::Value, Vec<f64>)> {
    let name = path.display().to_string();
    let truncated = |detail: &str| Error::Truncated {
        path: name.clone(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 {
        return Err(truncated("missing magic"));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: name,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let version = *bytes.get(8).ok_or_else(|| truncated("missing version byte"))?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: name, version });
    }
    let len_bytes: [u8; 8] = bytes
        .get(9..17)
        .ok_or_else(|| truncated("missing header length"))?
        .try_into()
        .expect("eight bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated("header length overflow"))?;
    let header_end = 17usize.checked_add(header_len).ok_or_else(|| truncated("header length overflow"))?;
    let header_bytes = bytes.get(17..header_end).ok_or_else(|| truncated("header shorter than declared"))?;
    let header: serde_json::Value = serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
        path: name.clone(),
        detail: format!("header is not valid JSON: {e}"),
    })?;
    let rest = &bytes[header_end..];
    if rest.len() % 8 != 0 {
        return Err(truncated("blob is not a whole number of f64 values"));
    }
    let blob = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
    Ok((header, blob))
}

pub fn write(path: &Path, magic: &[u8; 8], header: &serde_json::Value, blob: &[f64]) -> Result<()> {
    let bytes = encode(magic, header, blob)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(serde_json::Value, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTMAG1";

    #[test]
    fn roundtrip_and_corruption() {
        let header = serde_json::json!({"a": 1});
        let blob = [1.5, -0.0, f64::MIN_POSITIVE];
        let bytes = encode(MAGIC, &header, &blob).unwrap();
        let p = Path::new("mem");
        let (h, b) = decode(p, MAGIC, &bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), blob.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        assert!(matches!(decode(p, MAGIC, &bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(p, MAGIC, &bytes[..12]), Err(Error::Truncated { .. })));
        let mut bumped = bytes.clone();
        bumped[8] = 2;
        assert!(matches!(decode(p, MAGIC, &bumped), Err(Error::UnsupportedVersion { version: 2, .. })));
        assert!(matches!(decode(p, b"OTHERMAG", &bytes), Err(Error::BadMagic { .. })));
    }
}
