use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Format with 17 significant digits, enough for an exact f64 round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `body` followed by a `#crc <hex>` trailer covering every preceding byte.
pub(crate) fn write_with_crc(path: &Path, mut body: String) -> Result<()> {
    let crc = crc32fast::hash(body.as_bytes());
    body.push_str(&format!("#crc {crc:08x}\n"));
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Read a file written by [`write_with_crc`], verify the trailer and return
/// the body without it.
pub(crate) fn read_with_crc(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Checksum {
        path: path.to_path_buf(),
        reason: "file is not valid UTF-8".into(),
    })?;
    let trimmed = text.strip_suffix('\n').unwrap_or(&text);
    let (body_len, last) = match trimmed.rfind('\n') {
        Some(i) => (i + 1, &trimmed[i + 1..]),
        None => (0, trimmed),
    };
    let fail = |reason: &str| Error::Checksum {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let hex = last
        .strip_prefix("#crc ")
        .ok_or_else(|| fail("missing #crc trailer (truncated file?)"))?;
    let expected =
        u32::from_str_radix(hex.trim(), 16).map_err(|_| fail("malformed #crc trailer"))?;
    let body = &text[..body_len];
    let actual = crc32fast::hash(body.as_bytes());
    if actual != expected {
        return Err(fail(&format!(
            "expected {expected:08x}, computed {actual:08x}"
        )));
    }
    Ok(body.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, std::f64::consts::PI] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn crc_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        write_with_crc(&p, "hello\nworld\n".into()).unwrap();
        assert_eq!(read_with_crc(&p).unwrap(), "hello\nworld\n");
        let text = fs::read_to_string(&p).unwrap().replace("world", "w0rld");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_with_crc(&p), Err(Error::Checksum { .. })));
        fs::write(&p, "hello\nwor").unwrap();
        assert!(matches!(read_with_crc(&p), Err(Error::Checksum { .. })));
    }
}
