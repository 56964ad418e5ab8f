//! Binary PGM (P5) with maxval 255, scaled to `[0, 1]`.

use std::path::Path;

use mcunet_core::Tensor;

use crate::error::{Result, TriageError};

/// Decode to a `[H, W]` tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |what: &str| TriageError::data(format!("PGM: {what}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Whitespace and `#` comments may separate header fields.
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("unsupported magic {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} {s:?}")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 supported")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    // Exactly one whitespace byte ends the header.
    if pos >= bytes.len() {
        return Err(bad("truncated header"));
    }
    let body = &bytes[pos + 1..];
    if body.len() < w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, body.len())));
    }
    if body.len() > w * h {
        return Err(bad("trailing bytes after pixel data"));
    }
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

/// Encode an `[H, W]` (or `[1, H, W]`) tensor, clamping to `[0, 1]` and
/// rounding to the nearest level.
pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        &[h, w] | &[1, h, w] => (h, w),
        other => return Err(TriageError::data(format!("PGM: cannot encode shape {other:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| TriageError::io(path, e))?;
    decode(&bytes).map_err(|e| TriageError::data(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| TriageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_payload() {
        let t = decode(b"P5\n2 2\n255\n\x00\x33\xff\x80").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 51.0 / 255.0, 1.0, 128.0 / 255.0]);
    }

    #[test]
    fn comments_in_header() {
        let t = decode(b"P5 # made by hand\n# another\n1 1 255\n\x01").unwrap();
        assert_eq!(t.data(), &[1.0 / 255.0]);
    }

    #[test]
    fn round_trip_within_one_level() {
        let mut r = mcunet_core::RngStream::new(1, 1);
        let t = Tensor::from_fn(&[7, 5], |_| r.uniform_f32()).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert!(t.max_abs_diff(&back) <= 1.0 / 255.0);
        let zeros = Tensor::zeros(&[3, 3]);
        assert_eq!(decode(&encode(&zeros).unwrap()).unwrap(), zeros);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(decode(b"P5\n2 2\n65535\n").is_err());
        assert!(decode(b"P5\n2").is_err());
        assert!(decode(b"").is_err());
    }
}
