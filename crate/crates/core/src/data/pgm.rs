//! Binary portable graymap (P5, 8-bit) reader/writer.
//!
//! Images quantize to 256 levels; masks use exactly {0, 255} and any other
//! payload value is rejected so masks stay strictly binary.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialize a `[H, W]` tensor with values in [0,1] to 8-bit P5.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!(
            "save_image expects a 2-d tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .to_vec()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Serialize a strictly binary `[H, W]` mask as {0, 255}.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!(
            "save_mask expects a 2-d tensor, got {shape:?}"
        )));
    }
    let data = mask.to_vec();
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("mask values must be exactly 0 or 1".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| if v == 1.0 { 255u8 } else { 0u8 }));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a P5 graymap as a `[H, W]` tensor scaled into [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_p5(&bytes)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(&[h, w], data)
}

/// Load a P5 graymap as a strictly binary `[H, W]` mask; payload bytes other
/// than 0 and 255 are a parse error.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_p5(&bytes)?;
    let header_len = bytes.len() - payload.len();
    let mut data = Vec::with_capacity(payload.len());
    for (i, &b) in payload.iter().enumerate() {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Parse {
                    offset: header_len + i,
                    msg: format!("mask byte must be 0 or 255, got {other}"),
                })
            }
        }
    }
    Tensor::from_vec(&[h, w], data)
}

/// Parse a binary P5 header + payload, reporting byte offsets on failure.
fn parse_p5(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut pos = 0usize;
    let err = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(err(pos, "expected magic `P5`"));
    }
    pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and `#` comment lines
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if start == pos {
            return Err(err(pos, "expected decimal field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace before payload")),
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err(pos, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    let need = w * h;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            &format!("payload truncated: need {need} bytes, have {}", payload.len()),
        ));
    }
    Ok((w, h, &payload[..need]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("promptseg-pgm-{}-{name}", std::process::id()))
    }

    #[test]
    fn zero_and_checkerboard_masks_roundtrip_exactly() {
        let zero = Tensor::zeros(&[4, 4]);
        let p = tmp("zero.pgm");
        save_mask(&p, &zero).unwrap();
        assert_eq!(load_mask(&p).unwrap().to_vec(), zero.to_vec());

        let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let mask = Tensor::from_vec(&[4, 4], board.clone()).unwrap();
        let p = tmp("board.pgm");
        save_mask(&p, &mask).unwrap();
        assert_eq!(load_mask(&p).unwrap().to_vec(), board);
    }

    #[test]
    fn grayscale_roundtrips_within_quantization() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 17.3).sin().abs()).collect();
        let img = Tensor::from_vec(&[8, 8], data.clone()).unwrap();
        let p = tmp("gray.pgm");
        save_image(&p, &img).unwrap();
        let rt = load_image(&p).unwrap().to_vec();
        for (a, b) in data.iter().zip(rt) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let p = tmp("bad.pgm");
        std::fs::write(&p, b"P6\n2 2\n255\n----").unwrap();
        match load_image(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other}"),
        }
        std::fs::write(&p, b"P5\n4 4\n255\nshort").unwrap();
        match load_image(&p).unwrap_err() {
            Error::Parse { offset, msg } => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mask_loader_rejects_gray_values() {
        let p = tmp("gray-mask.pgm");
        std::fs::write(&p, b"P5\n2 1\n255\n\x00\x80").unwrap();
        match load_mask(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let p = tmp("comment.pgm");
        std::fs::write(&p, b"P5\n# generated\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), vec![2, 2]);
        assert_eq!(img.to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}
