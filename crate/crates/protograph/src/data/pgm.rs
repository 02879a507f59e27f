//! Minimal binary PGM (P5, maxval 255) reader and writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::DataError;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DataError> {
    if pixels.len() != width * height {
        return Err(DataError::Image(format!(
            "pgm write: {}x{} wants {} bytes, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = take_token(&bytes, &mut pos)
        .ok_or_else(|| DataError::Image(format!("{}: empty file", path.display())))?;
    if magic != b"P5" {
        return Err(DataError::Image(format!(
            "{}: not a binary PGM (magic {:?})",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let width = take_usize(&bytes, &mut pos, path, "width")?;
    let height = take_usize(&bytes, &mut pos, path, "height")?;
    let maxval = take_usize(&bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(DataError::Image(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let want = width * height;
    if bytes.len() < pos + want {
        return Err(DataError::Image(format!(
            "{}: payload truncated ({} of {} bytes)",
            path.display(),
            bytes.len().saturating_sub(pos),
            want
        )));
    }
    Ok((width, height, bytes[pos..pos + want].to_vec()))
}

/// Next whitespace-delimited token, skipping `#` comment lines.
fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn take_usize(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize, DataError> {
    let tok = take_token(bytes, pos)
        .ok_or_else(|| DataError::Image(format!("{}: missing {what}", path.display())))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Image(format!("{}: bad {what}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        let pixels: Vec<u8> = (0..(7 * 5)).map(|i| (i * 11 % 256) as u8).collect();
        write_pgm(&p, 7, 5, &pixels).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (7, 5));
        assert_eq!(back, pixels);
    }

    #[test]
    fn comment_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&p, bytes).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![1, 2, 3, 4]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\nhi").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
