//! 8-bit grayscale frames on disk: binary PGM (P5) natively, PNG through
//! the `image` crate.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(height: usize, width: usize) -> Self {
        Gray {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("gray image", &[height, width], &[data.len()]));
        }
        Ok(Gray {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a binary PGM. 16-bit files are rejected.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Gray> {
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(decode_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| decode_err(path, format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(decode_err(path, "truncated raster"));
    }
    Gray::from_vec(height, width, bytes[start..start + n].to_vec())
}

pub fn encode_pgm(img: &Gray, maxval: u8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(path: &Path, img: &Gray, maxval: u8) -> Result<()> {
    fs::write(path, encode_pgm(img, maxval)).map_err(|e| Error::io(path, e))
}

/// Read a PGM or PNG frame, chosen by extension.
pub fn read_frame(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| decode_err(path, e.to_string()))?
                .into_luma8();
            let (w, h) = img.dimensions();
            Gray::from_vec(h as usize, w as usize, img.into_raw())
        }
        _ => parse_pgm(&bytes, path),
    }
}

pub fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm") | Some("png")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_with_comment() {
        let img = Gray::from_vec(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        let bytes = encode_pgm(&img, 255);
        assert_eq!(parse_pgm(&bytes, Path::new("x")).unwrap(), img);

        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(parse_pgm(&commented, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\0\0", Path::new("x")).is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn png_decodes_through_image_crate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("0000.png");
        let buf = image::GrayImage::from_raw(3, 2, vec![0, 255, 0, 255, 0, 255]).unwrap();
        buf.save(&p).unwrap();
        let g = read_frame(&p).unwrap();
        assert_eq!((g.height, g.width), (2, 3));
        assert_eq!(g.data, vec![0, 255, 0, 255, 0, 255]);
    }
}
