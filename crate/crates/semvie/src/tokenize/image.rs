//! In-memory images and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with pixels in `[0, 1]`, row-major `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    /// Solid-color canvas.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Image {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Encode as binary PPM: `P6`, width, height, maxval 255, then raw RGB bytes.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments between header fields.
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
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if next_token(bytes)? != "P6" {
        return Err(Error::Format("not a binary ppm (missing P6 magic)".into()));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad ppm header field {s:?}")))
    };
    let width = parse(next_token(bytes)?)?;
    let height = parse(next_token(bytes)?)?;
    let maxval = parse(next_token(bytes)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported ppm maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero-sized ppm".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "ppm payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Image {
        width,
        height,
        pixels,
    })
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}
