//! Minimal netpbm support: binary PPM (P6) reading/writing for frame import
//! and binary PGM (P5) writing for saliency export. Only maxval 255 is
//! supported.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub struct PpmImage {
    pub height: usize,
    pub width: usize,
    /// RGB bytes, row-major.
    pub pixels: Vec<u8>,
}

fn read_token(reader: &mut impl BufRead, context: &'static str) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(_) if !token.is_empty() => return Ok(token),
            Err(_) => {
                return Err(Error::Truncated {
                    context,
                    detail: "header ended early".into(),
                })
            }
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            _ => token.push(c as char),
        }
    }
}

fn parse_dim(token: &str, context: &'static str) -> Result<usize> {
    token.parse::<usize>().map_err(|_| Error::Corrupt {
        context,
        detail: format!("expected a number, got {token:?}"),
    })
}

/// Read a binary (P6) PPM file with maxval 255.
pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    const CONTEXT: &str = "ppm image";
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let magic = read_token(&mut reader, CONTEXT)?;
    if magic != "P6" {
        return Err(Error::BadMagic {
            context: CONTEXT,
            expected: "P6",
        });
    }
    let width = parse_dim(&read_token(&mut reader, CONTEXT)?, CONTEXT)?;
    let height = parse_dim(&read_token(&mut reader, CONTEXT)?, CONTEXT)?;
    let maxval = parse_dim(&read_token(&mut reader, CONTEXT)?, CONTEXT)?;
    if maxval != 255 {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("degenerate dimensions {width}×{height}"),
        });
    }
    let mut pixels = vec![0u8; width * height * 3];
    reader.read_exact(&mut pixels).map_err(|_| Error::Truncated {
        context: CONTEXT,
        detail: format!("pixel payload shorter than {} bytes", pixels.len()),
    })?;
    Ok(PpmImage {
        height,
        width,
        pixels,
    })
}

/// Write a binary (P6) PPM file, maxval 255.
pub fn write_ppm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width * 3 {
        return Err(Error::shape(format!(
            "ppm payload must be {}×{}×3 = {} bytes, got {}",
            height,
            width,
            height * width * 3,
            pixels.len()
        )));
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P6\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    Ok(())
}

/// Write a binary (P5) PGM file, maxval 255.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape(format!(
            "pgm payload must be {}×{} = {} bytes, got {}",
            height,
            width,
            height * width,
            pixels.len()
        )));
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    Ok(())
}
