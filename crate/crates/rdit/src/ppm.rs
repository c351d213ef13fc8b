//! Minimal binary PPM (P6) / PGM (P5) reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RditError, Result};

/// Write an RGB image as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(RditError::shape(
            "write_ppm",
            format!("{} bytes", width * height * 3),
            format!("{}", rgb.len()),
        ));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Read a binary PPM/PGM; grayscale is expanded to RGB.
/// Returns (width, height, rgb bytes).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    let bad = |m: &str| RditError::Dataset(format!("{}: {m}", path.display()));

    let mut pos = 0usize;
    let mut next_token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RditError::Dataset(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    let magic = next_token(&raw)?;
    let channels = match magic.as_str() {
        "P6" => 3usize,
        "P5" => 1usize,
        other => return Err(bad(&format!("unsupported magic `{other}`"))),
    };
    let width: usize = next_token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = next_token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = next_token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let body = &raw[pos..pos + need];
    let scale = 255.0 / maxval as f64;
    let to_u8 = |v: u8| ((v as f64) * scale).round().min(255.0) as u8;
    let rgb = if channels == 3 {
        body.iter().map(|&v| to_u8(v)).collect()
    } else {
        let mut out = Vec::with_capacity(need * 3);
        for &v in body {
            let g = to_u8(v);
            out.extend_from_slice(&[g, g, g]);
        }
        out
    };
    Ok((width, height, rgb))
}
