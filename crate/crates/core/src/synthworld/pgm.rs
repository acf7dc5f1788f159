//! 8-bit binary greymap (`P5`) reading and writing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Quantises `[0,1]` values (clamped) to 8 bits, row-major `h×w`.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Dimension {
            op: "write_pgm",
            left: vec![height, width],
            right: vec![values.len()],
        });
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(values, width, height))
        .map_err(|e| Error::io(path, e))
}

/// Reads a `P5` file with maxval 255 into a `[1×H×W]` tensor scaled to `[0,1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format(path, r.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if bytes.len() < pos + w * h {
        return Err(bad("truncated pixel data"));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}
