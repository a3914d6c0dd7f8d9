//! Portable float map (PFM) reading and writing.
//!
//! Files are always written little-endian (scale `-1.0`). Rows are stored
//! bottom-to-top as the format requires; the in-memory layout used by callers
//! is top-to-bottom, row-major, channel-interleaved.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{NelfError, Result};

/// A decoded PFM image.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// 1 (`Pf`) or 3 (`PF`).
    pub channels: usize,
    /// Top-to-bottom rows, channel-interleaved.
    pub data: Vec<f32>,
}

pub fn write_pfm<W: Write>(
    mut out: W,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(NelfError::Contract(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    if data.len() != width * height * channels {
        return Err(NelfError::Contract(format!(
            "PFM data length {} does not match {width}x{height}x{channels}",
            data.len()
        )));
    }
    write!(out, "{magic}\n{width} {height}\n-1.0\n")?;
    let row_len = width * channels;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for row in (0..height).rev() {
        for v in &data[row * row_len..(row + 1) * row_len] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm<R: Read>(input: R) -> Result<Pfm> {
    let mut reader = BufReader::new(input);
    let mut tokens: Vec<String> = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(NelfError::Format("truncated PFM header".into()));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(NelfError::Format(format!("bad PFM magic {other:?}"))),
    };
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| NelfError::Format(format!("bad PFM dimension {s:?}")))
    };
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| NelfError::Format(format!("bad PFM scale {:?}", tokens[3])))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let mut raw = vec![0u8; n * 4];
    reader.read_exact(&mut raw)?;
    let row_len = width * channels;
    let mut data = vec![0f32; n];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let file_row = i / row_len;
        let col = i % row_len;
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn save_pfm(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_pfm(&mut w, width, height, channels, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Pfm> {
    read_pfm(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..16 * 8 * 3)
            .map(|i| (i as f32).sin() * 1e3 + 1e-7)
            .collect();
        let mut buf = Vec::new();
        write_pfm(&mut buf, 16, 8, 3, &data).unwrap();
        let back = read_pfm(&buf[..]).unwrap();
        assert_eq!(back.width, 16);
        assert_eq!(back.height, 8);
        assert_eq!(back.channels, 3);
        let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let data = [1.0f32, 2.0];
        let mut buf = Vec::new();
        write_pfm(&mut buf, 1, 2, 1, &data).unwrap();
        let header_len = "Pf\n1 2\n-1.0\n".len();
        let first = f32::from_le_bytes(buf[header_len..header_len + 4].try_into().unwrap());
        assert_eq!(first, 2.0);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_pfm(&b"P6\n1 1\n255\n"[..]).is_err());
    }
}
