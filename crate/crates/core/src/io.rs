//! File formats: 8-bit RGB PNG, little-endian PFM depth maps and the pose
//! text format (one camera-to-world pose per line, `r11 … r33 tx ty tz`).

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::CameraPose;
use crate::raster::{DepthMap, Image};
use crate::tensor::write_bytes_atomic;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let bytes = encode_png(img).map_err(|e| IoError::format(path, e.to_string()))?;
    write_bytes_atomic(path, &bytes).map_err(|e| IoError::io(path, e))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&img.to_rgb8())?;
    }
    Ok(out)
}

/// Reads an 8-bit PNG. Grayscale and alpha channels are converted to RGB.
pub fn read_png(path: &Path) -> Result<Image, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    decode_png_from(BufReader::new(file)).map_err(|e| IoError::format(path, e))
}

/// [`read_png`] for an in-memory file.
pub fn decode_png(bytes: &[u8]) -> Result<Image, String> {
    decode_png_from(std::io::Cursor::new(bytes))
}

fn decode_png_from(r: impl std::io::BufRead + std::io::Seek) -> Result<Image, String> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err("unexpanded palette image".into()),
    };
    Ok(Image::from_rgb8(w, h, &rgb))
}

/// Single-channel PFM, little-endian, rows stored bottom to top.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&depth.get(x, y).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_bytes_atomic(path, &encode_pfm(depth)).map_err(|e| IoError::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_pfm(&bytes).map_err(|m| IoError::format(path, m))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap, String> {
    // header: three whitespace-terminated tokens, then exactly one separator byte
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PFM header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PFM header")?);
        if tokens.len() == 4 {
            pos += 1;
        }
    }
    if tokens[0] != "Pf" {
        return Err(format!("expected single-channel 'Pf' magic, found '{}'", tokens[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PFM extent '{s}'"));
    let (w, h) = (parse(tokens[1])?, parse(tokens[2])?);
    let scale: f32 = tokens[3].parse().map_err(|_| format!("bad PFM scale '{}'", tokens[3]))?;
    let little = scale < 0.0;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() != w * h * 4 {
        return Err(format!("PFM payload is {} bytes, expected {}", payload.len(), w * h * 4));
    }
    let mut data = vec![0.0f32; w * h];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / w, i % w);
        data[(h - 1 - row) * w + x] = v;
    }
    Ok(DepthMap::new(w, h, data))
}

pub fn format_poses(poses: &[CameraPose<f64>]) -> String {
    let mut s = String::new();
    for p in poses {
        let vals: Vec<String> = p
            .rotation
            .iter()
            .flatten()
            .chain(&p.translation)
            .map(|v| format!("{v:?}"))
            .collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

/// Parses the pose text format. Blank lines and `#` comments are ignored.
pub fn parse_poses(text: &str) -> Result<Vec<CameraPose<f64>>, String> {
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number '{t}'", ln + 1)))
            .collect::<Result<_, _>>()?;
        if vals.len() != 12 {
            return Err(format!("line {}: expected 12 values, found {}", ln + 1, vals.len()));
        }
        let r = [
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ];
        let pose = CameraPose::new(r, [vals[9], vals[10], vals[11]]);
        pose.validate().map_err(|e| format!("line {}: {e}", ln + 1))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn read_poses(path: &Path) -> Result<Vec<CameraPose<f64>>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_poses(&text).map_err(|m| IoError::format(path, m))
}

pub fn write_poses(path: &Path, poses: &[CameraPose<f64>]) -> Result<(), IoError> {
    write_bytes_atomic(path, format_poses(poses).as_bytes()).map_err(|e| IoError::io(path, e))
}

/// Writes frames as `000.png`, `001.png`, … into `dir`.
pub fn write_frames(dir: &Path, frames: &[Image]) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("{i:03}.png")), f)?;
    }
    Ok(())
}

/// Reads consecutive `NNN.png` frames starting at `000.png`.
pub fn read_frames(dir: &Path) -> Result<Vec<Image>, IoError> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("{:03}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p)?);
    }
    if frames.is_empty() {
        return Err(IoError::format(dir, "no frames found (expected 000.png, 001.png, ...)"));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_rgb8(3, 2, &(0..18).map(|i| (i * 13) as u8).collect::<Vec<_>>());
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn pfm_layout_and_round_trip() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, f32::NAN]);
        let bytes = encode_pfm(&d);
        let header = b"Pf\n2 2\n-1\n";
        assert_eq!(&bytes[..header.len()], header);
        // bottom row first
        assert_eq!(&bytes[header.len()..header.len() + 4], &3.0f32.to_le_bytes());
        let back = decode_pfm(&bytes).unwrap();
        assert_eq!(&back.data[..3], &d.data[..3]);
        assert!(back.data[3].is_nan());
        assert!(decode_pfm(b"PF\n1 1\n-1\n\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1\n\0\0").is_err());
    }

    #[test]
    fn pose_text_round_trip() {
        let poses = vec![
            CameraPose::identity(),
            CameraPose::new(axis_angle([0.2, 1.0, -0.3], 0.4), [0.1, -2.0, 3.5]),
        ];
        let text = format_poses(&poses);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_poses(&text).unwrap(), poses);
        assert!(parse_poses("1 0 0 0 1 0 0 0 1 0 0").unwrap_err().contains("expected 12"));
        assert!(parse_poses("2 0 0 0 1 0 0 0 1 0 0 0").is_err());
    }
}
