use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(rgb: &[Vec3]) -> Vec<u8> {
    rgb.iter().flat_map(|c| c.map(to_u8)).collect()
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[Vec3]) -> Result<()> {
    assert_eq!(rgb.len(), width * height);
    let img = image::RgbImage::from_raw(width as u32, height as u32, to_bytes(rgb))
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format("png", path, e.to_string()))
}

/// Reads an 8-bit RGB PNG into `[0, 1]` floats.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<Vec3>)> {
    let img = image::open(path).map_err(|e| Error::format("png", path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    Ok((w, h, rgb))
}

/// Plain-text `P3` PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[Vec3]) -> Result<()> {
    assert_eq!(rgb.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "P3\n{width} {height}\n255").map_err(io)?;
    for row in rgb.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|c| format!("{} {} {}", to_u8(c[0]), to_u8(c[1]), to_u8(c[2]))).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

const DEPTH_MAGIC: &[u8; 4] = b"ODPT";
const DEPTH_VERSION: u32 = 1;

/// Depth map: magic `ODPT`, u32 version, u32 width, u32 height, then
/// `width * height` little-endian f32 values, row-major.
pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    assert_eq!(depth.len(), width * height);
    let mut bytes = Vec::with_capacity(16 + 4 * depth.len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&DEPTH_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    for d in depth {
        bytes.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format("depth", path, m.to_string());
    if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != DEPTH_VERSION {
        return Err(bad("unsupported version"));
    }
    let (w, h) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * w * h {
        return Err(bad("payload length does not match dimensions"));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((w, h, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = vec![[0.0, 0.5, 1.0], [1.2, -0.1, 0.25], [0.2, 0.2, 0.2], [1.0, 1.0, 1.0]];
        let p = dir.path().join("a.png");
        write_png(&p, 2, 2, &rgb).unwrap();
        let (w, h, back) = read_png(&p).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back[1], [1.0, 0.0, 64.0 / 255.0]);
        for (a, b) in rgb.iter().zip(&back) {
            for c in 0..3 {
                assert!((a[c].clamp(0.0, 1.0) - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        let d = dir.path().join("a.depth");
        write_depth(&d, 2, 2, &[0.0, 1.5, 2.25, 3.0]).unwrap();
        assert_eq!(read_depth(&d).unwrap(), (2, 2, vec![0.0, 1.5, 2.25, 3.0]));
        std::fs::write(&d, b"junk").unwrap();
        assert!(read_depth(&d).is_err());
    }

    #[test]
    fn ppm_is_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, 2, 1, &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "P3\n2 1\n255\n255 0 0 0 0 255\n");
    }
}
