//! Linear RGB images and their PNG / PFM encodings.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::{Error, Result, Rgb};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![Rgb::zeros(); width * height] }
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn check_same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Largest per-channel absolute difference.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_size(other)?;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_size(other)?;
        let sum: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).norm_squared()).sum();
        Ok(sum / (3 * self.pixels.len()) as f64)
    }

    /// PSNR with unit peak; infinite for identical images.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }

    pub fn bitwise_eq(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// 8-bit sRGB RGBA bytes, row-major, top row first.
    pub fn to_srgb8_rgba(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4);
        for p in &self.pixels {
            out.extend(p.iter().map(|&c| encode_srgb8(c)));
            out.push(255);
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|p| p.iter().map(|&c| encode_srgb8(c)).collect::<Vec<_>>()).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::InvalidParameter("image buffer size mismatch".into()))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    /// Little-endian colour PFM (32-bit linear floats, bottom row first).
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y).iter() {
                    w.write_all(&(*c as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Image> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("truncated PFM header".into()));
            }
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "PF" {
            return Err(Error::Parse(format!("unsupported PFM type {}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PFM size: {e}")));
        let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let scale: f32 = tokens[3].parse().map_err(|e| Error::Parse(format!("PFM scale: {e}")))?;
        let mut raw = vec![0u8; width * height * 12];
        r.read_exact(&mut raw)?;
        let mut img = Image::new(width, height);
        for (i, chunk) in raw.chunks_exact(12).enumerate() {
            let v: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| {
                    let bytes = [b[0], b[1], b[2], b[3]];
                    (if scale < 0.0 { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) }) as f64
                })
                .collect();
            let (x, y) = (i % width, height - 1 - i / width);
            img.set(x, y, Rgb::new(v[0], v[1], v[2]));
        }
        Ok(img)
    }
}

pub fn encode_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn encode_srgb8(c: f64) -> u8 {
    (encode_srgb(c) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 2);
        img.set(0, 0, Rgb::new(0.25, 0.5, 1.5));
        img.set(2, 1, Rgb::new(-1.0, 0.125, 3.0));
        let path = dir.path().join("a.pfm");
        img.write_pfm(&path).unwrap();
        assert_eq!(Image::read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn png_writes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 4, Rgb::new(0.2, 0.4, 0.6));
        let path = dir.path().join("a.png");
        img.write_png(&path).unwrap();
        let back = ::image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(1, 1).0, [encode_srgb8(0.2), encode_srgb8(0.4), encode_srgb8(0.6)]);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = Image::filled(2, 2, Rgb::repeat(0.5));
        assert_eq!(a.psnr(&a).unwrap(), f64::INFINITY);
        let b = Image::filled(2, 2, Rgb::repeat(0.6));
        assert!((a.psnr(&b).unwrap() - 20.0).abs() < 1e-9);
        assert!(a.psnr(&Image::new(3, 2)).is_err());
    }

    #[test]
    fn srgb_endpoints() {
        assert_eq!(encode_srgb8(0.0), 0);
        assert_eq!(encode_srgb8(1.0), 255);
        assert_eq!(encode_srgb8(2.0), 255);
    }
}
