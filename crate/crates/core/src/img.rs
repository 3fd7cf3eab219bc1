//! Float RGB images, grayscale masks, and their file formats.
//!
//! PPM/PGM output is bit-exact 8-bit and is the canonical on-disk format;
//! PNG is offered as a convenience. Float channels live in [0,1].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples, length = 3 * width * height.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image { width, height, pixels: vec![0.0; (width * height * 3) as usize] }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Image {
        let mut im = Image::new(width, height);
        for p in im.pixels.chunks_exact_mut(3) {
            p.copy_from_slice(&rgb);
        }
        im
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        3 * (y * self.width + x) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Clamp every channel into [0,1]; rendering accumulates unclamped.
    pub fn clamped(mut self) -> Image {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.pixels.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data("image contains non-finite channels".into()))
        }
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            let d = a - b;
            acc += d * d;
        }
        acc / self.pixels.len() as f64
    }

    /// Sum of squared channel differences (the raw render loss).
    pub fn sse(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend(self.pixels.iter().map(|v| quantize8(*v)));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, w, h, maxv, data) = parse_pnm_header(&bytes)?;
        if magic != b"P6" {
            return Err(Error::Data(format!("{}: not a P6 ppm", path.display())));
        }
        if maxv != 255 {
            return Err(Error::Data("only 8-bit ppm supported".into()));
        }
        let n = (w * h * 3) as usize;
        if data.len() < n {
            return Err(Error::Data("truncated ppm".into()));
        }
        Ok(Image {
            width: w,
            height: h,
            pixels: data[..n].iter().map(|b| *b as f64 / 255.0).collect(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.pixels.iter().map(|v| quantize8(*v)).collect();
        let img = image::RgbImage::from_raw(self.width, self.height, buf)
            .ok_or_else(|| Error::Data("bad image dimensions".into()))?;
        img.save(path).map_err(|e| Error::Data(format!("png write: {e}")))?;
        Ok(())
    }

    /// Stack images side by side (all must share a height).
    pub fn hstack(images: &[&Image]) -> Image {
        let h = images[0].height;
        let w: u32 = images.iter().map(|i| i.width).sum();
        let mut out = Image::new(w, h);
        let mut x0 = 0;
        for im in images {
            assert_eq!(im.height, h);
            for y in 0..h {
                for x in 0..im.width {
                    out.set(x0 + x, y, im.get(x, y));
                }
            }
            x0 += im.width;
        }
        out
    }
}

#[inline]
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PSNR in dB for signals in [0,1]; computed on float images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.mse(b);
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Label mask: 0 = background, k = object k-1. One file per (step, view).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: u32, height: u32) -> LabelMask {
        LabelMask { width, height, labels: vec![0; (width * height) as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.labels[(y * self.width + x) as usize] = v;
    }

    /// Binary mask of one object (1-based label).
    pub fn binary(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|l| *l == label).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.labels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.extend_from_slice(&self.labels);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<LabelMask> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, w, h, _maxv, data) = parse_pnm_header(&bytes)?;
        if magic != b"P5" {
            return Err(Error::Data(format!("{}: not a P5 pgm", path.display())));
        }
        let n = (w * h) as usize;
        if data.len() < n {
            return Err(Error::Data("truncated pgm".into()));
        }
        Ok(LabelMask { width: w, height: h, labels: data[..n].to_vec() })
    }
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(&[u8], u32, u32, u32, &[u8])> {
    // magic, then three whitespace-separated integers, then a single
    // whitespace byte before the raster.
    if bytes.len() < 2 {
        return Err(Error::Data("pnm too short".into()));
    }
    let magic = &bytes[..2];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Data("bad pnm header".into()))?;
        *f = s.parse().map_err(|_| Error::Data("bad pnm header".into()))?;
    }
    pos += 1; // single whitespace after maxval
    Ok((magic, fields[0], fields[1], fields[2], &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(5, 3);
        for (i, v) in im.pixels.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 16.0;
        }
        let p = dir.path().join("a.ppm");
        im.write_ppm(&p).unwrap();
        let back = Image::read_ppm(&p).unwrap();
        // Quantization is the only loss; re-writing must be byte-identical.
        let p2 = dir.path().join("b.ppm");
        back.write_ppm(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = LabelMask::new(4, 4);
        m.set(1, 2, 3);
        m.set(0, 0, 1);
        let p = dir.path().join("m.pgm");
        m.write_pgm(&p).unwrap();
        assert_eq!(LabelMask::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let im = Image::filled(4, 4, [0.3, 0.4, 0.5]);
        assert!(psnr(&im, &im).is_infinite());
        let other = Image::filled(4, 4, [0.3, 0.4, 0.6]);
        let expected = -10.0 * ((0.1f64 * 0.1) / 3.0).log10();
        assert!((psnr(&im, &other) - expected).abs() < 1e-9);
    }
}
