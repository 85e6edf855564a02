//! 8-bit RGB frames and grayscale maps with PNG I/O and bilinear resampling.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::bbox::BBox;
use crate::{Error, Result};

/// Row-major interleaved RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "Frame::from_raw",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Samples `bbox` onto an `out_w × out_h` grid with bilinear interpolation.
    ///
    /// Output is channel-major (`[3, out_h, out_w]`) with values mapped to
    /// `v / 255 − 0.5`; samples outside the frame read as 0.
    pub fn crop_resize(&self, bbox: &BBox, out_w: usize, out_h: usize) -> Vec<f64> {
        let plane = out_w * out_h;
        let mut out = vec![0.0; 3 * plane];
        let sx = bbox.w / out_w as f64;
        let sy = bbox.h / out_h as f64;
        let sample = |x: isize, y: isize, c: usize| -> f64 {
            if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
                0.0
            } else {
                f64::from(self.data[(y as usize * self.width + x as usize) * 3 + c]) / 255.0 - 0.5
            }
        };
        for oy in 0..out_h {
            let fy = bbox.y + (oy as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            let y0 = y0 as isize;
            for ox in 0..out_w {
                let fx = bbox.x + (ox as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let x0 = x0 as isize;
                for c in 0..3 {
                    let top = sample(x0, y0, c) * (1.0 - tx) + sample(x0 + 1, y0, c) * tx;
                    let bot = sample(x0, y0 + 1, c) * (1.0 - tx) + sample(x0 + 1, y0 + 1, c) * tx;
                    out[c * plane + oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        out
    }

    /// Whole frame resampled to `out_w × out_h`, same layout as [`Frame::crop_resize`].
    pub fn resized(&self, out_w: usize, out_h: usize) -> Vec<f64> {
        let full = BBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        self.crop_resize(&full, out_w, out_h)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, channels, raw) = decode_png(path)?;
        let data = match channels {
            3 => raw,
            4 => raw.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            1 => raw.iter().flat_map(|&v| [v, v, v]).collect(),
            2 => raw.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            n => return Err(Error::Png(format!("{}: unsupported channel count {n}", path.display()))),
        };
        Self::from_raw(width, height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        encode_png(path, self.width, self.height, png::ColorType::Rgb, &self.data)
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, channels, raw) = decode_png(path)?;
        let data = match channels {
            1 => raw,
            2 => raw.chunks(2).map(|p| p[0]).collect(),
            3 | 4 => raw.chunks(channels).map(|p| p[0]).collect(),
            n => return Err(Error::Png(format!("{}: unsupported channel count {n}", path.display()))),
        };
        Ok(Self { width, height, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        encode_png(path, self.width, self.height, png::ColorType::Grayscale, &self.data)
    }
}

fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    // Rows may carry padding when the stride differs from the packed width.
    if info.line_size != w * channels {
        buf = buf
            .chunks(info.line_size)
            .flat_map(|row| row[..w * channels].to_vec())
            .collect();
    }
    Ok((w, h, channels, buf))
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame() -> Frame {
        let mut f = Frame::new(6, 4);
        for y in 0..4 {
            for x in 0..6 {
                f.set_pixel(x, y, [(x * 40) as u8, (y * 60) as u8, 7]);
            }
        }
        f
    }

    #[test]
    fn identity_resample_reproduces_pixels() {
        let f = gradient_frame();
        let out = f.resized(6, 4);
        for y in 0..4 {
            for x in 0..6 {
                let p = f.pixel(x, y);
                for c in 0..3 {
                    let expected = f64::from(p[c]) / 255.0 - 0.5;
                    assert!((out[c * 24 + y * 6 + x] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_frame_samples_are_zero() {
        let f = gradient_frame();
        let out = f.crop_resize(&BBox::new(100.0, 100.0, 4.0, 4.0), 2, 2);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = gradient_frame();
        let path = dir.path().join("f.png");
        f.save_png(&path).unwrap();
        assert_eq!(Frame::load_png(&path).unwrap(), f);

        let g = GrayImage { width: 3, height: 2, data: vec![0, 255, 9, 1, 2, 3] };
        let gp = dir.path().join("g.png");
        g.save_png(&gp).unwrap();
        assert_eq!(GrayImage::load_png(&gp).unwrap(), g);
    }
}
