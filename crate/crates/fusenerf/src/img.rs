//! Float image container and PNG / depth-map IO.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major float image, `channels` interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FloatImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean over channels per pixel, as a single-channel image.
    pub fn luminance(&self) -> FloatImage {
        let mut out = FloatImage::new(self.width, self.height, 1);
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            out.data[i] = px.iter().sum::<f64>() / self.channels as f64;
        }
        out
    }

    /// Replicate a single-channel image across three channels.
    pub fn replicate_3(&self) -> FloatImage {
        assert_eq!(self.channels, 1, "replicate_3 expects a single-channel image");
        let mut out = FloatImage::new(self.width, self.height, 3);
        for (i, &v) in self.data.iter().enumerate() {
            out.data[i * 3..i * 3 + 3].fill(v);
        }
        out
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Quantize to 8 bits per channel: `round(255 * c)` clamped.
    pub fn to_bytes_8bit(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes_8bit();
        let err = |e: image::ImageError| Error::format(path, e.to_string());
        match self.channels {
            3 => image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer sized from dimensions")
                .save(path)
                .map_err(err),
            1 => image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer sized from dimensions")
                .save(path)
                .map_err(err),
            c => Err(Error::Contract(format!("cannot save {c}-channel image as png"))),
        }
    }

    /// Load an 8-bit PNG as floats in `[0, 1]`, forced to RGB.
    pub fn load_png8(path: &Path) -> Result<FloatImage> {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(FloatImage { width: w, height: h, channels: 3, data })
    }
}

/// Save raw 16-bit grayscale counts (thermal sensor output).
pub fn save_gray16(path: &Path, width: usize, height: usize, counts: &[u16]) -> Result<()> {
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, counts.to_vec())
        .ok_or_else(|| Error::Contract("gray16 buffer does not match dimensions".into()))?
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

const DEPTH_MAGIC: &[u8; 4] = b"DPF1";

/// Binary depth map: magic, width, height (u32 LE), then f32 LE row-major.
pub fn save_depth_f32(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::Contract("depth buffer does not match dimensions".into()));
    }
    let mut out = Vec::with_capacity(12 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &d in depth {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_depth_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "not a depth map file"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + width * height * 4 {
        return Err(Error::format(path, "truncated depth map"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, data))
}
