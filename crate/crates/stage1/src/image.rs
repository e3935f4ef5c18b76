use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use trigen_core::Tensor;

use crate::error::{Error, Result};

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{}×{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixels as a `[H·W × 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.width * self.height, 3], self.data.clone()).expect("consistent size")
    }

    pub fn from_tensor(width: usize, height: usize, t: &Tensor) -> Result<Self> {
        Self::new(width, height, t.data().to_vec())
    }

    /// Gathers the rows of a `[H·W × 3]` view for the given pixel indices.
    pub fn gather(&self, pixels: &[usize]) -> Tensor {
        let data = pixels.iter().flat_map(|&p| self.data[3 * p..3 * p + 3].to_vec()).collect();
        Tensor::new(&[pixels.len(), 3], data).expect("consistent size")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// The image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same size")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(e.to_string()))?;
        writer.finish().map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let dec = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "expected 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Self::from_rgb8(info.width as usize, info.height as usize, &buf)
    }
}

/// `10·log10(1/MSE)` in dB, with the MSE floored at `1e-10`.
pub fn psnr(a: &Image, b: &Image) -> Result<f32> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Image(format!(
            "psnr: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(psnr_slices(&a.data, &b.data))
}

pub(crate) fn psnr_slices(a: &[f32], b: &[f32]) -> f32 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    (10.0 * (1.0 / mse.max(1e-10)).log10()) as f32
}
