//! Planar pixel grids with values in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel count and spatial extent of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Channel-major (`[c, y, x]`) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    res: Resolution,
    data: Vec<f64>,
}

impl Image {
    pub fn new(res: Resolution, data: Vec<f64>) -> Result<Self> {
        if res.is_empty() || data.len() != res.len() {
            return Err(Error::Shape {
                op: "image",
                expected: vec![res.channels, res.height, res.width],
                found: vec![data.len()],
            });
        }
        Ok(Self { res, data })
    }

    pub fn filled(res: Resolution, value: f64) -> Self {
        Self {
            res,
            data: vec![value; res.len()],
        }
    }

    /// Every pixel set to `color` (one value per channel).
    pub fn solid(res: Resolution, color: &[f64]) -> Result<Self> {
        if color.len() != res.channels {
            return Err(Error::invalid(format!(
                "color has {} components for {} channels",
                color.len(),
                res.channels
            )));
        }
        let plane = res.height * res.width;
        let data = color
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(plane))
            .collect();
        Self::new(res, data)
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.res.height + y) * self.res.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.res.height + y) * self.res.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.res.channels, self.res.height, self.res.width],
            self.data.clone(),
        )
        .expect("image resolution is non-empty")
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Values quantized to 8 bits, channel-interleaved.
    pub fn to_bytes_interleaved(&self) -> Vec<u8> {
        let plane = self.res.height * self.res.width;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for c in 0..self.res.channels {
                out.push(quantize(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_bytes_interleaved(res: Resolution, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != res.len() {
            return Err(Error::Shape {
                op: "image",
                expected: vec![res.channels, res.height, res.width],
                found: vec![bytes.len()],
            });
        }
        let plane = res.height * res.width;
        let mut data = vec![0.0; res.len()];
        for (i, px) in bytes.chunks_exact(res.channels).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                data[c * plane + i] = b as f64 / 255.0;
            }
        }
        Self::new(res, data)
    }

    /// Loads any format the `image` crate decodes; RGBA and 16-bit inputs are reduced to 8-bit.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img, channels)
    }

    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => Self::from_bytes_interleaved(Resolution::new(1, h, w), img.to_luma8().as_raw()),
            3 => Self::from_bytes_interleaved(Resolution::new(3, h, w), img.to_rgb8().as_raw()),
            n => Err(Error::invalid(format!("unsupported channel count {n}"))),
        }
    }

    /// Writes an 8-bit PNG (grayscale or RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.res.width as u32, self.res.height as u32);
        let bytes = self.to_bytes_interleaved();
        let result = match self.res.channels {
            1 => GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            3 => RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            n => return Err(Error::invalid(format!("cannot encode {n}-channel image"))),
        };
        result
            .expect("buffer length matches resolution")
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear sample of channel `c` at fractional `(y, x)`; out-of-bounds reads `fill`.
pub fn sample_bilinear(img: &Image, c: usize, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = (img.res.height as isize, img.res.width as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img.get(c, yy as usize, xx as usize)
        }
    };
    let top = if fx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        at(y0 + 1, x0)
    } else {
        at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Corner-aligned bilinear resize.
pub fn resize(img: &Image, height: usize, width: usize) -> Image {
    let src = img.res;
    let res = Resolution::new(src.channels, height, width);
    if src.height == height && src.width == width {
        return img.clone();
    }
    let sy = if height > 1 { (src.height - 1) as f64 / (height - 1) as f64 } else { 0.0 };
    let sx = if width > 1 { (src.width - 1) as f64 / (width - 1) as f64 } else { 0.0 };
    let mut out = Image::filled(res, 0.0);
    for c in 0..src.channels {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, sample_bilinear(img, c, y as f64 * sy, x as f64 * sx, 0.0));
            }
        }
    }
    out
}

/// Sub-window `[top, top+height) x [left, left+width)`.
pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    let src = img.res;
    if height == 0 || width == 0 || top + height > src.height || left + width > src.width {
        return Err(Error::invalid(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
            src.height, src.width
        )));
    }
    let res = Resolution::new(src.channels, height, width);
    let mut out = Image::filled(res, 0.0);
    for c in 0..src.channels {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, img.get(c, top + y, left + x));
            }
        }
    }
    Ok(out)
}

/// Converts between grayscale and RGB by averaging or replicating channels.
pub fn convert_channels(img: &Image, channels: usize) -> Result<Image> {
    let src = img.res;
    if src.channels == channels {
        return Ok(img.clone());
    }
    let plane = src.height * src.width;
    let res = Resolution::new(channels, src.height, src.width);
    match (src.channels, channels) {
        (3, 1) => {
            let data = (0..plane)
                .map(|i| (img.data[i] + img.data[plane + i] + img.data[2 * plane + i]) / 3.0)
                .collect();
            Image::new(res, data)
        }
        (1, 3) => {
            let mut data = img.data.clone();
            data.extend_from_slice(&img.data);
            data.extend_from_slice(&img.data);
            Image::new(res, data)
        }
        (a, b) => Err(Error::invalid(format!("cannot convert {a} channels to {b}"))),
    }
}
