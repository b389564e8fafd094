//! Class activation maps and heatmap export.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::HeadWeights;
use crate::raster::quantize;
use crate::tensor::Tensor;

/// Row-major real grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Per-map min-max scaling to `[0, 1]`; a flat map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        self.values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect()
    }
}

/// `M_c(x, y) = sum_k w_k^c f_k(x, y)` for one class, with its pooled score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CamMap {
    pub class: usize,
    pub map: Grid,
    /// `S_c = mean(M_c) + b_c`, which equals the model's logit for `class`.
    pub score: f64,
    pub bias: f64,
}

pub fn compute_cam(features: &Tensor, head: &HeadWeights, class: usize) -> Result<CamMap> {
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != head.feature_channels() {
        return Err(Error::Shape {
            op: "compute_cam",
            expected: vec![head.feature_channels(), 0, 0],
            found: shape.to_vec(),
        });
    }
    let weights = head.class_weights(class)?;
    let (h, w) = (shape[1], shape[2]);
    let mut values = vec![0.0; h * w];
    for (plane, &wk) in features.data().chunks_exact(h * w).zip(&weights) {
        for (m, &f) in values.iter_mut().zip(plane) {
            *m += wk * f;
        }
    }
    let map = Grid {
        height: h,
        width: w,
        values,
    };
    let bias = head.bias.data()[class];
    Ok(CamMap {
        class,
        score: map.mean() + bias,
        map,
        bias,
    })
}

/// Corner-aligned bilinear upsampling of a CAM to image resolution.
pub fn upsample_cam(cam: &CamMap, height: usize, width: usize) -> Result<Grid> {
    let src = &cam.map;
    if height < src.height || width < src.width {
        return Err(Error::invalid(format!(
            "upsample target {height}x{width} smaller than map {}x{}",
            src.height, src.width
        )));
    }
    let scale = |n_src: usize, n_dst: usize| {
        if n_dst > 1 {
            (n_src - 1) as f64 / (n_dst - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(src.height, height), scale(src.width, width));
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(src.height - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(src.width - 1);
            let x1 = (x0 + 1).min(src.width - 1);
            let tx = fx - x0 as f64;
            let top = src.get(y0, x0) + (src.get(y0, x1) - src.get(y0, x0)) * tx;
            let bottom = src.get(y1, x0) + (src.get(y1, x1) - src.get(y1, x0)) * tx;
            let v = top + (bottom - top) * ty;
            // Keep the interpolant inside the source range despite rounding.
            values.push(v.clamp(src.min(), src.max()));
        }
    }
    Ok(Grid {
        height,
        width,
        values,
    })
}

/// Binary PGM (P5), min-max normalized; the raw range is recorded in a header comment.
pub fn write_pgm(grid: &Grid, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(grid.values.len() + 64);
    write!(
        buf,
        "P5\n# normalization: per-map min-max, min={:e} max={:e}\n{} {}\n255\n",
        grid.min(),
        grid.max(),
        grid.width,
        grid.height
    )
    .expect("write to vec");
    buf.extend(grid.normalized().into_iter().map(quantize));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Black-red-yellow-white ramp applied after per-map min-max normalization.
pub fn write_png(grid: &Grid, path: &Path) -> Result<()> {
    let mut rgb = Vec::with_capacity(grid.values.len() * 3);
    for t in grid.normalized() {
        rgb.push(quantize(3.0 * t));
        rgb.push(quantize(3.0 * t - 1.0));
        rgb.push(quantize(3.0 * t - 2.0));
    }
    let img = image::RgbImage::from_raw(grid.width as u32, grid.height as u32, rgb)
        .expect("buffer length matches grid");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
