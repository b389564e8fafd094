//! Random rotation, crop-and-resize and horizontal flip.
//!
//! All three are folded into one inverse coordinate map and a single bilinear
//! sample per output pixel. Pixels that fall outside the source read as 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{sample_bilinear, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Rotation angle is drawn from `[-max, max]` degrees.
    pub rotation_deg: f64,
    /// Crop side as a fraction of the image side, drawn from `[lo, hi]`.
    pub crop_scale: (f64, f64),
    pub hflip_p: f64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        rotation_deg: 0.0,
        crop_scale: (1.0, 1.0),
        hflip_p: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.crop_scale == (1.0, 1.0) && self.hflip_p == 0.0
    }

    pub fn validate(&self) -> crate::Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0)
            || !(lo > 0.0 && lo <= hi && hi <= 1.0)
            || !(0.0..=1.0).contains(&self.hflip_p)
        {
            return Err(crate::Error::invalid(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn cos_sin(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

struct Params {
    angle: f64,
    scale: f64,
    top: f64,
    left: f64,
    flip: bool,
}

fn apply(img: &Image, p: &Params) -> Image {
    let res = img.resolution();
    let (h, w) = (res.height as f64, res.width as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (cos, sin) = cos_sin(p.angle);
    let mut out = Image::filled(res, 0.0);
    for y in 0..res.height {
        for xo in 0..res.width {
            let x = if p.flip { res.width - 1 - xo } else { xo };
            // output -> crop window (half-pixel aligned) in rotated space
            let mut sy = p.top + (y as f64 + 0.5) * p.scale - 0.5;
            let mut sx = p.left + (x as f64 + 0.5) * p.scale - 0.5;
            if p.angle != 0.0 {
                // inverse of a counter-clockwise (as displayed) rotation about the center
                let (dy, dx) = (sy - cy, sx - cx);
                sx = cx + dx * cos - dy * sin;
                sy = cy + dx * sin + dy * cos;
            }
            for c in 0..res.channels {
                out.set(c, y, xo, sample_bilinear(img, c, sy, sx, 0.0));
            }
        }
    }
    out
}

/// Counter-clockwise rotation (as displayed) about the image center.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    apply(
        img,
        &Params {
            angle: degrees,
            scale: 1.0,
            top: 0.0,
            left: 0.0,
            flip: false,
        },
    )
}

pub fn hflip(img: &Image) -> Image {
    apply(
        img,
        &Params {
            angle: 0.0,
            scale: 1.0,
            top: 0.0,
            left: 0.0,
            flip: true,
        },
    )
}

/// Applies a random draw of `spec`; the draw depends only on `seed`.
pub fn augment(img: &Image, spec: &AugmentSpec, seed: u64) -> Image {
    if spec.is_identity() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if spec.rotation_deg > 0.0 {
        rng.gen_range(-spec.rotation_deg..=spec.rotation_deg)
    } else {
        0.0
    };
    let (lo, hi) = spec.crop_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let res = img.resolution();
    let slack_y = res.height as f64 * (1.0 - scale);
    let slack_x = res.width as f64 * (1.0 - scale);
    let top = if slack_y > 0.0 { rng.gen_range(0.0..=slack_y) } else { 0.0 };
    let left = if slack_x > 0.0 { rng.gen_range(0.0..=slack_x) } else { 0.0 };
    let flip = spec.hflip_p > 0.0 && rng.gen_bool(spec.hflip_p);
    apply(
        img,
        &Params {
            angle,
            scale,
            top,
            left,
            flip,
        },
    )
}
