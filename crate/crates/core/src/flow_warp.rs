//! Backward warping and the multi-frame flow transfer loss.
//!
//! Flow convention: `flow(y, x) = (u, v)` is added to the target coordinate to
//! find the source sample, so `out(y, x) = src(y + v, x + u)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame_io::{FlowField, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    /// 1 where the sample position lies inside the source image, 0 otherwise.
    pub validity: Vec<u8>,
}

impl WarpResult {
    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.validity[y * self.image.width() + x] != 0
    }

    pub fn valid_fraction(&self) -> f64 {
        self.validity.iter().map(|&v| v as f64).sum::<f64>() / self.validity.len() as f64
    }
}

fn ensure_flow_dims(img: &Image, flow: &FlowField) -> Result<()> {
    if img.dims() != flow.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image {:?} vs flow {:?}",
            img.dims(),
            flow.dims()
        )));
    }
    Ok(())
}

/// Bilinear backward warp. Taps outside the image are clamped to the border
/// and the pixel is marked invalid. A tap with zero interpolation weight
/// never invalidates a pixel, so integer sample positions on the last
/// row/column stay valid.
pub fn backward_warp(src: &Image, flow: &FlowField) -> Result<WarpResult> {
    ensure_flow_dims(src, flow)?;
    let (h, w) = src.dims();
    let mut data = vec![0.0f32; h * w * 3];
    let mut validity = vec![0u8; h * w];
    data.par_chunks_mut(w * 3)
        .zip(validity.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, valid_row))| {
            for x in 0..w {
                let (u, v) = flow.at(y, x);
                let sx = x as f64 + u as f64;
                let sy = y as f64 + v as f64;
                let (px, valid) = sample_bilinear(src, sy, sx);
                row[x * 3..x * 3 + 3].copy_from_slice(&px);
                valid_row[x] = valid as u8;
            }
        });
    Ok(WarpResult {
        image: Image::from_raw_unchecked(h, w, data),
        validity,
    })
}

fn sample_bilinear(src: &Image, sy: f64, sx: f64) -> ([f32; 3], bool) {
    let (h, w) = src.dims();
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
    let valid = (0.0..=hm).contains(&sy) && (0.0..=wm).contains(&sx);
    let y0f = sy.floor();
    let x0f = sx.floor();
    let fy = (sy - y0f) as f32;
    let fx = (sx - x0f) as f32;
    let clamp_y = |v: f64| v.clamp(0.0, hm) as usize;
    let clamp_x = |v: f64| v.clamp(0.0, wm) as usize;
    let (y0, y1) = (clamp_y(y0f), clamp_y(y0f + 1.0));
    let (x0, x1) = (clamp_x(x0f), clamp_x(x0f + 1.0));
    let p00 = src.pixel(y0, x0);
    let p01 = src.pixel(y0, x1);
    let p10 = src.pixel(y1, x0);
    let p11 = src.pixel(y1, x1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p01[c] * fx;
        let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
    }
    (out, valid)
}

/// Constant flow field `(dx, dy)`.
pub fn synth_translation_flow(dx: f32, dy: f32, h: usize, w: usize) -> FlowField {
    FlowField::constant(h, w, dx, dy)
}

/// Sum of absolute differences over every pixel, both components and every
/// non-center frame.
pub fn flow_transfer_loss(pred: &[FlowField], teacher: &[FlowField]) -> Result<f64> {
    if pred.len() != teacher.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted flows vs {} teacher flows",
            pred.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0f64;
    for (i, (p, t)) in pred.iter().zip(teacher).enumerate() {
        if p.dims() != t.dims() {
            return Err(Error::DimensionMismatch(format!(
                "flow pair {i}: {:?} vs {:?}",
                p.dims(),
                t.dims()
            )));
        }
        total += p
            .u()
            .iter()
            .zip(t.u())
            .chain(p.v().iter().zip(t.v()))
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>();
    }
    Ok(total)
}
