//! Masked temporal median stacking for pseudo-clean labels, and the deraining
//! loss terms.
//!
//! L1 norms are raw sums over pixels and channels (no averaging). Only the
//! temporal loss carries the `1/(N-1)` factor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow_warp::{backward_warp, WarpResult};
use crate::frame_io::{FlowField, FrameSequence, Image};
use crate::smooth_stats::exact_median;

/// Sub-patch grid size and acceptance thresholds for [`patch_mask`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackingConfig {
    /// Patches per side; the grid is `patches x patches`.
    pub patches: usize,
    /// Minimum fraction of unchanged pixels for a patch to be accepted.
    pub theta: f64,
    /// Per-pixel slack in intensity units.
    pub delta: f64,
}

impl Default for StackingConfig {
    fn default() -> Self {
        Self {
            patches: 8,
            theta: 0.8,
            delta: 0.1,
        }
    }
}

impl StackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 {
            return Err(Error::InvalidArgument("patch grid must be at least 1x1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta {} must be >= 0", self.delta)));
        }
        Ok(())
    }
}

/// Per-patch acceptance on a `grid x grid` layout. Patch sizes are
/// `ceil(H / grid)` by `ceil(W / grid)`, i.e. the image is conceptually padded
/// up to a multiple of the grid; padded pixels never count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackingMask {
    pub grid: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `grid x grid`, entries 0 or 1.
    pub accept: Vec<u8>,
}

impl StackingMask {
    pub fn layout(height: usize, width: usize, grid: usize) -> Self {
        assert!(grid > 0, "grid must be positive");
        Self {
            grid,
            patch_h: height.div_ceil(grid),
            patch_w: width.div_ceil(grid),
            height,
            width,
            accept: vec![0; grid * grid],
        }
    }

    pub fn all_accepted(height: usize, width: usize, grid: usize) -> Self {
        let mut m = Self::layout(height, width, grid);
        m.accept.fill(1);
        m
    }

    #[inline]
    pub fn is_accepted(&self, py: usize, px: usize) -> bool {
        self.accept[py * self.grid + px] != 0
    }

    /// Pixel bounds `(y0, y1, x0, x1)` of a patch clipped to the image.
    pub fn patch_bounds(&self, py: usize, px: usize) -> (usize, usize, usize, usize) {
        let y0 = (py * self.patch_h).min(self.height);
        let x0 = (px * self.patch_w).min(self.width);
        (
            y0,
            ((py + 1) * self.patch_h).min(self.height),
            x0,
            ((px + 1) * self.patch_w).min(self.width),
        )
    }

    pub fn accepted_fraction(&self) -> f64 {
        self.accept.iter().map(|&v| v as f64).sum::<f64>() / self.accept.len() as f64
    }

    /// One text row per grid row, `0`/`1` separated by spaces.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.grid * (2 * self.grid + 1));
        for row in self.accept.chunks(self.grid) {
            let line: Vec<&str> = row.iter().map(|&v| if v != 0 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Rejected patches tinted red over the given image.
    pub fn render_overlay(&self, base: &Image) -> Result<Image> {
        self.ensure_image(base)?;
        let (ph, pw) = (self.patch_h, self.patch_w);
        Ok(Image::from_fn(base.height(), base.width(), |y, x, c| {
            let v = base.get(y, x, c);
            let edge = y % ph == 0 || x % pw == 0;
            if edge {
                return 1.0;
            }
            if self.is_accepted(y / ph, x / pw) {
                v
            } else if c == 0 {
                0.5 * v + 0.5
            } else {
                0.5 * v
            }
        }))
    }

    fn ensure_image(&self, img: &Image) -> Result<()> {
        if img.dims() != (self.height, self.width) {
            return Err(Error::DimensionMismatch(format!(
                "mask built for {}x{} applied to {:?}",
                self.height,
                self.width,
                img.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

/// Per-pixel, per-channel median over the center and the aligned frames that
/// are valid at that pixel. Even candidate counts average the middle two.
pub fn temporal_median(center: &Image, aligned: &[WarpResult]) -> Result<Image> {
    for (i, a) in aligned.iter().enumerate() {
        center.ensure_same_dims(&a.image, &format!("aligned frame {i}"))?;
        if a.validity.len() != center.height() * center.width() {
            return Err(Error::DimensionMismatch(format!(
                "validity map of aligned frame {i}"
            )));
        }
    }
    if aligned.is_empty() {
        return Ok(center.clone());
    }
    let (h, w) = center.dims();
    let mut data = vec![0.0f32; h * w * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let mut cand = Vec::with_capacity(aligned.len() + 1);
        for x in 0..w {
            for c in 0..3 {
                cand.clear();
                cand.push(center.get(y, x, c) as f64);
                cand.extend(
                    aligned
                        .iter()
                        .filter(|a| a.is_valid(y, x))
                        .map(|a| a.image.get(y, x, c) as f64),
                );
                row[x * 3 + c] = exact_median(&cand) as f32;
            }
        }
    });
    Ok(Image::from_raw_unchecked(h, w, data))
}

/// Accepts a patch when the fraction of its pixels whose largest channel
/// difference `|median - center|` is at most `delta` reaches `theta`.
pub fn patch_mask(median: &Image, center: &Image, cfg: &StackingConfig) -> Result<StackingMask> {
    cfg.validate()?;
    median.ensure_same_dims(center, "median vs center")?;
    let (h, w) = center.dims();
    let mut mask = StackingMask::layout(h, w, cfg.patches);
    for py in 0..cfg.patches {
        for px in 0..cfg.patches {
            let (y0, y1, x0, x1) = mask.patch_bounds(py, px);
            let total = (y1 - y0) * (x1 - x0);
            if total == 0 {
                continue;
            }
            let mut unchanged = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (m, c) = (median.pixel(y, x), center.pixel(y, x));
                    let diff = (0..3)
                        .map(|k| (m[k] as f64 - c[k] as f64).abs())
                        .fold(0.0, f64::max);
                    if diff <= cfg.delta {
                        unchanged += 1;
                    }
                }
            }
            // integer form of unchanged / total >= theta, avoiding rounding at the boundary
            let needed = (cfg.theta * total as f64 - 1e-9).ceil().max(0.0) as usize;
            mask.accept[py * cfg.patches + px] = (unchanged >= needed) as u8;
        }
    }
    Ok(mask)
}

fn l1_region(a: &Image, b: &Image, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let mut s = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (a.pixel(y, x), b.pixel(y, x));
            for c in 0..3 {
                s += (p[c] as f64 - q[c] as f64).abs();
            }
        }
    }
    s
}

pub fn l1_distance(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "l1")?;
    Ok(l1_region(a, b, 0, a.height(), 0, a.width()))
}

/// L1 residual summed over accepted patches only.
pub fn stacking_loss(derained: &Image, median: &Image, mask: &StackingMask) -> Result<f64> {
    derained.ensure_same_dims(median, "derained vs median")?;
    mask.ensure_image(derained)?;
    let mut total = 0.0;
    for py in 0..mask.grid {
        for px in 0..mask.grid {
            if mask.is_accepted(py, px) {
                let (y0, y1, x0, x1) = mask.patch_bounds(py, px);
                total += l1_region(derained, median, y0, y1, x0, x1);
            }
        }
    }
    Ok(total)
}

/// `(l_rec, l_spa)`: L1 distances of the dual-branch and spatial-branch
/// outputs to `truth`. For unpaired data pass the masked median as `truth`.
pub fn reconstruction_losses(
    derained_dual: &Image,
    derained_spatial: &Image,
    truth: &Image,
) -> Result<(f64, f64)> {
    Ok((
        l1_distance(truth, derained_dual)?,
        l1_distance(truth, derained_spatial)?,
    ))
}

/// Mean over neighbours of the L1 distance between the derained center warped
/// towards each neighbour and that neighbour, counted on valid pixels only.
pub fn temporal_loss(
    derained_center: &Image,
    neighbors: &[Image],
    inverse_flows: &[FlowField],
) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::InvalidArgument(
            "temporal loss needs at least one neighbour frame".into(),
        ));
    }
    if neighbors.len() != inverse_flows.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} neighbours vs {} flows",
            neighbors.len(),
            inverse_flows.len()
        )));
    }
    let mut total = 0.0;
    for (i, (nb, flow)) in neighbors.iter().zip(inverse_flows).enumerate() {
        derained_center.ensure_same_dims(nb, &format!("neighbour {i}"))?;
        let warped = backward_warp(derained_center, flow)?;
        for y in 0..nb.height() {
            for x in 0..nb.width() {
                if warped.is_valid(y, x) {
                    let (p, q) = (warped.image.pixel(y, x), nb.pixel(y, x));
                    for c in 0..3 {
                        total += (p[c] as f64 - q[c] as f64).abs();
                    }
                }
            }
        }
    }
    Ok(total / neighbors.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    Paired,
    Unpaired,
}

/// Named loss values; only the ones the selected mode needs must be set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub rec: Option<f64>,
    pub spa: Option<f64>,
    pub tem: Option<f64>,
    pub sta: Option<f64>,
}

/// Paired: `l_rec + l_spa + lambda2 l_tem`.
/// Unpaired: `lambda1 l_sta + l_spa + lambda2 l_tem`.
pub fn total_loss(mode: TrainingMode, components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    let spa = components.spa.ok_or(Error::MissingComponent("spa"))?;
    let tem = components.tem.ok_or(Error::MissingComponent("tem"))?;
    match mode {
        TrainingMode::Paired => {
            let rec = components.rec.ok_or(Error::MissingComponent("rec"))?;
            Ok(rec + spa + weights.lambda2 * tem)
        }
        TrainingMode::Unpaired => {
            let sta = components.sta.ok_or(Error::MissingComponent("sta"))?;
            Ok(weights.lambda1 * sta + spa + weights.lambda2 * tem)
        }
    }
}

/// Warps every neighbour to the center with its flow, then returns the
/// temporal median and its patch mask. `flows` lists one flow per non-center
/// frame in ascending frame order, each mapping that frame onto the center.
pub fn generate_pseudo_labels(
    seq: &FrameSequence,
    flows: &[FlowField],
    cfg: &StackingConfig,
) -> Result<(Image, StackingMask)> {
    let aligned = align_to_center(seq, flows)?;
    let median = temporal_median(seq.center(), &aligned)?;
    let mask = patch_mask(&median, seq.center(), cfg)?;
    Ok((median, mask))
}

/// Backward-warps each non-center frame onto the center frame.
pub fn align_to_center(seq: &FrameSequence, flows: &[FlowField]) -> Result<Vec<WarpResult>> {
    if flows.len() != seq.len() - 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} flows for {} frames; expected one per non-center frame",
            flows.len(),
            seq.len()
        )));
    }
    seq.neighbor_indices()
        .zip(flows)
        .map(|(i, f)| backward_warp(&seq.frames()[i], f))
        .collect()
}
