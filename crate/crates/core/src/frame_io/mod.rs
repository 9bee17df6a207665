//! Frame sequences, flow fields and their on-disk formats.

mod flo;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use flo::{decode_flow, encode_flow, read_flow, write_flow, FLO_MAGIC};
pub use metrics::{compute_psnr, compute_ssim, PSNR_CAP_DB, SSIM_WINDOW};

/// RGB image with intensities in `[0, 1]`, stored row-major as `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        assert!((0.0..=1.0).contains(&value), "value outside [0, 1]");
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    /// Builds an image by evaluating `f(y, x, channel)`; results are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    let v = f(y, x, c);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * Self::CHANNELS);
        Self { height, width, data }
    }

    pub fn ensure_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Decodes any 8-bit image the `image` crate understands, scaling by `1/255`.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Ok(Self::from_raw_unchecked(h as usize, w as usize, data))
    }

    /// Quantizes to 8 bits with round-to-nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Ordered frames with a designated center frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
    center: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, center: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument("no frames".into()));
        };
        for (i, f) in frames.iter().enumerate().skip(1) {
            f.ensure_same_dims(first, &format!("frame {i} vs frame 0"))?;
        }
        if center >= frames.len() {
            return Err(Error::CenterOutOfRange {
                center,
                len: frames.len(),
            });
        }
        Ok(Self { frames, center })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn center_index(&self) -> usize {
        self.center
    }

    pub fn center(&self) -> &Image {
        &self.frames[self.center]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Non-center frame indices in ascending order.
    pub fn neighbor_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames.len()).filter(move |&i| i != self.center)
    }
}

/// PNG files in `dir` sorted by file name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn load_frame_dir(dir: &Path, center: usize) -> Result<FrameSequence> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    if center >= files.len() {
        return Err(Error::CenterOutOfRange {
            center,
            len: files.len(),
        });
    }
    let frames = files
        .iter()
        .map(|p| Image::load(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, center)
}

/// Per-pixel `(u, v)` displacement in pixel units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "flow must be at least 1x1, got {height}x{width}"
            )));
        }
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "flow components of length {} and {} for {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow component".into()));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        assert!(height > 0 && width > 0 && u.is_finite() && v.is_finite());
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn u(&self) -> &[f32] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }
}
