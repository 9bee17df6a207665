//! Deterministic synthetic scenes and additive rain streaks.
//!
//! All randomness comes from ChaCha8 seeded with an explicit `u64`, so
//! outputs are identical across platforms and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame_io::{FlowField, FrameSequence, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainConfig {
    /// Target fraction of covered pixels, in `[0, 0.5]`.
    pub density: f64,
    pub streak_length: usize,
    /// Degrees from vertical.
    pub angle: f64,
    /// Additive brightness at full coverage, in `(0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl Default for RainConfig {
    fn default() -> Self {
        Self {
            density: 0.02,
            streak_length: 12,
            angle: 10.0,
            intensity: 0.4,
            seed: 0,
        }
    }
}

impl RainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.density) {
            return Err(Error::InvalidArgument(format!(
                "rain density {} outside [0, 0.5]",
                self.density
            )));
        }
        if self.streak_length == 0 {
            return Err(Error::InvalidArgument("streak length must be >= 1".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rain intensity {} outside (0, 1]",
                self.intensity
            )));
        }
        if !self.angle.is_finite() {
            return Err(Error::NonFinite("rain angle".into()));
        }
        Ok(())
    }
}

/// Fraction of coverage below which an anti-aliasing tap is dropped.
const MIN_TAP_COVERAGE: f64 = 0.1;

/// Anti-aliased straight streaks, max-composited, placed until the covered
/// fraction reaches `density`. The single channel is replicated to RGB.
pub fn synth_rain_layer(h: usize, w: usize, cfg: &RainConfig) -> Result<Image> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("rain layer must be at least 1x1".into()));
    }
    let mut layer = vec![0.0f32; h * w];
    let target = (cfg.density * (h * w) as f64).round() as usize;
    let mut covered = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sin, cos) = cfg.angle.to_radians().sin_cos();
    let len = cfg.streak_length as f64;
    // streaks may start above/left of the frame so coverage is uniform at the edges
    let span_x = (w as f64 + len * sin.abs(), -(len * sin).max(0.0));
    let span_y = (h as f64 + len * cos.abs(), -(len * cos).max(0.0));
    let max_attempts = 64 * (h * w).max(1);
    let mut attempts = 0;
    while covered < target && attempts < max_attempts {
        attempts += 1;
        let x0 = span_x.1 + rng.gen::<f64>() * span_x.0;
        let y0 = span_y.1 + rng.gen::<f64>() * span_y.0;
        let brightness = cfg.intensity * rng.gen_range(0.8..=1.0);
        for t in 0..cfg.streak_length {
            let x = x0 + t as f64 * sin;
            let y = (y0 + t as f64 * cos).round();
            if y < 0.0 || y >= h as f64 {
                continue;
            }
            let px = x.floor();
            let frac = x - px;
            for (dx, cov) in [(0.0, 1.0 - frac), (1.0, frac)] {
                let xi = px + dx;
                if cov < MIN_TAP_COVERAGE || xi < 0.0 || xi >= w as f64 {
                    continue;
                }
                let idx = y as usize * w + xi as usize;
                let v = (brightness * cov) as f32;
                if layer[idx] == 0.0 {
                    covered += 1;
                }
                layer[idx] = layer[idx].max(v);
            }
        }
    }
    let data = layer.iter().flat_map(|&v| [v; 3]).collect();
    Ok(Image::from_raw_unchecked(h, w, data))
}

/// Fraction of pixels with any nonzero channel.
pub fn covered_fraction(layer: &Image) -> f64 {
    let n = layer
        .data()
        .chunks_exact(3)
        .filter(|p| p.iter().any(|&v| v != 0.0))
        .count();
    n as f64 / (layer.height() * layer.width()) as f64
}

/// `clip(clean + rain, 0, 1)`.
pub fn add_rain(clean: &Image, rain: &Image) -> Result<Image> {
    clean.ensure_same_dims(rain, "clean vs rain")?;
    let data = clean
        .data()
        .iter()
        .zip(rain.data())
        .map(|(b, r)| (b + r).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_raw_unchecked(clean.height(), clean.width(), data))
}

/// Smooth multi-octave value noise with a per-channel tint, in roughly
/// `[0.1, 0.6]` so additive rain rarely clips.
pub fn synth_scene(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E5EE_D000_0001);
    let octaves: Vec<(usize, f32, Vec<f32>)> = [(16usize, 0.5f32), (6, 0.3), (3, 0.2)]
        .iter()
        .map(|&(cell, amp)| {
            let gh = h / cell + 2;
            let gw = w / cell + 2;
            (cell, amp, (0..gh * gw).map(|_| rng.gen::<f32>()).collect())
        })
        .collect();
    let tint: [f32; 3] = [rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0)];
    let mut lum = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for (cell, amp, grid) in &octaves {
                let gw = w / cell + 2;
                let fy = y as f32 / *cell as f32;
                let fx = x as f32 / *cell as f32;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (smoothstep(fy - iy as f32), smoothstep(fx - ix as f32));
                let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                v += amp * (top * (1.0 - ty) + bot * ty);
            }
            lum[y * w + x] = v;
        }
    }
    Image::from_fn(h, w, |y, x, c| 0.1 + 0.5 * lum[y * w + x] * tint[c])
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Samples `img` at `(y - dy, x - dx)` with bilinear interpolation and
/// replicated borders, i.e. translates the content by `(dx, dy)`.
pub fn translate(img: &Image, dx: f64, dy: f64) -> Image {
    let (h, w) = img.dims();
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
    Image::from_fn(h, w, |y, x, c| {
        let sy = (y as f64 - dy).clamp(0.0, hm);
        let sx = (x as f64 - dx).clamp(0.0, wm);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
        let (y0, x0) = (y0 as usize, x0 as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
        let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainySequence {
    pub rainy: FrameSequence,
    pub clean: FrameSequence,
    /// One flow per non-center frame (ascending), mapping it onto the center.
    pub flows: Vec<FlowField>,
}

/// Per-frame seed: frames never share a rain layer.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed.wrapping_add((frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Frame `n` shows `clean` translated by `motion * (n - c)`; each frame gets
/// an independent rain layer. The true flow of frame `n` onto the center is
/// the constant `motion * (n - c)`.
pub fn make_rainy_sequence(
    clean: &Image,
    n_frames: usize,
    motion: (f64, f64),
    cfg: &RainConfig,
) -> Result<RainySequence> {
    cfg.validate()?;
    if n_frames == 0 || n_frames % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame count must be odd, got {n_frames}"
        )));
    }
    let (h, w) = clean.dims();
    let center = n_frames / 2;
    let reach = center as f64;
    if !(motion.0.is_finite() && motion.1.is_finite())
        || motion.0.abs() * reach >= w as f64
        || motion.1.abs() * reach >= h as f64
    {
        return Err(Error::InvalidArgument(format!(
            "motion {motion:?} over {n_frames} frames leaves no visible region in {h}x{w}"
        )));
    }
    let mut clean_frames = Vec::with_capacity(n_frames);
    let mut rainy_frames = Vec::with_capacity(n_frames);
    let mut flows = Vec::with_capacity(n_frames - 1);
    for n in 0..n_frames {
        let k = n as f64 - center as f64;
        let frame = translate(clean, motion.0 * k, motion.1 * k);
        let layer = synth_rain_layer(
            h,
            w,
            &RainConfig {
                seed: frame_seed(cfg.seed, n),
                ..*cfg
            },
        )?;
        rainy_frames.push(add_rain(&frame, &layer)?);
        clean_frames.push(frame);
        if n != center {
            flows.push(FlowField::constant(
                h,
                w,
                (motion.0 * k) as f32,
                (motion.1 * k) as f32,
            ));
        }
    }
    Ok(RainySequence {
        rainy: FrameSequence::new(rainy_frames, center)?,
        clean: FrameSequence::new(clean_frames, center)?,
        flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_warp::backward_warp;
    use crate::stacking::{align_to_center, temporal_median};

    #[test]
    fn zero_density_is_empty() {
        let cfg = RainConfig {
            density: 0.0,
            ..Default::default()
        };
        let l = synth_rain_layer(32, 32, &cfg).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_layer() {
        let cfg = RainConfig {
            seed: 99,
            ..Default::default()
        };
        assert_eq!(synth_rain_layer(64, 48, &cfg).unwrap(), synth_rain_layer(64, 48, &cfg).unwrap());
        let other = RainConfig { seed: 100, ..cfg };
        assert_ne!(synth_rain_layer(64, 48, &cfg).unwrap(), synth_rain_layer(64, 48, &other).unwrap());
    }

    #[test]
    fn coverage_tracks_density() {
        for seed in 0..5 {
            let cfg = RainConfig {
                seed,
                ..Default::default()
            };
            let f = covered_fraction(&synth_rain_layer(256, 256, &cfg).unwrap());
            assert!((0.016..=0.024).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn streaks_are_line_segments() {
        let cfg = RainConfig {
            density: 0.002,
            angle: 0.0,
            streak_length: 9,
            ..Default::default()
        };
        let l = synth_rain_layer(128, 128, &cfg).unwrap();
        // vertical streaks: every covered pixel has a covered vertical neighbour
        for y in 0..128 {
            for x in 0..128 {
                if l.get(y, x, 0) > 0.0 {
                    let up = y > 0 && l.get(y - 1, x, 0) > 0.0;
                    let down = y < 127 && l.get(y + 1, x, 0) > 0.0;
                    assert!(up || down, "isolated pixel at ({y}, {x})");
                }
                assert!(l.get(y, x, 0) <= 0.4);
                assert_eq!(l.get(y, x, 0), l.get(y, x, 2));
            }
        }
    }

    #[test]
    fn invalid_rain_config() {
        for cfg in [
            RainConfig { density: 0.6, ..Default::default() },
            RainConfig { streak_length: 0, ..Default::default() },
            RainConfig { intensity: 0.0, ..Default::default() },
            RainConfig { intensity: 1.2, ..Default::default() },
        ] {
            assert!(synth_rain_layer(8, 8, &cfg).is_err());
        }
    }

    #[test]
    fn add_rain_cases() {
        let clean = synth_scene(8, 8, 1);
        assert_eq!(add_rain(&clean, &Image::filled(8, 8, 0.0)).unwrap(), clean);
        let base = Image::filled(2, 2, 0.5);
        let rain = Image::from_fn(2, 2, |y, x, _| if (y, x) == (1, 0) { 0.3 } else { 0.0 });
        let r = add_rain(&base, &rain).unwrap();
        assert!((r.get(1, 0, 0) - 0.8).abs() < 1e-7);
        assert_eq!(r.get(0, 0, 0), 0.5);
        let r = add_rain(&Image::filled(1, 1, 0.9), &Image::filled(1, 1, 0.5)).unwrap();
        assert_eq!(r.get(0, 0, 1), 1.0);
        assert!(add_rain(&base, &Image::filled(2, 3, 0.0)).is_err());
    }

    #[test]
    fn static_clean_sequence() {
        let clean = synth_scene(16, 16, 2);
        let cfg = RainConfig {
            density: 0.0,
            ..Default::default()
        };
        let s = make_rainy_sequence(&clean, 5, (0.0, 0.0), &cfg).unwrap();
        assert!(s.rainy.frames().iter().all(|f| *f == clean));
        assert!(s.flows.iter().all(|f| *f == FlowField::zeros(16, 16)));
    }

    #[test]
    fn translation_flows_are_frame_offsets() {
        let clean = synth_scene(16, 16, 3);
        let s = make_rainy_sequence(&clean, 7, (1.0, 0.0), &RainConfig::default()).unwrap();
        let offsets: Vec<f32> = s.flows.iter().map(|f| f.u()[0]).collect();
        assert_eq!(offsets, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        assert!(s.flows.iter().all(|f| f.v().iter().all(|&v| v == 0.0)));
        assert_eq!(s.rainy.center_index(), 3);
    }

    #[test]
    fn true_flows_align_clean_content() {
        let clean = synth_scene(48, 48, 4);
        let s = make_rainy_sequence(&clean, 7, (1.0, 0.0), &RainConfig::default()).unwrap();
        let c = s.clean.center();
        let rain_c = s.rainy.center();
        for (i, n) in s.rainy.neighbor_indices().enumerate() {
            let warped = backward_warp(&s.rainy.frames()[n], &s.flows[i]).unwrap();
            let warped_clean = backward_warp(&s.clean.frames()[n], &s.flows[i]).unwrap();
            for y in 0..48 {
                for x in 4..44 {
                    let rainy_here = warped.image.pixel(y, x) != warped_clean.image.pixel(y, x)
                        || rain_c.pixel(y, x) != c.pixel(y, x);
                    if warped.is_valid(y, x) && !rainy_here {
                        assert_eq!(warped.image.pixel(y, x), c.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn too_much_motion_rejected() {
        let clean = synth_scene(8, 8, 5);
        assert!(make_rainy_sequence(&clean, 7, (3.0, 0.0), &RainConfig::default()).is_err());
        assert!(make_rainy_sequence(&clean, 6, (0.0, 0.0), &RainConfig::default()).is_err());
    }

    #[test]
    fn median_recovers_static_background() {
        let clean = synth_scene(128, 128, 6);
        let cfg = RainConfig {
            seed: 17,
            ..Default::default()
        };
        let s = make_rainy_sequence(&clean, 7, (0.0, 0.0), &cfg).unwrap();
        let aligned = align_to_center(&s.rainy, &s.flows).unwrap();
        let median = temporal_median(s.rainy.center(), &aligned).unwrap();
        let exact = (0..128 * 128)
            .filter(|i| median.pixel(i / 128, i % 128) == clean.pixel(i / 128, i % 128))
            .count();
        assert!(exact as f64 / (128.0 * 128.0) > 0.999, "{exact}");
    }
}
