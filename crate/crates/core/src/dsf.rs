//! Dynamic stacking filter.
//!
//! `DSF(G; a, b) = sum_n x_n softmax(-a D)_n` with `D_n = (1/N) sum_j |x_n - b x_j|`.
//! The sharpness `a` and gate `b` move the output between four statistics:
//!
//! | `a`   | `b` | result                      |
//! |-------|-----|-----------------------------|
//! | 0     | any | mean                        |
//! | +inf  | 1   | median                      |
//! | +inf  | 0   | min (non-negative inputs)   |
//! | -inf  | 0   | max (non-negative inputs)   |

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::smooth_stats::{
    check_gradient_sharpness, gated_filter_grad, mad_profile, smooth_mad_profile, softmin_fuse,
};

/// Scalar filter with exact absolute deviations.
pub fn dsf_scalar(g: &[f64], a: f64, b: f64) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    if g.len() == 1 {
        return g[0];
    }
    softmin_fuse(g, &mad_profile(g, b), a)
}

/// Scalar filter with `|.|` replaced by `soft_abs(., a)`; this is the function
/// [`dsf_grad`] differentiates.
pub fn dsf_scalar_smooth(g: &[f64], a: f64, b: f64) -> f64 {
    assert!(!g.is_empty(), "empty candidate set");
    softmin_fuse(g, &smooth_mad_profile(g, b, a), a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsfGrad {
    pub value: f64,
    pub d_x: Vec<f64>,
    pub d_a: f64,
    pub d_b: f64,
}

pub fn dsf_grad(g: &[f64], a: f64, b: f64) -> Result<DsfGrad> {
    if g.is_empty() {
        return Err(Error::InvalidArgument("candidate set is empty".into()));
    }
    check_gradient_sharpness(a)?;
    if !b.is_finite() {
        return Err(Error::NonFinite("gate b".into()));
    }
    let (value, d_x, d_a, d_b) = gated_filter_grad(g, a, b);
    Ok(DsfGrad {
        value,
        d_x,
        d_a,
        d_b,
    })
}

/// `N x H x W x C` candidates, candidate axis leading.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(n: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature stack extents must be positive, got {n}x{height}x{width}x{channels}"
            )));
        }
        if data.len() != n * height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n}x{height}x{width}x{channels} stack",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature stack".into()));
        }
        Ok(Self {
            n,
            height,
            width,
            channels,
            data,
        })
    }

    /// Stacks equally shaped `H x W x C` slices along a new leading axis.
    pub fn from_slices(slices: &[FeatureMap]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("no candidate slices".into()))?;
        let mut data = Vec::with_capacity(slices.len() * first.data.len());
        for s in slices {
            if s.dims() != first.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "candidate slice {:?} vs {:?}",
                    s.dims(),
                    first.dims()
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(slices.len(), first.height, first.width, first.channels, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((n * self.height + y) * self.width + x) * self.channels + c]
    }

    /// The candidates at one site, in stack order.
    pub fn candidates(&self, y: usize, x: usize, c: usize) -> Vec<f64> {
        (0..self.n).map(|n| self.get(n, y, x, c)).collect()
    }
}

/// Dense `H x W x C` array of fused values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Per-pixel sharpness and gate maps, broadcast over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DsfParams {
    height: usize,
    width: usize,
    a_map: Vec<f64>,
    b_map: Vec<f64>,
}

impl DsfParams {
    pub fn new(height: usize, width: usize, a_map: Vec<f64>, b_map: Vec<f64>) -> Result<Self> {
        if a_map.len() != height * width || b_map.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "dsf maps of length {} and {} for {height}x{width}",
                a_map.len(),
                b_map.len()
            )));
        }
        if a_map.iter().chain(&b_map).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dsf parameter map".into()));
        }
        Ok(Self {
            height,
            width,
            a_map,
            b_map,
        })
    }

    pub fn constant(height: usize, width: usize, a: f64, b: f64) -> Self {
        Self::new(height, width, vec![a; height * width], vec![b; height * width])
            .expect("finite constant parameters")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn a_map(&self) -> &[f64] {
        &self.a_map
    }

    pub fn b_map(&self) -> &[f64] {
        &self.b_map
    }
}

/// Applies [`dsf_scalar`] independently at every `(y, x, c)` site.
pub fn dsf_map(stack: &FeatureStack, params: &DsfParams) -> Result<FeatureMap> {
    let (n, h, w, c) = stack.dims();
    if params.dims() != (h, w) {
        return Err(Error::DimensionMismatch(format!(
            "dsf params {:?} vs stack spatial size {:?}",
            params.dims(),
            (h, w)
        )));
    }
    let mut out = vec![0.0; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        let mut g = vec![0.0; n];
        for x in 0..w {
            let (a, b) = (params.a_map[y * w + x], params.b_map[y * w + x]);
            for ch in 0..c {
                for (k, v) in g.iter_mut().enumerate() {
                    *v = stack.get(k, y, x, ch);
                }
                row[x * c + ch] = dsf_scalar(&g, a, b);
            }
        }
    });
    Ok(FeatureMap {
        height: h,
        width: w,
        channels: c,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooth_stats::{exact_max, exact_mean, exact_median, exact_min};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: [f64; 3] = [0.1, 0.5, 0.9];

    #[test]
    fn scalar_limits() {
        for b in [-2.0, 0.0, 1.0, 7.5] {
            assert!((dsf_scalar(&G, 0.0, b) - 0.5).abs() < 1e-15);
        }
        assert!((dsf_scalar(&G, 500.0, 1.0) - exact_median(&G)).abs() < 1e-6);
        assert!((dsf_scalar(&G, 500.0, 0.0) - exact_min(&G)).abs() < 1e-6);
        assert!((dsf_scalar(&G, -500.0, 0.0) - exact_max(&G)).abs() < 1e-6);
        for (a, b) in [(0.0, 0.0), (500.0, 1.0), (-40.0, 3.0)] {
            assert!((dsf_scalar(&[0.3; 3], a, b) - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn map_singleton_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..4 * 5 * 2).map(|_| rng.gen()).collect();
        let stack = FeatureStack::new(1, 4, 5, 2, data.clone()).unwrap();
        let out = dsf_map(&stack, &DsfParams::constant(4, 5, 123.0, 0.7)).unwrap();
        assert_eq!(out.data, data);

        let data: Vec<f64> = (0..3 * 4 * 5 * 2).map(|_| rng.gen()).collect();
        let stack = FeatureStack::new(3, 4, 5, 2, data).unwrap();
        let out = dsf_map(&stack, &DsfParams::constant(4, 5, 0.0, 1.0)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..2 {
                    let m = exact_mean(&stack.candidates(y, x, c));
                    assert!((out.get(y, x, c) - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn map_median_limit_matches_pixelwise_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // per site a shifted permutation of widely spaced values
        let mut data = vec![0.0; 3 * 4 * 4 * 2];
        for site in 0..4 * 4 * 2 {
            let shift = rng.gen_range(0.0..0.1);
            let first = rng.gen_range(0..3);
            for k in 0..3 {
                data[k * 32 + site] = G[(first + k) % 3] + shift;
            }
        }
        let stack = FeatureStack::new(3, 4, 4, 2, data).unwrap();
        let out = dsf_map(&stack, &DsfParams::constant(4, 4, 500.0, 1.0)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    let med = exact_median(&stack.candidates(y, x, c));
                    assert!((out.get(y, x, c) - med).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn map_equals_pixelwise_scalar_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w, c) = (4, 3, 5, 3);
        let data: Vec<f64> = (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stack = FeatureStack::new(n, h, w, c, data).unwrap();
        let a: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let b: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let params = DsfParams::new(h, w, a.clone(), b.clone()).unwrap();
        let out = dsf_map(&stack, &params).unwrap();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let want = dsf_scalar(&stack.candidates(y, x, ch), a[y * w + x], b[y * w + x]);
                    assert_eq!(out.get(y, x, ch).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn map_dimension_mismatch() {
        let stack = FeatureStack::new(2, 3, 3, 1, vec![0.0; 18]).unwrap();
        assert!(dsf_map(&stack, &DsfParams::constant(3, 4, 1.0, 1.0)).is_err());
        assert!(FeatureStack::new(2, 3, 3, 1, vec![0.0; 17]).is_err());
        assert!(DsfParams::new(2, 2, vec![0.0; 4], vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_special_cases() {
        let g = dsf_grad(&[0.2, 0.9, 0.4, 0.6], 0.0, 0.8).unwrap();
        assert!(g.d_x.iter().all(|v| (v - 0.25).abs() < 1e-15));
        for a in [-20.0, 0.5, 20.0] {
            let g = dsf_grad(&[0.3, 0.3, 0.3], a, 0.6).unwrap();
            assert!(g.d_b.abs() < 1e-15);
        }
        assert!(dsf_grad(&[0.1], 60.0, 1.0).is_err());
        assert!(dsf_grad(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn grad_value_is_smooth_forward() {
        let g = [0.12, 0.8, 0.45];
        let gr = dsf_grad(&g, 9.0, 0.7).unwrap();
        assert!((gr.value - dsf_scalar_smooth(&g, 9.0, 0.7)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn output_is_convex_combination(g in prop::collection::vec(-3.0f64..3.0, 1..10), a in -1e3f64..1e3, b in -2.0f64..3.0) {
            let v = dsf_scalar(&g, a, b);
            prop_assert!(v >= exact_min(&g) - 1e-12 && v <= exact_max(&g) + 1e-12);
        }

        #[test]
        fn permutation_invariant(g in prop::collection::vec(0.0f64..1.0, 2..9), a in -100.0f64..100.0, b in 0.0f64..1.5, rot in 1usize..9) {
            let mut p = g.clone();
            p.rotate_left(rot % g.len());
            p.reverse();
            prop_assert!((dsf_scalar(&g, a, b) - dsf_scalar(&p, a, b)).abs() < 1e-12);
        }

        #[test]
        fn continuous_in_parameters(g in prop::collection::vec(0.0f64..1.0, 2..9), a in -50.0f64..50.0, b in 0.0f64..1.5) {
            let base = dsf_scalar(&g, a, b);
            for eps in [1e-6, 1e-8, 1e-10] {
                let d = (dsf_scalar(&g, a + eps, b) - base).abs().max((dsf_scalar(&g, a, b + eps) - base).abs());
                prop_assert!(d <= 1e3 * eps);
            }
        }
    }
}
