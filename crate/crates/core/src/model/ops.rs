//! Primitive layers on `H x W x C` tensors. Convolutions pad by replicating
//! the border so spatial extents are preserved.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis: `y = W x + b` with `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let cin = *x
        .shape()
        .last()
        .ok_or_else(|| Error::DimensionMismatch("linear on a rank-0 tensor".into()))?;
    let [cout, win] = weight.shape()[..] else {
        return Err(Error::DimensionMismatch(format!(
            "linear weight must be rank 2, got {:?}",
            weight.shape()
        )));
    };
    if win != cin {
        return Err(Error::DimensionMismatch(format!(
            "linear weight {:?} applied to {cin} input features",
            weight.shape()
        )));
    }
    bias.expect_shape(&[cout], "linear bias")?;
    let (w, b) = (weight.data(), bias.data());
    let rows = x.len() / cin.max(1);
    let mut out = vec![0.0f32; rows * cout];
    out.par_chunks_mut(cout)
        .zip(x.data().par_chunks(cin))
        .for_each(|(o, xi)| {
            for (k, ok) in o.iter_mut().enumerate() {
                let wk = &w[k * cin..(k + 1) * cin];
                *ok = b[k] + wk.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>();
            }
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}

/// 1x1 convolution; identical arithmetic to [`linear`] on the channel axis.
pub fn pointwise_conv1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.hwc()?;
    linear(x, weight, bias)
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Depthwise 5x5 convolution, weight `[C, 5, 5]`, bias `[C]`.
pub fn depthwise_conv5(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    weight.expect_shape(&[c, 5, 5], "depthwise weight")?;
    bias.expect_shape(&[c], "depthwise bias")?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for xx in 0..w {
            let o = &mut row[xx * c..(xx + 1) * c];
            o.copy_from_slice(bd);
            for ky in 0..5 {
                let sy = clamp_idx(y as isize + ky as isize - 2, h);
                for kx in 0..5 {
                    let sx = clamp_idx(xx as isize + kx as isize - 2, w);
                    let src = &xd[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for ch in 0..c {
                        o[ch] += wd[ch * 25 + ky * 5 + kx] * src[ch];
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Dense 3x3 convolution, weight `[C_out, C_in, 3, 3]`, bias `[C_out]`.
pub fn conv3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = x.hwc()?;
    let [cout, win, 3, 3] = weight.shape()[..] else {
        return Err(Error::DimensionMismatch(format!(
            "conv3 weight must be [out, in, 3, 3], got {:?}",
            weight.shape()
        )));
    };
    if win != cin {
        return Err(Error::DimensionMismatch(format!(
            "conv3 weight {:?} applied to {cin} channels",
            weight.shape()
        )));
    }
    bias.expect_shape(&[cout], "conv3 bias")?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0f32; h * w * cout];
    out.par_chunks_mut(w * cout).enumerate().for_each(|(y, row)| {
        for xx in 0..w {
            let o = &mut row[xx * cout..(xx + 1) * cout];
            o.copy_from_slice(bd);
            for ky in 0..3 {
                let sy = clamp_idx(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = clamp_idx(xx as isize + kx as isize - 1, w);
                    let src = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    for (k, ok) in o.iter_mut().enumerate() {
                        let base = k * cin * 9 + ky * 3 + kx;
                        *ok += src
                            .iter()
                            .enumerate()
                            .map(|(ci, v)| wd[base + ci * 9] * v)
                            .sum::<f32>();
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![h, w, cout], out))
}

/// Normalizes over the last axis then applies `gamma`, `beta`. A constant
/// vector (including all zeros) normalizes to zero before the affine step.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::DimensionMismatch("layer norm on a rank-0 tensor".into()))?;
    gamma.expect_shape(&[c], "layer norm gamma")?;
    beta.expect_shape(&[c], "layer norm beta")?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    out.par_chunks_mut(c).for_each(|v| {
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / c as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (k, x) in v.iter_mut().enumerate() {
            *x = ((*x as f64 - mean) * inv) as f32 * g[k] + b[k];
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| silu_scalar(v)).collect(),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, |x, y| x + y)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "elementwise op on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    ))
}

/// Splits the channel axis into `[.., ..c0]` and `[c0..]`.
pub fn split_channels(x: &Tensor, c0: usize) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = x.hwc()?;
    if c0 > c {
        return Err(Error::DimensionMismatch(format!("split at {c0} of {c} channels")));
    }
    let mut a = Vec::with_capacity(h * w * c0);
    let mut b = Vec::with_capacity(h * w * (c - c0));
    for px in x.data().chunks_exact(c) {
        a.extend_from_slice(&px[..c0]);
        b.extend_from_slice(&px[c0..]);
    }
    Ok((
        Tensor::from_parts(vec![h, w, c0], a),
        Tensor::from_parts(vec![h, w, c - c0], b),
    ))
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "concat of {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for i in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * pc..(i + 1) * pc]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, total], out))
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn bilinear_resize(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("resize target {th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let xd = x.data();
    let mut out = vec![0.0f32; th * tw * c];
    out.par_chunks_mut(tw * c).enumerate().for_each(|(y, row)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for xx in 0..tw {
            let fx = ((xx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let g = |yy: usize, xq: usize| xd[(yy * w + xq) * c + ch];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                row[xx * c + ch] = top * (1.0 - ty) + bot * ty;
            }
        }
    });
    Ok(Tensor::from_parts(vec![th, tw, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity(c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, c]);
        for i in 0..c {
            t.data_mut()[i * c + i] = 1.0;
        }
        t
    }

    #[test]
    fn pointwise_identity() {
        let x = random(&[4, 5, 3], 1);
        let y = pointwise_conv1(&x, &identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pointwise_mixes_channels() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 1.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(pointwise_conv1(&x, &w, &b).unwrap().data(), &[3.0, -0.5, 5.0]);
        assert!(pointwise_conv1(&x, &identity(3), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = random(&[6, 7, 4], 2);
        let mut k = Tensor::zeros(&[4, 5, 5]);
        for c in 0..4 {
            k.data_mut()[c * 25 + 12] = 1.0;
        }
        let y = depthwise_conv5(&x, &k, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_replicates_border() {
        // box filter on a constant image stays constant, including at the border
        let x = Tensor::filled(&[3, 3, 1], 0.5);
        let k = Tensor::filled(&[1, 5, 5], 1.0 / 25.0);
        let y = depthwise_conv5(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn conv3_center_tap_is_pointwise() {
        let x = random(&[5, 4, 2], 3);
        let mut k = Tensor::zeros(&[3, 2, 3, 3]);
        let w = [0.5f32, -1.0, 2.0, 0.25, 1.0, 1.0];
        for o in 0..3 {
            for i in 0..2 {
                k.data_mut()[(o * 2 + i) * 9 + 4] = w[o * 2 + i];
            }
        }
        let b = Tensor::zeros(&[3]);
        let y = conv3(&x, &k, &b).unwrap();
        let z = pointwise_conv1(&x, &Tensor::new(vec![3, 2], w.to_vec()).unwrap(), &b).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(30.0) - 30.0).abs() < 1e-6);
        assert!(silu_scalar(-30.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalizes_and_zero_maps_to_zero() {
        let x = random(&[3, 3, 8], 4);
        let y = layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8])).unwrap();
        for px in y.data().chunks(8) {
            let mean: f32 = px.iter().sum::<f32>() / 8.0;
            let var: f32 = px.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
        let z = layer_norm(&Tensor::zeros(&[2, 2, 4]), &Tensor::filled(&[4], 3.0), &Tensor::zeros(&[4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let x = Tensor::filled(&[6, 8, 2], 0.3);
        let y = bilinear_resize(&x, (3, 4)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let r = random(&[5, 5, 1], 5);
        assert_eq!(bilinear_resize(&r, (5, 5)).unwrap(), r);
        let up = bilinear_resize(&bilinear_resize(&x, (3, 4)).unwrap(), (6, 8)).unwrap();
        assert_eq!(up.shape(), &[6, 8, 2]);
    }

    #[test]
    fn split_and_concat_round_trip() {
        let x = random(&[3, 2, 5], 6);
        let (a, b) = split_channels(&x, 2).unwrap();
        assert_eq!(a.shape(), &[3, 2, 2]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap(), x);
    }

    #[test]
    fn shape_checks() {
        let x = random(&[2, 2, 3], 7);
        assert!(depthwise_conv5(&x, &Tensor::zeros(&[2, 5, 5]), &Tensor::zeros(&[2])).is_err());
        assert!(mul(&x, &Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
