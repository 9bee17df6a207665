//! Selective scan: a diagonal linear state recurrence whose step size and
//! input/output projections depend on the current token.
//!
//! For token `x_t` (width `D`) and state `h_t` (`D x S`):
//!
//! ```text
//! dt_t = softplus(W_dt x_t + b_dt)                 (D)
//! B_t  = W_B x_t,  C_t = W_C x_t                   (S)
//! h_t[d, s] = exp(dt_t[d] A[d, s]) h_{t-1}[d, s] + dt_t[d] B_t[s] x_t[d]
//! y_t[d]    = sum_s C_t[s] h_t[d, s] + D_skip[d] x_t[d]
//! ```

use rayon::prelude::*;

use super::ops::softplus;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub d_model: usize,
    pub state_dim: usize,
    /// Continuous-time transition `[D, S]`, expected non-positive.
    pub a: Tensor,
    pub w_dt: Tensor,
    pub b_dt: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn new(
        a: Tensor,
        w_dt: Tensor,
        b_dt: Tensor,
        w_b: Tensor,
        w_c: Tensor,
        d_skip: Tensor,
    ) -> Result<Self> {
        let [d, s] = a.shape()[..] else {
            return Err(Error::DimensionMismatch(format!(
                "ssm A must be [D, S], got {:?}",
                a.shape()
            )));
        };
        w_dt.expect_shape(&[d, d], "ssm W_dt")?;
        b_dt.expect_shape(&[d], "ssm b_dt")?;
        w_b.expect_shape(&[s, d], "ssm W_B")?;
        w_c.expect_shape(&[s, d], "ssm W_C")?;
        d_skip.expect_shape(&[d], "ssm D")?;
        Ok(Self {
            d_model: d,
            state_dim: s,
            a,
            w_dt,
            b_dt,
            w_b,
            w_c,
            d_skip,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).cloned();
        Self::new(
            get("a")?,
            get("w_dt")?,
            get("b_dt")?,
            get("w_b")?,
            get("w_c")?,
            get("d")?,
        )
    }
}

/// Per-token discretization: `(exp(dt A), dt B x, C)` flattened as `[D*S]`,
/// `[D*S]`, `[S]`.
struct Discretized {
    decay: Vec<f64>,
    drive: Vec<f64>,
    readout: Vec<f64>,
}

fn discretize(x: &[f32], p: &SsmParams) -> Discretized {
    let (d, s) = (p.d_model, p.state_dim);
    let proj = |w: &Tensor, rows: usize, bias: Option<&Tensor>| -> Vec<f64> {
        let wd = w.data();
        (0..rows)
            .map(|r| {
                let acc: f64 = (0..d).map(|k| wd[r * d + k] as f64 * x[k] as f64).sum();
                acc + bias.map_or(0.0, |b| b.data()[r] as f64)
            })
            .collect()
    };
    let dt: Vec<f64> = proj(&p.w_dt, d, Some(&p.b_dt)).into_iter().map(softplus).collect();
    let bt = proj(&p.w_b, s, None);
    let readout = proj(&p.w_c, s, None);
    let a = p.a.data();
    let mut decay = vec![0.0; d * s];
    let mut drive = vec![0.0; d * s];
    for i in 0..d {
        for j in 0..s {
            decay[i * s + j] = (dt[i] * a[i * s + j] as f64).exp();
            drive[i * s + j] = dt[i] * bt[j] * x[i] as f64;
        }
    }
    Discretized {
        decay,
        drive,
        readout,
    }
}

fn check_input(x: &Tensor, p: &SsmParams) -> Result<(usize, usize)> {
    let [l, d] = x.shape()[..] else {
        return Err(Error::DimensionMismatch(format!(
            "selective scan input must be [L, D], got {:?}",
            x.shape()
        )));
    };
    if d != p.d_model {
        return Err(Error::DimensionMismatch(format!(
            "scan width {d} vs parameter width {}",
            p.d_model
        )));
    }
    Ok((l, d))
}

fn readout(state: &[f64], disc: &Discretized, x: &[f32], p: &SsmParams, out: &mut [f32]) {
    let s = p.state_dim;
    let skip = p.d_skip.data();
    for (i, o) in out.iter_mut().enumerate() {
        let y: f64 = (0..s).map(|j| disc.readout[j] * state[i * s + j]).sum();
        *o = (y + skip[i] as f64 * x[i] as f64) as f32;
    }
}

/// Reference evaluation: one token at a time.
pub fn selective_scan(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let (l, d) = check_input(x, p)?;
    let s = p.state_dim;
    let mut state = vec![0.0f64; d * s];
    let mut out = vec![0.0f32; l * d];
    for t in 0..l {
        let xt = &x.data()[t * d..(t + 1) * d];
        let disc = discretize(xt, p);
        for k in 0..d * s {
            state[k] = disc.decay[k] * state[k] + disc.drive[k];
        }
        readout(&state, &disc, xt, p, &mut out[t * d..(t + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![l, d], out))
}

/// Blocked evaluation. Each chunk is scanned from a zero state while tracking
/// its cumulative decay; chunks run in parallel, then the true incoming state
/// is propagated across chunk boundaries as `h = h_local + decay_prod * h_in`.
pub fn selective_scan_chunked(x: &Tensor, p: &SsmParams, chunk: usize) -> Result<Tensor> {
    let (l, d) = check_input(x, p)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk length must be positive".into()));
    }
    let s = p.state_dim;
    let ds = d * s;
    let disc: Vec<Discretized> = (0..l)
        .into_par_iter()
        .map(|t| discretize(&x.data()[t * d..(t + 1) * d], p))
        .collect();

    // per chunk: local states and cumulative decay products for every step
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..l.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let (t0, t1) = (ci * chunk, ((ci + 1) * chunk).min(l));
            let mut local = vec![0.0f64; (t1 - t0) * ds];
            let mut prod = vec![0.0f64; (t1 - t0) * ds];
            let mut h = vec![0.0f64; ds];
            let mut g = vec![1.0f64; ds];
            for (k, t) in (t0..t1).enumerate() {
                for i in 0..ds {
                    h[i] = disc[t].decay[i] * h[i] + disc[t].drive[i];
                    g[i] *= disc[t].decay[i];
                }
                local[k * ds..(k + 1) * ds].copy_from_slice(&h);
                prod[k * ds..(k + 1) * ds].copy_from_slice(&g);
            }
            (local, prod)
        })
        .collect();

    let mut carry = vec![0.0f64; ds];
    let mut out = vec![0.0f32; l * d];
    let mut state = vec![0.0f64; ds];
    for (ci, (local, prod)) in chunks.iter().enumerate() {
        let steps = local.len() / ds;
        for k in 0..steps {
            let t = ci * chunk + k;
            for i in 0..ds {
                state[i] = local[k * ds + i] + prod[k * ds + i] * carry[i];
            }
            let xt = &x.data()[t * d..(t + 1) * d];
            readout(&state, &disc[t], xt, p, &mut out[t * d..(t + 1) * d]);
        }
        carry.copy_from_slice(&state);
    }
    Ok(Tensor::from_parts(vec![l, d], out))
}
