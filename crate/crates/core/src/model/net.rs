//! Dual-branch U-Net built from S3ML and TSML layers.
//!
//! The spatial branch carries `c` channels derived from the center frame; the
//! temporal branch carries `N * c` channels, one slice of `c` per aligned
//! frame. Each encoder level applies S3ML to both branches, fuses them into
//! the temporal branch with TSML, then halves the resolution. The decoder mirrors this,
//! adding the encoder output of the same level back as a residual skip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{init_s3ml, init_tsml, s3ml_forward, tsml_forward, LayerConfig};
use super::ops::{add, bilinear_resize, concat_channels, conv3};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::frame_io::{FlowField, FrameSequence, Image};
use crate::stacking::align_to_center;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    /// Spatial branch width and per-frame width of the temporal branch.
    pub channels: usize,
    pub state_dim: usize,
    pub layer: LayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 7,
            height: 64,
            width: 64,
            levels: 2,
            channels: 8,
            state_dim: 4,
            layer: LayerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Derain,
    Flow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOutput {
    Derain(Image),
    Flows(Vec<FlowField>),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(2..=4).contains(&self.levels) {
            return bad(format!("levels must be in 2..=4, got {}", self.levels));
        }
        if !(4..=32).contains(&self.channels) {
            return bad(format!("channels must be in 4..=32, got {}", self.channels));
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.state_dim == 0 {
            return bad("state_dim must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty input size {}x{}", self.height, self.width));
        }
        if !(self.layer.local_scale > 0.0 && self.layer.local_scale <= 1.0) {
            return bad(format!("local_scale must be in (0, 1], got {}", self.layer.local_scale));
        }
        Ok(())
    }

    /// Spatial size at each encoder level.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.height, self.width)];
        for _ in 1..self.levels {
            let (h, w) = *dims.last().unwrap();
            dims.push((h.div_ceil(2), w.div_ceil(2)));
        }
        dims
    }

    /// Seeded random parameters covering every tensor the forward pass reads.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (n, c, s) = (self.frames, self.channels, self.state_dim);
        init_conv3(&mut store, "embed_s", c, 3, &mut rng);
        init_conv3(&mut store, "embed_t", n * c, 3 * n, &mut rng);
        let dims = self.level_dims();
        for (i, &(h, w)) in dims.iter().enumerate() {
            init_s3ml(&mut store, &format!("enc{i}.s3ml"), c, s, &mut rng);
            init_s3ml(&mut store, &format!("enc{i}.s3ml_t"), n * c, s, &mut rng);
            init_tsml(&mut store, &format!("enc{i}.tsml"), n, c, s, h, w, &mut rng);
        }
        for (i, &(h, w)) in dims.iter().enumerate().take(self.levels - 1) {
            init_s3ml(&mut store, &format!("dec{i}.s3ml"), c, s, &mut rng);
            init_s3ml(&mut store, &format!("dec{i}.s3ml_t"), n * c, s, &mut rng);
            init_tsml(&mut store, &format!("dec{i}.tsml"), n, c, s, h, w, &mut rng);
        }
        init_conv3(&mut store, "head_derain", 3, (n + 1) * c, &mut rng);
        init_conv3(&mut store, "head_flow", 2 * (n - 1), (n + 1) * c, &mut rng);
        Ok(store)
    }
}

fn init_conv3(store: &mut ParamStore, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    let k = 1.0 / ((cin * 9) as f32).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-k..=k)).collect::<Vec<_>>();
    let w = draw(cout * cin * 9);
    let b = draw(cout);
    store.insert(format!("{name}.w"), Tensor::from_parts(vec![cout, cin, 3, 3], w));
    store.insert(format!("{name}.b"), Tensor::from_parts(vec![cout], b));
}

fn apply_conv3(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    conv3(x, store.get(&format!("{name}.w"))?, store.get(&format!("{name}.b"))?)
}

fn image_tensor(img: &Image) -> Tensor {
    let (h, w) = img.dims();
    Tensor::from_parts(vec![h, w, 3], img.data().to_vec())
}

/// Runs the network on `seq`. Derain mode aligns every neighbour to the
/// center with `flows` first and returns one image; flow mode reads the raw
/// frames and returns `N - 1` flow fields, one per non-center frame.
pub fn vdmamba_forward(
    seq: &FrameSequence,
    flows: &[FlowField],
    params: &ParamStore,
    cfg: &ModelConfig,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if seq.len() != cfg.frames || seq.dims() != (cfg.height, cfg.width) {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} frames of {}x{}, got {} of {:?}",
            cfg.frames,
            cfg.height,
            cfg.width,
            seq.len(),
            seq.dims()
        )));
    }
    let frames: Vec<Tensor> = match mode {
        ForwardMode::Derain => {
            if flows.is_empty() {
                return Err(Error::MissingComponent("flows"));
            }
            let mut aligned = align_to_center(seq, flows)?.into_iter();
            (0..seq.len())
                .map(|i| {
                    if i == seq.center_index() {
                        image_tensor(seq.center())
                    } else {
                        image_tensor(&aligned.next().unwrap().image)
                    }
                })
                .collect()
        }
        ForwardMode::Flow => seq.frames().iter().map(image_tensor).collect(),
    };
    let center = image_tensor(seq.center());
    let stacked = concat_channels(&frames.iter().collect::<Vec<_>>())?;

    let layer = &cfg.layer;
    let mut fs = apply_conv3(params, "embed_s", &center)?;
    let mut ft = apply_conv3(params, "embed_t", &stacked)?;
    let dims = cfg.level_dims();
    let mut skips = Vec::with_capacity(cfg.levels);
    for (i, &d) in dims.iter().enumerate() {
        if i > 0 {
            fs = bilinear_resize(&fs, d)?;
            ft = bilinear_resize(&ft, d)?;
        }
        fs = s3ml_forward(&fs, params, &format!("enc{i}.s3ml"), layer)?;
        ft = s3ml_forward(&ft, params, &format!("enc{i}.s3ml_t"), layer)?;
        ft = tsml_forward(&fs, &ft, params, &format!("enc{i}.tsml"))?;
        skips.push((fs.clone(), ft.clone()));
    }
    for i in (0..cfg.levels - 1).rev() {
        let (ss, st) = &skips[i];
        fs = add(&bilinear_resize(&fs, dims[i])?, ss)?;
        ft = add(&bilinear_resize(&ft, dims[i])?, st)?;
        fs = s3ml_forward(&fs, params, &format!("dec{i}.s3ml"), layer)?;
        ft = s3ml_forward(&ft, params, &format!("dec{i}.s3ml_t"), layer)?;
        ft = tsml_forward(&fs, &ft, params, &format!("dec{i}.tsml"))?;
    }
    let features = concat_channels(&[&fs, &ft])?;
    let (h, w) = (cfg.height, cfg.width);
    match mode {
        ForwardMode::Derain => {
            let residual = apply_conv3(params, "head_derain", &features)?;
            let out = add(&residual, &center)?;
            let d = out.data();
            Ok(ForwardOutput::Derain(Image::from_fn(h, w, |y, x, c| {
                d[(y * w + x) * 3 + c]
            })))
        }
        ForwardMode::Flow => {
            let raw = apply_conv3(params, "head_flow", &features)?;
            let k = 2 * (cfg.frames - 1);
            let d = raw.data();
            (0..cfg.frames - 1)
                .map(|f| {
                    let u = (0..h * w).map(|p| d[p * k + 2 * f]).collect();
                    let v = (0..h * w).map(|p| d[p * k + 2 * f + 1]).collect();
                    FlowField::new(h, w, u, v)
                })
                .collect::<Result<_>>()
                .map(ForwardOutput::Flows)
        }
    }
}
