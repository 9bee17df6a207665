use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use derain_core::dsf::{dsf_map, DsfParams, FeatureStack};
use derain_core::frame_io::{
    compute_psnr, compute_ssim, list_frame_files, load_frame_dir, read_flow, FlowField,
    FrameSequence, Image, SSIM_WINDOW,
};
use derain_core::gradcheck::{run_gradcheck, Analytic, GradCheckConfig, GradientSource};
use derain_core::model::{vdmamba_forward, ForwardMode, ForwardOutput, LayerConfig, ModelConfig, ParamStore};
use derain_core::rain_synth::{make_rainy_sequence, synth_scene, RainConfig};
use derain_core::smooth_stats::{StatGrad, StatKind};
use derain_core::stacking::{align_to_center, generate_pseudo_labels, StackingConfig};
use derain_core::dsf::DsfGrad;

use crate::config::{require, save_flow_atomic, save_png_atomic, Report};

fn secs(t: Instant) -> Value {
    json!(t.elapsed().as_secs_f64())
}

fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("."))
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

pub fn flow_name(i: usize) -> String {
    format!("flow_{i:03}.flo")
}

fn load_sequence(dir: &Path, center: Option<usize>) -> Result<FrameSequence> {
    let n = list_frame_files(dir)
        .with_context(|| format!("listing frames in {}", dir.display()))?
        .len();
    let c = center.unwrap_or(n / 2);
    load_frame_dir(dir, c).with_context(|| format!("loading frames from {}", dir.display()))
}

/// Reads `flow_NNN.flo` for every non-center frame index.
fn load_flows(dir: &Path, seq: &FrameSequence) -> Result<Vec<FlowField>> {
    seq.neighbor_indices()
        .map(|i| {
            let p = dir.join(flow_name(i));
            if !p.is_file() {
                bail!("missing flow file {}", p.display());
            }
            read_flow(&p).with_context(|| format!("reading flow {}", p.display()))
        })
        .collect()
}

fn psnr_ssim(a: &Image, b: &Image) -> Result<(f64, Option<f64>)> {
    let psnr = compute_psnr(a, b)?;
    let (h, w) = a.dims();
    let ssim = if h.min(w) >= SSIM_WINDOW {
        Some(compute_ssim(a, b)?)
    } else {
        None
    };
    Ok((psnr, ssim))
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub out: Option<PathBuf>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion_x: f64,
    pub motion_y: f64,
    pub density: f64,
    pub streak_length: usize,
    pub angle: f64,
    pub intensity: f64,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let rain = RainConfig::default();
        Self {
            out: None,
            frames: 7,
            height: 256,
            width: 256,
            motion_x: 1.0,
            motion_y: 0.0,
            density: rain.density,
            streak_length: rain.streak_length,
            angle: rain.angle,
            intensity: rain.intensity,
            seed: 0,
        }
    }
}

pub fn synth(s: &SynthSettings) -> Result<()> {
    let t0 = Instant::now();
    if s.height == 0 || s.width == 0 {
        bail!("frame size must be at least 1x1");
    }
    let out = require(&s.out, "out")?;
    let rain = RainConfig {
        density: s.density,
        streak_length: s.streak_length,
        angle: s.angle,
        intensity: s.intensity,
        seed: s.seed,
    };
    let clean = synth_scene(s.height, s.width, s.seed);
    let seq = make_rainy_sequence(&clean, s.frames, (s.motion_x, s.motion_y), &rain)?;
    for (i, (r, c)) in seq.rainy.frames().iter().zip(seq.clean.frames()).enumerate() {
        save_png_atomic(r, &out.join("rainy").join(frame_name(i)))?;
        save_png_atomic(c, &out.join("clean").join(frame_name(i)))?;
    }
    for (i, f) in seq.rainy.neighbor_indices().zip(&seq.flows) {
        save_flow_atomic(f, &out.join("flows").join(flow_name(i)))?;
    }
    println!(
        "synth: {} frames of {}x{} (center {}) -> {} in {:.2}s",
        s.frames,
        s.height,
        s.width,
        seq.rainy.center_index(),
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

// --------------------------------------------------------------- pseudo

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoSettings {
    pub frames: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub center: Option<usize>,
    pub patches: usize,
    pub theta: f64,
    pub delta: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PseudoSettings {
    fn default() -> Self {
        let st = StackingConfig::default();
        Self {
            frames: None,
            flows: None,
            clean: None,
            center: None,
            patches: st.patches,
            theta: st.theta,
            delta: st.delta,
            out: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PseudoMetrics {
    pub frames: usize,
    pub center: usize,
    pub accepted_patches: usize,
    pub total_patches: usize,
    pub acceptance_fraction: f64,
    pub psnr_rainy: Option<f64>,
    pub psnr_median: Option<f64>,
    pub psnr_gain: Option<f64>,
    pub ssim_rainy: Option<f64>,
    pub ssim_median: Option<f64>,
}

pub fn pseudo(s: &PseudoSettings) -> Result<PseudoMetrics> {
    let t0 = Instant::now();
    let cfg = StackingConfig {
        patches: s.patches,
        theta: s.theta,
        delta: s.delta,
    };
    cfg.validate()?;
    let seq = load_sequence(require(&s.frames, "frames")?, s.center)?;
    let flows = load_flows(require(&s.flows, "flows")?, &seq)?;
    let t_load = secs(t0);

    let t1 = Instant::now();
    let (median, mask) = generate_pseudo_labels(&seq, &flows, &cfg)?;
    let t_stack = secs(t1);

    let mut m = PseudoMetrics {
        frames: seq.len(),
        center: seq.center_index(),
        accepted_patches: mask.accept.iter().filter(|&&a| a == 1).count(),
        total_patches: mask.accept.len(),
        acceptance_fraction: mask.accepted_fraction(),
        psnr_rainy: None,
        psnr_median: None,
        psnr_gain: None,
        ssim_rainy: None,
        ssim_median: None,
    };
    if let Some(clean_dir) = &s.clean {
        let clean = load_sequence(clean_dir, Some(seq.center_index()))?;
        if clean.len() != seq.len() {
            bail!("{} clean frames for {} rainy frames", clean.len(), seq.len());
        }
        let (pr, sr) = psnr_ssim(seq.center(), clean.center())?;
        let (pm, sm) = psnr_ssim(&median, clean.center())?;
        m.psnr_rainy = Some(pr);
        m.psnr_median = Some(pm);
        m.psnr_gain = Some(pm - pr);
        m.ssim_rainy = sr;
        m.ssim_median = sm;
    }

    let out = out_dir(&s.out);
    save_png_atomic(&median, &out.join("median.png"))?;
    crate::config::write_atomic(&out.join("mask.txt"), mask.to_text_grid().as_bytes())?;
    save_png_atomic(&mask.render_overlay(seq.center())?, &out.join("mask_overlay.png"))?;
    let mut timings = Map::new();
    timings.insert("load_s".into(), t_load);
    timings.insert("stack_s".into(), t_stack);
    timings.insert("total_s".into(), secs(t0));
    Report {
        command: "pseudo",
        config: s,
        metrics: &m,
        timings,
    }
    .write(&out.join("report.json"))?;
    print!(
        "pseudo: accepted {}/{} patches ({:.3})",
        m.accepted_patches, m.total_patches, m.acceptance_fraction
    );
    match (m.psnr_rainy, m.psnr_median) {
        (Some(a), Some(b)) => println!(", PSNR {a:.2} -> {b:.2} dB (+{:.2})", b - a),
        _ => println!(),
    }
    Ok(m)
}

// ----------------------------------------------------------------- fuse

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSettings {
    pub frames: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub center: Option<usize>,
    pub a: f64,
    pub b: f64,
    /// `VDMF` dump holding `dsf.a` and `dsf.b` maps; overrides `a` and `b`.
    pub params: Option<PathBuf>,
    /// Prefix of the maps inside the dump, e.g. `enc0.tsml`.
    pub param_prefix: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FuseSettings {
    fn default() -> Self {
        Self {
            frames: None,
            flows: None,
            clean: None,
            center: None,
            a: 500.0,
            b: 1.0,
            params: None,
            param_prefix: None,
            out: None,
            seed: 0,
        }
    }
}

/// Fuses the center and the aligned neighbours, one DSF per pixel and channel.
pub fn fuse_frames(seq: &FrameSequence, flows: &[FlowField], params: &DsfParams) -> Result<Image> {
    let aligned = align_to_center(seq, flows)?;
    let mut candidates = vec![seq.center()];
    candidates.extend(aligned.iter().map(|w| &w.image));
    let (h, w) = seq.dims();
    let data = candidates
        .iter()
        .flat_map(|img| img.data().iter().map(|&v| v as f64))
        .collect();
    let stack = FeatureStack::new(candidates.len(), h, w, 3, data)?;
    let fused = dsf_map(&stack, params)?;
    Ok(Image::from_fn(h, w, |y, x, c| fused.get(y, x, c) as f32))
}

fn dsf_params_from_dump(path: &Path, prefix: Option<&str>, h: usize, w: usize) -> Result<DsfParams> {
    let store = ParamStore::load(path).with_context(|| format!("reading {}", path.display()))?;
    let map = |name: &str| -> Result<Vec<f64>> {
        let name = match prefix {
            Some(p) => format!("{p}.{name}"),
            None => name.to_string(),
        };
        let t = store.get(&name)?;
        t.expect_shape(&[h, w], &name)?;
        Ok(t.data().iter().map(|&v| v as f64).collect())
    };
    Ok(DsfParams::new(h, w, map("dsf.a")?, map("dsf.b")?)?)
}

pub fn fuse(s: &FuseSettings) -> Result<()> {
    let t0 = Instant::now();
    let seq = load_sequence(require(&s.frames, "frames")?, s.center)?;
    let flows = load_flows(require(&s.flows, "flows")?, &seq)?;
    let (h, w) = seq.dims();
    let params = match &s.params {
        Some(p) => dsf_params_from_dump(p, s.param_prefix.as_deref(), h, w)?,
        None => {
            if !(s.a.is_finite() && s.b.is_finite()) {
                bail!("a and b must be finite");
            }
            DsfParams::constant(h, w, s.a, s.b)
        }
    };
    let fused = fuse_frames(&seq, &flows, &params)?;
    let out = out_dir(&s.out);
    save_png_atomic(&fused, &out.join("fused.png"))?;
    let mut metrics = Map::new();
    if let Some(clean_dir) = &s.clean {
        let clean = load_sequence(clean_dir, Some(seq.center_index()))?;
        let (pr, _) = psnr_ssim(seq.center(), clean.center())?;
        let (pf, _) = psnr_ssim(&fused, clean.center())?;
        metrics.insert("psnr_rainy".into(), json!(pr));
        metrics.insert("psnr_fused".into(), json!(pf));
        println!("fuse: PSNR {pr:.2} -> {pf:.2} dB");
    } else {
        println!("fuse: wrote {}", out.join("fused.png").display());
    }
    let mut timings = Map::new();
    timings.insert("total_s".into(), secs(t0));
    Report {
        command: "fuse",
        config: s,
        metrics,
        timings,
    }
    .write(&out.join("fuse_report.json"))
}

// ------------------------------------------------------------ gradcheck

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_sharpness: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub inject_sign_bug: bool,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        Self {
            trials: g.trials,
            step: g.step,
            tolerance: g.tolerance,
            max_sharpness: g.max_sharpness,
            out: None,
            seed: 0,
            inject_sign_bug: false,
        }
    }
}

/// Negates every sharpness derivative.
struct FlippedSharpness;

impl GradientSource for FlippedSharpness {
    fn stat_grad(&self, kind: StatKind, g: &[f64], a: f64) -> derain_core::Result<StatGrad> {
        let mut r = Analytic.stat_grad(kind, g, a)?;
        r.d_a = -r.d_a;
        Ok(r)
    }

    fn dsf_grad(&self, g: &[f64], a: f64, b: f64) -> derain_core::Result<DsfGrad> {
        let mut r = Analytic.dsf_grad(g, a, b)?;
        r.d_a = -r.d_a;
        Ok(r)
    }
}

pub fn gradcheck(s: &GradcheckSettings) -> Result<bool> {
    let t0 = Instant::now();
    let cfg = GradCheckConfig {
        trials: s.trials,
        step: s.step,
        tolerance: s.tolerance,
        max_sharpness: s.max_sharpness,
        seed: s.seed,
        ..Default::default()
    };
    let source: &dyn GradientSource = if s.inject_sign_bug {
        &FlippedSharpness
    } else {
        &Analytic
    };
    let report = run_gradcheck(&cfg, source)?;
    let mut kinds = Map::new();
    for k in &report.kinds {
        println!(
            "{:<12} trials {:>4}  max rel error {:.3e}  {}",
            k.kind.to_string(),
            k.trials,
            k.max_rel_error,
            if k.passed { "ok" } else { "FAIL" }
        );
        kinds.insert(
            k.kind.to_string(),
            json!({ "trials": k.trials, "max_rel_error": k.max_rel_error, "passed": k.passed }),
        );
    }
    if let Some(out) = &s.out {
        let mut timings = Map::new();
        timings.insert("total_s".into(), secs(t0));
        Report {
            command: "gradcheck",
            config: s,
            metrics: json!({ "kinds": kinds, "passed": report.passed() }),
            timings,
        }
        .write(&out.join("gradcheck.json"))?;
    }
    Ok(report.passed())
}

// -------------------------------------------------------------- forward

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Derain,
    Flow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSettings {
    pub frames: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub center: Option<usize>,
    pub mode: Mode,
    pub params: Option<PathBuf>,
    pub save_params: Option<PathBuf>,
    pub levels: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub local_scale: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ForwardSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            frames: None,
            flows: None,
            center: None,
            mode: Mode::Derain,
            params: None,
            save_params: None,
            levels: m.levels,
            channels: m.channels,
            state_dim: m.state_dim,
            local_scale: m.layer.local_scale,
            out: None,
            seed: 0,
        }
    }
}

pub fn forward(s: &ForwardSettings) -> Result<()> {
    let t0 = Instant::now();
    let seq = load_sequence(require(&s.frames, "frames")?, s.center)?;
    let (h, w) = seq.dims();
    let cfg = ModelConfig {
        frames: seq.len(),
        height: h,
        width: w,
        levels: s.levels,
        channels: s.channels,
        state_dim: s.state_dim,
        layer: LayerConfig {
            local_scale: s.local_scale,
        },
    };
    let (mode, flows) = match s.mode {
        Mode::Derain => (ForwardMode::Derain, load_flows(require(&s.flows, "flows")?, &seq)?),
        Mode::Flow => (ForwardMode::Flow, Vec::new()),
    };
    let params = match &s.params {
        Some(p) => ParamStore::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => cfg.init_params(s.seed)?,
    };
    if let Some(p) = &s.save_params {
        crate::config::write_atomic(p, &params.encode())?;
    }
    let out = out_dir(&s.out);
    match vdmamba_forward(&seq, &flows, &params, &cfg, mode)? {
        ForwardOutput::Derain(img) => {
            save_png_atomic(&img, &out.join("derained.png"))?;
            println!(
                "forward: derain {}x{}x3 finite={} params={} in {:.2}s",
                h,
                w,
                img.data().iter().all(|v| v.is_finite()),
                params.num_values(),
                t0.elapsed().as_secs_f64()
            );
        }
        ForwardOutput::Flows(fl) => {
            for (i, f) in seq.neighbor_indices().zip(&fl) {
                save_flow_atomic(f, &out.join("flows").join(flow_name(i)))?;
            }
            println!(
                "forward: {} flow fields of {}x{} finite={} params={} in {:.2}s",
                fl.len(),
                h,
                w,
                fl.iter().all(|f| f.u().iter().chain(f.v()).all(|v| v.is_finite())),
                params.num_values(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

// -------------------------------------------------------------- metrics

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub reference: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct FrameMetrics {
    pub frame: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct MetricsSummary {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
}

pub fn metrics(s: &MetricsSettings) -> Result<MetricsSummary> {
    let t0 = Instant::now();
    let ref_dir = require(&s.reference, "reference")?;
    let test_dir = require(&s.test, "test")?;
    let refs = list_frame_files(ref_dir)?;
    let tests = list_frame_files(test_dir)?;
    if refs.len() != tests.len() {
        bail!(
            "frame count mismatch: {} in {} vs {} in {}",
            refs.len(),
            ref_dir.display(),
            tests.len(),
            test_dir.display()
        );
    }
    if refs.is_empty() {
        bail!("no frames in {}", ref_dir.display());
    }
    let frames = refs
        .iter()
        .zip(&tests)
        .map(|(r, t)| {
            let (psnr, ssim) = psnr_ssim(&Image::load(r)?, &Image::load(t)?)
                .with_context(|| format!("comparing {} with {}", r.display(), t.display()))?;
            Ok(FrameMetrics {
                frame: t.file_name().unwrap().to_string_lossy().into_owned(),
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
    let mean_ssim = frames
        .iter()
        .map(|f| f.ssim)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    let summary = MetricsSummary {
        frames,
        mean_psnr,
        mean_ssim,
    };
    let out = out_dir(&s.out);
    let mut timings = Map::new();
    timings.insert("total_s".into(), secs(t0));
    Report {
        command: "metrics",
        config: s,
        metrics: &summary,
        timings,
    }
    .write(&out.join("metrics.json"))?;
    match mean_ssim {
        Some(ss) => println!("metrics: {} frames, mean PSNR {mean_psnr:.2} dB, mean SSIM {ss:.4}", summary.frames.len()),
        None => println!("metrics: {} frames, mean PSNR {mean_psnr:.2} dB", summary.frames.len()),
    }
    Ok(summary)
}
