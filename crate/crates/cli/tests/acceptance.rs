//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use derain_core::dsf::dsf_scalar;
use derain_core::flow_warp::{backward_warp, flow_transfer_loss, synth_translation_flow};
use derain_core::frame_io::{compute_psnr, FlowField, Image};
use derain_core::gradcheck::{run_gradcheck, Analytic, GradCheckConfig};
use derain_core::model::{
    selective_scan, selective_scan_chunked, vdmamba_forward, ForwardMode, ForwardOutput,
    ModelConfig, SsmParams, Tensor,
};
use derain_core::rain_synth::{make_rainy_sequence, synth_scene, RainConfig};
use derain_core::smooth_stats::{
    exact_max, exact_mean, exact_median, exact_min, mad_profile, mean_abs_deviation,
    median_mad_oracle,
};
use derain_core::stacking::{
    generate_pseudo_labels, total_loss, LossComponents, LossWeights, StackingConfig, TrainingMode,
};

const LIMIT_TOL: f64 = 1e-6;
const MEAN_TOL: f64 = 1e-12;
const ORACLE_ARG_TOL: f64 = 1e-3;
const ORACLE_MAD_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const MIN_PSNR_GAIN_DB: f64 = 10.0;
const MIN_ACCEPTANCE: f64 = 0.9;
const SCAN_TOL: f32 = 1e-6;
const LOSS_TOL: f64 = 1e-12;

struct Suite {
    failed: usize,
    total: usize,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.total += 1;
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

/// `n` values in `[0, 1]` with pairwise gaps of at least `gap`, shuffled.
fn gapped_set(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    let slack = 1.0 - gap * (n - 1) as f64;
    let mut offs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=slack)).collect();
    offs.sort_by(f64::total_cmp);
    let mut g: Vec<f64> = offs.iter().enumerate().map(|(i, o)| o + gap * i as f64).collect();
    g.shuffle(rng);
    g
}

fn min_profile_gap(g: &[f64]) -> f64 {
    let mut d = mad_profile(g, 1.0);
    d.sort_by(f64::total_cmp);
    d.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn dsf_limits(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    let mut over = [0usize; 4];
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.gen_range(3..=9);
        let g = gapped_set(&mut rng, n, 0.05);
        if min_profile_gap(&g) < 0.02 {
            continue;
        }
        sets += 1;
        let b = rng.gen_range(-2.0..2.0);
        let errs = [
            (dsf_scalar(&g, 500.0, 1.0) - exact_median(&g)).abs(),
            (dsf_scalar(&g, 500.0, 0.0) - exact_min(&g)).abs(),
            (dsf_scalar(&g, -500.0, 0.0) - exact_max(&g)).abs(),
            (dsf_scalar(&g, 0.0, b) - exact_mean(&g)).abs(),
        ];
        for (k, e) in errs.iter().enumerate() {
            worst[k] = worst[k].max(*e);
            let tol = if k == 3 { MEAN_TOL } else { LIMIT_TOL };
            if *e >= tol {
                over[k] += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let rows = ["median", "min", "max", "mean"];
    let detail = rows
        .iter()
        .zip(worst.iter().zip(&over))
        .map(|(r, (w, o))| format!("{r} max {w:.1e} ({o} over)"))
        .collect::<Vec<_>>()
        .join(", ");
    suite.check(
        "DSF limit suite",
        over.iter().all(|&o| o == 0) && secs < 5.0,
        format!("{sets} sets; {detail}; {secs:.2}s"),
    );
}

fn theorem_oracle(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut arg_err, mut mad_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 2 * rng.gen_range(1..=5) + 1;
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let med = exact_median(&g);
        let (x, mad) = median_mad_oracle(&g);
        arg_err = arg_err.max((x - med).abs());
        mad_err = mad_err.max((mad - mean_abs_deviation(&g, med)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    suite.check(
        "MAD minimiser oracle",
        arg_err <= ORACLE_ARG_TOL && mad_err <= ORACLE_MAD_TOL && secs < 10.0,
        format!("argmin err {arg_err:.1e}, MAD err {mad_err:.1e}; {secs:.2}s"),
    );
}

fn gradients(suite: &mut Suite) {
    let t0 = Instant::now();
    let cfg = GradCheckConfig {
        trials: 200,
        step: 1e-5,
        tolerance: GRAD_TOL,
        max_sharpness: 20.0,
        seed: 3,
        ..Default::default()
    };
    let report = run_gradcheck(&cfg, &Analytic).expect("gradient check runs");
    let secs = t0.elapsed().as_secs_f64();
    let detail = report
        .kinds
        .iter()
        .map(|k| format!("{} {:.1e}", k.kind, k.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = report.kinds.len() == 4
        && report.kinds.iter().all(|k| k.trials == 200 && k.max_rel_error < GRAD_TOL)
        && secs < 10.0;
    suite.check("Gradient suite", pass, format!("{detail}; {secs:.2}s"));
}

fn pseudo_labels(suite: &mut Suite) {
    let t0 = Instant::now();
    let clean = synth_scene(256, 256, 4);
    let rain = RainConfig {
        density: 0.02,
        intensity: 0.4,
        seed: 4,
        ..Default::default()
    };
    let seq = make_rainy_sequence(&clean, 7, (1.0, 0.0), &rain).expect("sequence");
    let cfg = StackingConfig {
        patches: 8,
        theta: 0.8,
        delta: 0.1,
    };
    let (median, mask) = generate_pseudo_labels(&seq.rainy, &seq.flows, &cfg).expect("stacking");
    let before = compute_psnr(seq.rainy.center(), seq.clean.center()).unwrap();
    let after = compute_psnr(&median, seq.clean.center()).unwrap();
    let acc = mask.accepted_fraction();
    let secs = t0.elapsed().as_secs_f64();
    suite.check(
        "Pseudo-label denoising",
        after - before >= MIN_PSNR_GAIN_DB && acc >= MIN_ACCEPTANCE && secs < 30.0,
        format!("PSNR {before:.2} -> {after:.2} dB (gain {:.2}), acceptance {acc:.3}; {secs:.2}s", after - before),
    );
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.gen_range(0.0..=1.0))
}

fn warping(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mismatches, mut band_errors, mut checked) = (0usize, 0usize, 0usize);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let (dx, dy) = (rng.gen_range(-5i32..=5), rng.gen_range(-5i32..=5));
        let src = random_image(&mut rng, h, w);
        let out = backward_warp(&src, &synth_translation_flow(dx as f32, dy as f32, h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i32 + dy, x as i32 + dx);
                let inside = (0..h as i32).contains(&sy) && (0..w as i32).contains(&sx);
                if inside != out.is_valid(y, x) {
                    band_errors += 1;
                }
                if out.is_valid(y, x) {
                    checked += 1;
                    if out.image.pixel(y, x) != src.pixel(sy as usize, sx as usize) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    suite.check(
        "Warping exactness",
        mismatches == 0 && band_errors == 0,
        format!("50 images, {checked} valid pixels, {mismatches} mismatches, {band_errors} validity errors"),
    );
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn scan_consistency(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let d = rng.gen_range(1..=16);
        let s = rng.gen_range(1..=8);
        let k = 1.0 / (d as f32).sqrt();
        let p = SsmParams::new(
            tensor(&mut rng, &[d, s], -3.0, -0.05),
            tensor(&mut rng, &[d, d], -k, k),
            tensor(&mut rng, &[d], -4.0, 0.0),
            tensor(&mut rng, &[s, d], -k, k),
            tensor(&mut rng, &[s, d], -k, k),
            tensor(&mut rng, &[d], -1.0, 1.0),
        )
        .unwrap();
        let x = tensor(&mut rng, &[32, d], -1.0, 1.0);
        let naive = selective_scan(&x, &p).unwrap();
        let blocked = selective_scan_chunked(&x, &p, rng.gen_range(1..=32)).unwrap();
        for (a, b) in naive.data().iter().zip(blocked.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    suite.check(
        "Selective-scan self-consistency",
        worst <= SCAN_TOL,
        format!("100 instances, L=32, max abs diff {worst:.1e}"),
    );
}

fn forward_contract(suite: &mut Suite) {
    let cfg = ModelConfig {
        frames: 7,
        height: 64,
        width: 64,
        levels: 2,
        channels: 8,
        ..Default::default()
    };
    let clean = synth_scene(64, 64, 7);
    let seq = make_rainy_sequence(&clean, 7, (1.0, 0.0), &RainConfig { seed: 7, ..Default::default() }).unwrap();
    let run = |mode| {
        let t0 = Instant::now();
        let params = cfg.init_params(42).unwrap();
        let out = vdmamba_forward(&seq.rainy, &seq.flows, &params, &cfg, mode).unwrap();
        (out, t0.elapsed().as_secs_f64())
    };
    let (d1, t1) = run(ForwardMode::Derain);
    let (d2, t2) = run(ForwardMode::Derain);
    let (f1, t3) = run(ForwardMode::Flow);
    let (f2, t4) = run(ForwardMode::Flow);
    let derain_ok = matches!(&d1, ForwardOutput::Derain(img)
        if img.dims() == (64, 64) && img.data().iter().all(|v| v.is_finite()));
    let flows_ok = matches!(&f1, ForwardOutput::Flows(f)
        if f.len() == 6 && f.iter().all(|f| f.dims() == (64, 64)
            && f.u().iter().chain(f.v()).all(|v| v.is_finite())));
    let slowest = [t1, t2, t3, t4].into_iter().fold(0.0, f64::max);
    suite.check(
        "Forward contract",
        derain_ok && flows_ok && d1 == d2 && f1 == f2 && slowest < 10.0,
        format!(
            "derain 64x64x3 {}, 6 flows {}, deterministic {}, slowest {slowest:.2}s",
            ok_str(derain_ok),
            ok_str(flows_ok),
            ok_str(d1 == d2 && f1 == f2)
        ),
    );
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "bad"
    }
}

fn loss_algebra(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let [rec, spa, tem, sta]: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..100.0));
        let c = LossComponents {
            rec: Some(rec),
            spa: Some(spa),
            tem: Some(tem),
            sta: Some(sta),
        };
        let paired = total_loss(TrainingMode::Paired, &c, &w).unwrap();
        let unpaired = total_loss(TrainingMode::Unpaired, &c, &w).unwrap();
        worst = worst
            .max((paired - (rec + spa + 0.1 * tem)).abs())
            .max((unpaired - (0.1 * sta + spa + 0.1 * tem)).abs());
    }
    let teacher = vec![FlowField::zeros(4, 4); 6];
    let pred = vec![FlowField::constant(4, 4, 0.5, -0.5); 6];
    let l96 = flow_transfer_loss(&pred, &teacher).unwrap();
    let l4 = flow_transfer_loss(&[FlowField::constant(2, 2, 1.0, 0.0)], &[FlowField::zeros(2, 2)]).unwrap();
    let l0 = flow_transfer_loss(&pred, &pred).unwrap();
    suite.check(
        "Loss algebra",
        worst <= LOSS_TOL && l96 == 96.0 && l4 == 4.0 && l0 == 0.0,
        format!("total-loss max err {worst:.1e}; transfer losses {l96}, {l4}, {l0}"),
    );
}

fn end_to_end(suite: &mut Suite) {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    let steps: [Vec<String>; 3] = [
        vec!["synth".into(), "--out".into(), p("seq"), "--seed".into(), "9".into()],
        vec![
            "pseudo".into(),
            "--frames".into(), p("seq/rainy"),
            "--flows".into(), p("seq/flows"),
            "--clean".into(), p("seq/clean"),
            "--out".into(), p("pseudo"),
        ],
        vec![
            "metrics".into(),
            "--reference".into(), p("seq/clean"),
            "--test".into(), p("seq/rainy"),
            "--out".into(), p("metrics"),
        ],
    ];
    for args in &steps {
        let out = Command::new(env!("CARGO_BIN_EXE_derain")).args(args).output().unwrap();
        if !out.status.success() {
            suite.check(
                "End-to-end CLI",
                false,
                format!("`derain {}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()),
            );
            return;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let report = read_json(&root.join("pseudo/report.json"));
    let metrics = read_json(&root.join("metrics/metrics.json"));
    let gain = report["metrics"]["psnr_gain"].as_f64().unwrap_or(f64::NAN);
    let acc = report["metrics"]["acceptance_fraction"].as_f64().unwrap_or(f64::NAN);
    let frames = metrics["metrics"]["frames"].as_array().map_or(0, Vec::len);
    suite.check(
        "End-to-end CLI",
        gain >= MIN_PSNR_GAIN_DB && acc >= MIN_ACCEPTANCE && frames == 7 && secs < 60.0,
        format!("synth -> pseudo -> metrics in {secs:.2}s, PSNR gain {gain:.2} dB, acceptance {acc:.3}, {frames} frames scored"),
    );
}

fn read_json(path: &Path) -> Value {
    fs::read_to_string(path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null)
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0, total: 0 };
    dsf_limits(&mut suite);
    theorem_oracle(&mut suite);
    gradients(&mut suite);
    pseudo_labels(&mut suite);
    warping(&mut suite);
    scan_consistency(&mut suite);
    forward_contract(&mut suite);
    loss_algebra(&mut suite);
    end_to_end(&mut suite);
    println!("{} of {} criteria passed", suite.total - suite.failed, suite.total);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
