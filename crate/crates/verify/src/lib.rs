//! End-to-end checks of the acceptance criteria, one function per criterion.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hgsr_core::arch::{self, build_hgsrcnn, build_variant, ModelConfig, Variant};
use hgsr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hgsr_core::data::{degrade, extract_patches, load_png, save_png, ColorSpace, ImageBuffer};
use hgsr_core::graph::init_parameters;
use hgsr_core::metrics::{self, psnr, ssim};
use hgsr_core::ops::{concat_channels, conv2d_backward, conv2d_forward, pixel_shuffle, split_channels};
use hgsr_core::train::{TrainConfig, TrainSet, Trainer};
use hgsr_core::{ConvSpec, Dims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use oracles::{finite_difference_sweep, naive_conv, relative_error, uniform_tensor};

pub struct Outcome {
    pub id: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(id: &'static str, pass: bool, detail: String) -> Self {
        Self { id, pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {} {}", self.id, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Every parameter gradient of the tiny model against central differences.
pub fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny(8, 1, 2);
    let graph = build_hgsrcnn(&cfg).expect("tiny model builds");
    let mut store = init_parameters::<f64>(&graph, 1);
    let input = uniform_tensor(Dims::new(1, 3, 8, 8), 0.0, 1.0, 2);
    // Target near the prediction: a small loss keeps cancellation error in
    // the difference quotient well below the tolerance.
    let mut target = graph.forward_scale(&store, &input, 2).unwrap().output(2).unwrap().clone();
    target.add_assign(&uniform_tensor(target.dims(), -0.01, 0.01, 3)).unwrap();
    let entries = finite_difference_sweep(&graph, &mut store, &input, &target, 2, 1e-5, false);
    let (worst, at) = entries
        .iter()
        .map(|e| (relative_error(e.analytic, e.numeric), format!("{}[{}]", e.param, e.index)))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap_or((f64::NAN, String::new()));
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "A1",
        entries.len() == store.param_count() && worst < 1e-4 && secs < 60.0,
        format!("{} parameters, max relative error {worst:.3e} at {at} (< 1e-4), {secs:.1} s (< 60 s)", entries.len()),
    )
}

/// Randomized conv cases against the naive loops and the adjoint identity.
pub fn convolution_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut fwd, mut adj) = (0.0f64, 0.0f64);
    for case in 0..200u64 {
        let d = Dims::new(rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
        let cout = rng.random_range(1..=8);
        let spec = ConvSpec::k3(d.c, cout);
        let x = uniform_tensor(d, -1.0, 1.0, case * 4);
        let w = uniform_tensor(spec.weight_dims(), -1.0, 1.0, case * 4 + 1);
        let b = uniform_tensor(Dims::new(1, 1, 1, cout), -1.0, 1.0, case * 4 + 2).into_vec();
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        fwd = fwd.max(y.max_abs_diff(&naive_conv(&x, &w, &b)).unwrap());

        let g = uniform_tensor(y.dims(), -1.0, 1.0, case * 4 + 3);
        let linear = conv2d_forward(&x, &w, &vec![0.0; cout], &spec).unwrap();
        let lhs = linear.dot(&g).unwrap();
        let grads = conv2d_backward(&x, &w, &g, &spec).unwrap();
        adj = adj.max((lhs - x.dot(&grads.input).unwrap()).abs());
        adj = adj.max((lhs - w.dot(&grads.weights).unwrap()).abs());
        for (o, gb) in grads.bias.iter().enumerate() {
            let direct: f64 = (0..d.n).flat_map(|n| g.plane(n, o).iter().copied()).sum();
            adj = adj.max((gb - direct).abs());
        }
    }
    Outcome::new(
        "A2",
        fwd <= 1e-12 && adj <= 1e-10,
        format!("200 cases, forward max abs diff {fwd:.2e} (<= 1e-12), adjoint max gap {adj:.2e} (<= 1e-10)"),
    )
}

/// Output sizes are exactly scale times the input; controller 0 shares one trunk pass.
pub fn scale_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let full_depth = |controller: u32| ModelConfig {
        base_channels: 8,
        controller,
        ..ModelConfig::default()
    };
    for s in [2u32, 3, 4] {
        let graph = build_hgsrcnn(&full_depth(s)).unwrap();
        let store = init_parameters::<f32>(&graph, 1);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(8..=32), rng.random_range(8..=32));
            let x: Tensor4<f32> = uniform_tensor(Dims::new(1, 3, h, w), 0.0, 1.0, rng.random()).cast();
            let trace = graph.forward(&store, &x).unwrap();
            let outs = trace.outputs();
            let ok = outs.len() == 1 && outs[0].0 == s && outs[0].1.dims() == Dims::new(1, 3, h * s as usize, w * s as usize);
            if !ok {
                failures.push(format!("x{s} {h}x{w}"));
            }
        }
    }

    let graph = build_hgsrcnn(&full_depth(0)).unwrap();
    let store = init_parameters::<f32>(&graph, 1);
    let x: Tensor4<f32> = uniform_tensor(Dims::new(1, 3, 11, 13), 0.0, 1.0, 4).cast();
    let trace = graph.forward(&store, &x).unwrap();
    let neck = graph.find("neck").expect("trunk ends at the neck conv");
    let single_pass = (0..graph.nodes().len()).all(|n| trace.evaluations(n) <= 1) && trace.evaluations(neck) == 1;
    let mut shared_ok = single_pass && trace.outputs().len() == 3;
    for (s, out) in trace.outputs() {
        let alone = graph.forward_scale(&store, &x, s).unwrap();
        shared_ok &= out.dims() == Dims::new(1, 3, 11 * s as usize, 13 * s as usize);
        shared_ok &= alone.output(s).unwrap().data() == out.data();
    }
    if !shared_ok {
        failures.push("controller 0".into());
    }
    Outcome::new(
        "A3",
        failures.is_empty(),
        if failures.is_empty() {
            "60 sizes exact for x2/x3/x4; controller 0 yields 3 outputs from one trunk evaluation".into()
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

fn block_total(store: &hgsr_core::graph::ParameterStore<f32>, prefix: &str) -> usize {
    store.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, s)| s.param_count()).sum()
}

/// Formula and enumeration agree; block figures and depth match.
pub fn structural_accounting() -> Outcome {
    let base = ModelConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for v in Variant::ALL {
        let graph = build_variant(v, &base).unwrap();
        let store = init_parameters::<f32>(&graph, 0);
        let report = metrics::count_params(&graph, &store);
        let by_hand: usize = graph
            .param_specs()
            .values()
            .map(|s| s.in_channels * s.out_channels * 9 + s.out_channels)
            .sum();
        if report.analytic != report.enumerated || report.enumerated != by_hand {
            ok = false;
            notes.push(format!("{}: {} vs {} vs {by_hand}", v.id(), report.analytic, report.enumerated));
        }
    }
    let graph = build_hgsrcnn(&base).unwrap();
    let store = init_parameters::<f32>(&graph, 0);
    let blocks = [
        ("SGCB", "hgb1.sgcb.", 2 * 3 * (32 * 32 * 9 + 32), 55_488),
        ("CCB", "hgb1.ccb.", 3 * (64 * 64 * 9 + 64), 110_784),
        ("RB", "hgb1.rb.", 5 * (64 * 64 * 9 + 64), 184_640),
    ];
    for (name, prefix, formula, figure) in blocks {
        let got = block_total(&store, prefix);
        ok &= got == formula && got == figure;
        notes.push(format!("{name} {got}"));
    }
    let layers = graph.layer_count();
    ok &= layers == 52;
    let total = store.param_count();
    notes.push(format!(
        "{layers} layers; measured total {total} vs paper-reported {} ({:+.1}%, reported only)",
        metrics::PAPER_REPORTED_PARAMS,
        100.0 * (total as f64 - arch::PAPER_REPORTED_PARAMS as f64) / arch::PAPER_REPORTED_PARAMS as f64
    ));
    Outcome::new("A4", ok, format!("8 variants analytic == enumerated; {}", notes.join("; ")))
}

/// Four fixed training patches cut from a synthetic textured image.
fn overfit_patches() -> TrainSet {
    let hr = ImageBuffer::from_fn(96, 96, ColorSpace::Rgb, |c, y, x| {
        let (yf, xf, cf) = (y as f64, x as f64, c as f64);
        128.0 + 60.0 * (0.3 * xf + 0.7 * cf).sin() * (0.23 * yf).cos() + 40.0 * (0.11 * (xf + yf) + cf).sin()
    })
    .quantize();
    let patches = extract_patches(&hr, 2, 16, 4, 1).expect("image is large enough");
    TrainSet::new(patches.iter().map(|p| p.to_sample()).collect())
}

fn patch_psnr(trainer: &Trainer<f32>, data: &TrainSet) -> f64 {
    let lr: Vec<_> = data.samples().iter().map(|s| s.lr.clone()).collect();
    let hr: Vec<_> = data.samples().iter().map(|s| s.hr.clone()).collect();
    let x = Tensor4::stack(&lr).unwrap();
    let y = Tensor4::stack(&hr).unwrap();
    let trace = trainer.graph.forward_scale(&trainer.store, &x, 2).unwrap();
    let out = trace.output(2).unwrap();
    let mse = out.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / out.len() as f64;
    10.0 * (1.0 / mse).log10()
}

struct OverfitRun {
    log: Vec<String>,
    losses: Vec<f64>,
    psnr: Vec<(u64, f64)>,
    checkpoint: Vec<u8>,
    seconds: f64,
}

fn overfit_run(dir: &Path) -> OverfitRun {
    let start = Instant::now();
    let data = overfit_patches();
    let config = TrainConfig {
        batch: 4,
        max_steps: 5_000,
        seed: 1,
        patch_size: 16,
        scales: vec![2],
        augment: false,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(ModelConfig::tiny(16, 1, 2), config).unwrap();
    let mut run = OverfitRun {
        log: Vec::new(),
        losses: Vec::new(),
        psnr: Vec::new(),
        checkpoint: Vec::new(),
        seconds: 0.0,
    };
    while trainer.step < trainer.config.max_steps {
        let record = trainer.train_step(&data).unwrap();
        run.log.push(record.to_string());
        run.losses.push(record.loss);
        if record.step.is_multiple_of(250) {
            run.psnr.push((record.step, patch_psnr(&trainer, &data)));
        }
    }
    let path = dir.join(format!("overfit-{}.ckpt", run.log.len()));
    save_checkpoint(&path, &trainer.checkpoint()).unwrap();
    run.checkpoint = std::fs::read(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    run.seconds = start.elapsed().as_secs_f64();
    run
}

/// Overfitting four patches, then a second identical run for determinism.
pub fn overfit_and_determinism() -> [Outcome; 2] {
    let dir = tempfile::tempdir().unwrap();
    let a = overfit_run(dir.path());
    let initial = a.losses[0];
    let best_by_2000 = a.losses[..2000].iter().copied().fold(f64::INFINITY, f64::min);
    let first_below = a.losses.iter().position(|l| *l < 0.01 * initial).map(|i| i + 1);
    let reached = a.psnr.iter().find(|(_, p)| *p >= 40.0).copied();
    let final_psnr = a.psnr.last().map(|p| p.1).unwrap_or(f64::NAN);
    let a5 = Outcome::new(
        "A5",
        best_by_2000 < 0.01 * initial && reached.is_some() && a.seconds < 600.0,
        format!(
            "initial loss {initial:.4e}, below 1% first at step {}, patch PSNR >= 40 dB first at step {} (final {final_psnr:.2} dB at 5000), {:.0} s (< 600 s)",
            first_below.map_or("never".into(), |s| s.to_string()),
            reached.map_or("never".into(), |r| r.0.to_string()),
            a.seconds
        ),
    );
    let b = overfit_run(dir.path());
    let same_log = a.log == b.log;
    let same_ckpt = a.checkpoint == b.checkpoint;
    let a6 = Outcome::new(
        "A6",
        same_log && same_ckpt,
        format!(
            "loss logs identical: {same_log} ({} lines), final checkpoints identical: {same_ckpt} ({} bytes)",
            a.log.len(),
            a.checkpoint.len()
        ),
    );
    [a5, a6]
}

pub const PAPER_BICUBIC_X2: (f64, f64) = (33.66, 0.9299);

/// Bicubic baseline through the command-line tool on the Set5 images.
pub fn bicubic_baseline(binary: &Path, set5: &Path) -> Outcome {
    let (paper_psnr, paper_ssim) = PAPER_BICUBIC_X2;
    if !set5.is_dir() {
        return Outcome::new(
            "A7",
            false,
            format!(
                "Set5 images not found at {} (set HGSR_SET5_DIR); cannot compare against {paper_psnr}/{paper_ssim}",
                set5.display()
            ),
        );
    }
    let start = Instant::now();
    let out = Command::new(binary)
        .args(["eval", "--baseline-bicubic", "--scale", "2", "--dataset"])
        .arg(set5)
        .output();
    let secs = start.elapsed().as_secs_f64();
    let out = match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).into_owned(),
        Ok(o) => return Outcome::new("A7", false, format!("eval failed: {}", String::from_utf8_lossy(&o.stderr).trim())),
        Err(e) => return Outcome::new("A7", false, format!("cannot run {}: {e}", binary.display())),
    };
    let mean = out.lines().find(|l| l.starts_with("mean ")).and_then(|l| {
        let f: Vec<f64> = l.split_whitespace().skip(1).filter_map(|v| v.parse().ok()).collect();
        (f.len() == 2).then(|| (f[0], f[1]))
    });
    let images = out.lines().filter(|l| !l.starts_with('#')).count().saturating_sub(4);
    match mean {
        Some((p, s)) => Outcome::new(
            "A7",
            (p - paper_psnr).abs() <= 0.3 && (s - paper_ssim).abs() <= 0.01 && secs < 30.0,
            format!(
                "{images} images, mean PSNR {p:.4} dB vs {paper_psnr} (±0.3), SSIM {s:.4} vs {paper_ssim} (±0.01), {secs:.1} s (< 30 s)"
            ),
        ),
        None => Outcome::new("A7", false, format!("no mean row in eval output:\n{out}")),
    }
}

fn constant(h: usize, w: usize, v: f64) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, ColorSpace::Y, |_, _, _| v)
}

fn random_y(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..=255u8) as f64).collect();
    ImageBuffer::new(h, w, ColorSpace::Y, values).unwrap()
}

/// PSNR and SSIM worked examples plus symmetry.
pub fn metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_y(32, 32, &mut rng);
    let mut checks = Vec::new();
    let p_same = psnr(&a, &a, 0).unwrap();
    checks.push(("psnr(a,a) = inf", p_same == f64::INFINITY && format!("{p_same}") == "inf"));
    checks.push(("uniform 255 difference = 0 dB", psnr(&constant(16, 16, 0.0), &constant(16, 16, 255.0), 0).unwrap() == 0.0));
    let forty = psnr(&constant(16, 16, 100.0), &constant(16, 16, 102.55), 0).unwrap();
    checks.push(("MSE 255^2/1e4 = 40 dB", (forty - 40.0).abs() < 1e-9));
    checks.push(("ssim(a,a) = 1", ssim(&a, &a).unwrap() == 1.0));
    let c1 = (0.01f64 * 255.0).powi(2);
    let closed = c1 / (255.0f64.powi(2) + c1);
    let s0 = ssim(&constant(16, 16, 0.0), &constant(16, 16, 255.0)).unwrap();
    checks.push(("constant 0 vs 255 closed form", (s0 - closed).abs() < 1e-15 && (s0 - 9.9994e-5).abs() < 1e-8));
    let mut asym = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(11..40), rng.random_range(11..40));
        let x = random_y(h, w, &mut rng);
        let y = random_y(h, w, &mut rng);
        asym = asym.max((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs());
    }
    checks.push(("50 random pairs symmetric within 1e-12", asym <= 1e-12));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        "A8",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks; 40 dB example gives {forty:.12}; SSIM symmetry gap {asym:.1e}", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

fn png_by_hand(path: &Path, w: u32, h: u32, color: png::ColorType, bytes: &[u8]) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().unwrap();
    writer.write_image_data(bytes).unwrap();
    writer.finish().unwrap();
}

fn png_bytes(path: &Path) -> Vec<u8> {
    let mut reader = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap())).read_info().unwrap();
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap()];
    let frame = reader.next_frame(&mut buf).unwrap();
    buf.truncate(frame.buffer_size());
    buf
}

/// Checkpoint and PNG round trips and permutation properties of the layout ops.
pub fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failed = Vec::new();

    let model = ModelConfig::tiny(8, 2, 3);
    let graph = build_hgsrcnn(&model).unwrap();
    let mut params = init_parameters::<f32>(&graph, 5);
    for (_, slot) in params.iter_mut() {
        slot.m_weights = slot.weights.map(|v| v * 0.25);
        slot.v_weights = slot.weights.map(|v| v * v);
        slot.m_bias = slot.bias.iter().map(|b| -b).collect();
    }
    let ck = Checkpoint { model, step: 777, params };
    let path = dir.path().join("ck/model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &loaded).unwrap();
    if loaded != ck || std::fs::read(&path).unwrap() != std::fs::read(&again).unwrap() {
        failed.push("checkpoint".to_string());
    }

    for (color, channels, cs) in [(png::ColorType::Rgb, 3, ColorSpace::Rgb), (png::ColorType::Grayscale, 1, ColorSpace::Y)] {
        let (w, h) = (rng.random_range(1..60usize), rng.random_range(1..60usize));
        let raw: Vec<u8> = (0..w * h * channels).map(|_| rng.random()).collect();
        let by_hand = dir.path().join("hand.png");
        png_by_hand(&by_hand, w as u32, h as u32, color, &raw);
        let img = load_png(&by_hand).unwrap();
        let matches = img.colorspace() == cs
            && (0..h).all(|y| (0..w).all(|x| (0..channels).all(|c| img.get(c, y, x) == raw[(y * w + x) * channels + c] as f64)));
        let ours = dir.path().join("ours.png");
        save_png(&ours, &img).unwrap();
        if !matches || png_bytes(&ours) != raw || load_png(&ours).unwrap() != img {
            failed.push(format!("png {cs:?}"));
        }
    }

    for case in 0..100u64 {
        let (n, half, h, w) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let t = uniform_tensor(Dims::new(n, 2 * half, h, w), -1.0, 1.0, case);
        let (a, b) = split_channels(&t).unwrap();
        if concat_channels(&a, &b).unwrap() != t || a.at(0, half - 1, 0, 0) != t.at(0, half - 1, 0, 0) || b.at(0, 0, 0, 0) != t.at(0, half, 0, 0) {
            failed.push(format!("split/concat case {case}"));
        }
        let r = rng.random_range(2..=4);
        let c = rng.random_range(1..3);
        let t = uniform_tensor(Dims::new(n, c * r * r, h, w), -1.0, 1.0, case + 1000);
        let s = pixel_shuffle(&t, r).unwrap();
        let oracle = Tensor4::from_fn(Dims::new(n, c, h * r, w * r), |ni, ci, y, x| {
            t.at(ni, ci * r * r + (y % r) * r + (x % r), y / r, x / r)
        });
        if s != oracle {
            failed.push(format!("pixel shuffle case {case}"));
        }
    }
    Outcome::new(
        "A9",
        failed.is_empty(),
        if failed.is_empty() {
            "checkpoint file and struct bitwise; RGB and gray PNG bitwise both ways; 100 split/concat and 100 pixel-shuffle cases match the index oracle".into()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

/// Re-degrading HR patches reproduces the LR patches away from patch borders.
pub fn pipeline_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let s = rng.random_range(2..=4usize);
        let (h, w) = (rng.random_range(80..140), rng.random_range(80..140));
        let noise: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-25.0..25.0)).collect();
        let hr = ImageBuffer::from_fn(h, w, ColorSpace::Rgb, |c, y, x| {
            let v = 128.0 + 80.0 * (0.13 * x as f64 + c as f64).sin() * (0.09 * y as f64).cos() + noise[(c * h + y) * w + x];
            v.clamp(0.0, 255.0).round()
        });
        let patch = 16;
        let pair = &extract_patches(&hr, s, patch, 1, trial).unwrap()[0];
        let again = degrade(&pair.hr, s).unwrap();
        let border = 3;
        let (mut sum, mut count) = (0.0, 0usize);
        for c in 0..3 {
            for y in border..patch - border {
                for x in border..patch - border {
                    sum += (again.get(c, y, x) - pair.lr.get(c, y, x)).abs();
                    count += 1;
                }
            }
        }
        worst = worst.max(sum / count as f64);
    }
    Outcome::new(
        "A10",
        worst < 1.0,
        format!("20 extractions, worst interior mean abs diff {worst:.2e} (< 1.0, border 3 LR pixels)"),
    )
}

/// Default location of the Set5 HR images.
pub fn default_set5_dir() -> PathBuf {
    std::env::var_os("HGSR_SET5_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
            manifest.ancestors().nth(2).unwrap_or(manifest).join("data/Set5")
        })
}
