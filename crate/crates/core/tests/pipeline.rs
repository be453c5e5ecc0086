use std::path::PathBuf;

use hgsr_core::arch::ModelConfig;
use hgsr_core::checkpoint::{load_checkpoint, save_checkpoint};
use hgsr_core::data::{
    build_train_set, degrade, extract_patches, list_images, save_png, ColorSpace, DatasetSpec, ImageBuffer,
};
use hgsr_core::metrics::{evaluate_paths, EvalOptions, Upscaler};
use hgsr_core::train::{TrainConfig, TrainEvent, TrainSet, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-20.0..20.0)).collect();
    ImageBuffer::from_fn(h, w, ColorSpace::Rgb, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let v = 128.0 + 60.0 * (0.21 * xf + c as f64).sin() * (0.17 * yf).cos() + noise[(c * h + y) * w + x];
        v.clamp(0.0, 255.0).round()
    })
}

fn smooth(h: usize, w: usize, phase: f64) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, ColorSpace::Rgb, |c, y, x| {
        128.0 + 90.0 * (0.05 * x as f64 + phase + c as f64).sin() * (0.04 * y as f64).cos()
    })
    .quantize()
}

#[test]
fn degraded_hr_patches_match_lr_patches_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..20u64 {
        let s = [2, 3, 4][trial as usize % 3];
        let hr = textured(rng.random_range(60..100), rng.random_range(60..100), trial);
        let pair = &extract_patches(&hr, s, 12, 1, trial).unwrap()[0];
        let redone = degrade(&pair.hr, s).unwrap();
        let border = 3;
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for y in border..12 - border {
                for x in border..12 - border {
                    total += (redone.get(c, y, x) - pair.lr.get(c, y, x)).abs();
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean < 1.0, "trial {trial} x{s}: mean abs diff {mean}");
    }
}

fn tiny_run(max_steps: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        base_channels: 8,
        num_hgb: 1,
        scales: vec![2, 3],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch: 2,
        max_steps,
        seed: 5,
        patch_size: 8,
        scales: vec![2, 3],
        ..TrainConfig::default()
    };
    (model, train)
}

fn tiny_set() -> TrainSet {
    let mut samples = Vec::new();
    for s in [2, 3] {
        for p in extract_patches(&textured(40, 40, s as u64), s, 8, 3, 1).unwrap() {
            samples.push(p.to_sample());
        }
    }
    TrainSet::new(samples)
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = tiny_set();
    let (model, cfg) = tiny_run(6);
    let mut straight = Trainer::<f32>::new(model.clone(), cfg.clone()).unwrap();
    let mut log_a = Vec::new();
    straight
        .run(&data, |e| {
            if let TrainEvent::Step(r) = e {
                log_a.push(r.to_string());
            }
            Ok(())
        })
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/half.ckpt");
    let mut first = Trainer::<f32>::new(model, TrainConfig { max_steps: 3, ..cfg.clone() }).unwrap();
    let mut log_b = Vec::new();
    first
        .run(&data, |e| {
            match e {
                TrainEvent::Step(r) => log_b.push(r.to_string()),
                TrainEvent::Checkpoint(c) => save_checkpoint(&path, &c).unwrap(),
            }
            Ok(())
        })
        .unwrap();
    let mut second = Trainer::<f32>::resume(load_checkpoint(&path).unwrap(), cfg).unwrap();
    assert_eq!(second.step, 3);
    second
        .run(&data, |e| {
            if let TrainEvent::Step(r) = e {
                log_b.push(r.to_string());
            }
            Ok(())
        })
        .unwrap();

    assert_eq!(log_a, log_b);
    assert_eq!(straight.checkpoint().to_bytes(), second.checkpoint().to_bytes());
}

#[test]
fn training_from_png_folder_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        save_png(dir.path().join(format!("img{i}.png")), &smooth(48, 40, i as f64)).unwrap();
    }
    let paths = list_images(dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let spec = DatasetSpec {
        scales: vec![2, 3],
        patch_size: 8,
        patches_per_image: 4,
        seed: 1,
    };
    let (data, skipped) = build_train_set(&paths, &spec).unwrap();
    assert_eq!((data.len(), skipped), (24, 0));
    let (model, cfg) = tiny_run(60);
    let mut trainer = Trainer::<f32>::new(model, TrainConfig { lr0: 1e-3, ..cfg }).unwrap();
    let before = trainer.evaluate_loss(&data, 2).unwrap();
    trainer.run(&data, |_| Ok(())).unwrap();
    let after = trainer.evaluate_loss(&data, 2).unwrap();
    assert!(after < before * 0.5, "{before} -> {after}");
}

#[test]
fn bicubic_baseline_on_smooth_images_is_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..2)
        .map(|i| {
            let p = dir.path().join(format!("{i}.png"));
            save_png(&p, &smooth(64, 60, i as f64)).unwrap();
            p
        })
        .collect();
    let report = evaluate_paths(&paths, &Upscaler::Bicubic, 2, EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.mean_psnr() > 30.0, "{}", report.mean_psnr());
    assert!(report.mean_ssim() > 0.9 && report.mean_ssim() <= 1.0);
}
