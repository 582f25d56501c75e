//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as part of `cargo test`. Pass criterion numbers to run a subset,
//! e.g. `cargo test -p mrnseg-cli --test acceptance -- 1 6`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrnseg_core::eval::{exact_auc, exact_thresholds, report_from_pixels, roc, PooledPixels};
use mrnseg_core::gradcheck;
use mrnseg_core::models::{Batch, Model, ModelConfig, ModelKind};
use mrnseg_core::ops;
use mrnseg_core::optim::{AdamConfig, AdamState, Objective};
use mrnseg_core::pipeline::{
    make_batch, predict_slide, tile_starts, train, Checkpoint, TileConfig, TrainConfig,
};
use mrnseg_core::wsi::{
    generate_synthetic_slide, sample_dataset, slide_seed, SamplerConfig, SlidePyramid,
    SyntheticParams,
};
use mrnseg_core::{Mode, Shape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "gradient suite", gradient_suite),
    (2, "crop/upscale composition", crop_upscale_composition),
    (3, "architecture invariants", architecture_invariants),
    (4, "overfit smoke", overfit_smoke),
    (5, "comparative reproduction", comparative_reproduction),
    (6, "evaluation correctness", evaluation_correctness),
    (7, "reproducibility", reproducibility),
    (8, "stitching", stitching),
];

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for &(id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id} ({name}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn gradient_suite() -> Verdict {
    let seeds = 20;
    let start = Instant::now();
    let reports = gradcheck::run_suite(0, seeds).expect("suite runs");
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let all_seeds = reports.iter().all(|r| r.seeds == seeds);
    let pass = failing.is_empty()
        && all_seeds
        && worst.max_relative_error < gradcheck::TOLERANCE
        && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "{} cases x {seeds} seeds, worst {} at {:.2e} (< 1e-4), failing {:?}, {:.1}s (< 120s)",
            reports.len(),
            worst.op,
            worst.max_relative_error,
            failing,
            elapsed.as_secs_f64()
        ),
    )
}

fn crop_upscale_composition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut problems = Vec::new();
    for case in 0..100 {
        let gamma = [2usize, 4, 8][case % 3];
        let n = rng.random_range(1..=2);
        let h = gamma * rng.random_range(1..=5);
        let w = gamma * rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let x = Tensor::<f64>::uniform(Shape::new(n, h, w, c), -1.0, 1.0, &mut rng);
        let cropped = ops::center_crop(&x, gamma).unwrap();
        let bilinear = ops::bilinear_upsample(&cropped, gamma).unwrap();
        let mut transposed = cropped.clone();
        for _ in 0..gamma.trailing_zeros() {
            let k = Tensor::uniform(Shape::new(2, 2, c, c), -1.0, 1.0, &mut rng);
            let b = Tensor::zeros(Shape::vector(c));
            transposed = ops::conv_transpose2d(&transposed, &k, &b).unwrap();
        }
        if bilinear.shape() != x.shape() || transposed.shape() != x.shape() {
            problems.push(format!("{} with gamma {gamma}", x.shape()));
        }
        let same = |a: &Tensor<f64>| {
            a.shape() == x.shape()
                && a.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        if !same(&ops::center_crop(&x, 1).unwrap()) || !same(&ops::bilinear_upsample(&x, 1).unwrap())
        {
            problems.push(format!("identity at gamma 1 fails for {}", x.shape()));
        }
    }
    verdict(
        problems.is_empty(),
        format!("100 random shapes, gamma in {{2,4,8}}; problems: {problems:?}"),
    )
}

fn architecture_invariants() -> Verdict {
    let (depth, c0, size) = (2, 4, 64);
    let mut notes = Vec::new();
    let mut pass = true;
    let configs = [
        ModelConfig::unet(depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnBilinear, 2, depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnBilinear, 3, depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnBilinear, 4, depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnTransposed, 2, depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnTransposed, 3, depth, c0, size),
        ModelConfig::mrn(ModelKind::MrnTransposed, 4, depth, c0, size),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut decoder_counts = Vec::new();
    for cfg in configs {
        let model = Model::<f32>::build(cfg, 1).unwrap();
        decoder_counts.push(model.decoder_param_count());
        let inputs: Vec<Tensor<f32>> = (0..cfg.resolutions)
            .map(|_| Tensor::uniform(Shape::new(2, size, size, 3), 0.0, 1.0, &mut rng))
            .collect();
        let mut g = mrnseg_core::Graph::new();
        let trace = model.forward(&mut g, &inputs, Mode::Train).unwrap();
        let out = g.shape(trace.logits);
        if out != Shape::new(2, size, size, 1) {
            pass = false;
            notes.push(format!("{} J={} gives {out}", cfg.kind, cfg.resolutions));
        }
    }
    let decoder_same = decoder_counts.windows(2).all(|w| w[0] == w[1]);
    pass &= decoder_same;
    let count = |j| {
        Model::<f32>::build(ModelConfig::mrn(ModelKind::MrnBilinear, j, depth, c0, size), 1)
            .unwrap()
            .params
            .count()
    };
    let (p2, p3, p4) = (count(2), count(3), count(4));
    let linear = p3 - p2 == p4 - p3;
    pass &= linear;
    verdict(
        pass,
        format!(
            "output (2,{size},{size},1) for 7 configs {notes:?}; decoder params {:?}; \
             mrn-bilinear params J=2,3,4: {p2}, {p3}, {p4} (steps {} and {})",
            decoder_counts,
            p3 - p2,
            p4 - p3
        ),
    )
}

fn overfit_smoke() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig::mrn(ModelKind::MrnBilinear, 2, 2, 8, 64);
    let slides = vec![generate_synthetic_slide(77, 256, &SyntheticParams::default()).unwrap()];
    let sampler = SamplerConfig {
        size: 64,
        resolutions: 2,
        base_level: 0,
        n_per_slide: 10,
        balance: 0.5,
        validation_fraction: 0.2,
    };
    let split = sample_dataset::<f32>(&slides, &sampler, 1).unwrap();
    let examples: Vec<_> = split.train.iter().take(8).collect();
    assert_eq!(examples.len(), 8);
    let batch: Batch<f32> = make_batch(&examples).unwrap();
    let mut model = Model::<f32>::build(cfg, 0).unwrap();
    let objective = Objective::default();
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=500 {
        let out = model.step(&batch, &objective, Mode::Train).unwrap();
        last = out.data_loss as f64;
        if last < 0.05 {
            reached = Some(step - 1);
            break;
        }
        adam.step(&mut model.params, &out.grads).unwrap();
    }
    let elapsed = start.elapsed();
    let pass = reached.is_some() && elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "training BCE {last:.4} (< 0.05) after {} Adam steps (<= 500), {:.1}s (< 600s)",
            reached.map(|s| s.to_string()).unwrap_or_else(|| "500+".into()),
            elapsed.as_secs_f64()
        ),
    )
}

fn artifact_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn comparative_reproduction() -> Verdict {
    let start = Instant::now();
    let params = SyntheticParams::default();
    let slides: Vec<SlidePyramid> = (0..10)
        .map(|i| generate_synthetic_slide(slide_seed(0, i), 1024, &params).unwrap())
        .collect();
    let (train_slides, test_slides) = slides.split_at(8);
    let unet = |level| ModelConfig {
        input_level: level,
        ..ModelConfig::unet(3, 16, 128)
    };
    let models: Vec<(&str, ModelConfig)> = vec![
        ("unet-level0", unet(0)),
        ("unet-level1", unet(1)),
        ("unet-level2", unet(2)),
        ("mrn-bilinear", ModelConfig::mrn(ModelKind::MrnBilinear, 3, 3, 16, 128)),
        ("mrn-transposed", ModelConfig::mrn(ModelKind::MrnTransposed, 3, 3, 16, 128)),
    ];
    let seeds = [0u64, 1, 2];
    let mut auc = vec![vec![0.0; seeds.len()]; models.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        let mut pooled = Vec::new();
        for (mi, (name, cfg)) in models.iter().enumerate() {
            let sampler = SamplerConfig {
                size: cfg.input_size,
                resolutions: cfg.resolutions,
                base_level: cfg.input_level,
                n_per_slide: 10,
                balance: 0.5,
                validation_fraction: 0.2,
            };
            let split = sample_dataset::<f32>(train_slides, &sampler, seed).unwrap();
            let tc = TrainConfig {
                batch_size: 4,
                max_epochs: 30,
                seed,
                ..TrainConfig::default()
            };
            let out = train(Model::build(*cfg, seed).unwrap(), &split, &tc).unwrap();
            let mut px = PooledPixels::default();
            for s in test_slides {
                let map = predict_slide(&out.best.model, s, &TileConfig::default()).unwrap();
                px.add(&s.id, &map, s.mask()).unwrap();
            }
            auc[mi][si] = exact_auc(&px.scores, &px.truth).unwrap();
            eprintln!(
                "  seed {seed} {name:<15} AUC {:.4} (best epoch {}, {:.0}s elapsed)",
                auc[mi][si],
                out.best.epoch,
                start.elapsed().as_secs_f64()
            );
            pooled.push((name.to_string(), px));
        }
        let report = report_from_pixels(pooled).unwrap();
        report
            .write(&artifact_dir(&format!("criterion5-seed{seed}")))
            .unwrap();
    }
    let mean: Vec<f64> = auc.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect();
    let best_unet = mean[..3].iter().cloned().fold(f64::MIN, f64::max);
    let (mb, mt) = (mean[3] - best_unet, mean[4] - best_unet);
    let elapsed = start.elapsed();
    let pass = mb >= 0.05 && mt >= 0.05 && elapsed < Duration::from_secs(4 * 3600);
    let table: Vec<String> = models
        .iter()
        .zip(&mean)
        .map(|((n, _), m)| format!("{n} {m:.4}"))
        .collect();
    verdict(
        pass,
        format!(
            "mean pooled test AUC over seeds {seeds:?}: [{}]; margins over best U-Net: \
             bilinear {mb:+.4}, transposed {mt:+.4} (>= 0.05); {:.0} min (< 240 min)",
            table.join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

/// Independent reference: threshold at every distinct score, count by scan.
fn brute_force_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let tp = scores.iter().zip(truth).filter(|(s, &y)| **s >= t && y).count() as f64;
        let fp = scores.iter().zip(truth).filter(|(s, &y)| **s >= t && !y).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts.push((1.0, 1.0));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn evaluation_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..50 {
        let n = rng.random_range(2..=64);
        let (scores, truth) = loop {
            let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if truth.contains(&true) && truth.contains(&false) {
                let ties = rng.random_bool(0.5);
                let scores: Vec<f64> = (0..n)
                    .map(|_| {
                        let v: f64 = rng.random();
                        if ties {
                            (v * 6.0).floor() / 6.0
                        } else {
                            v
                        }
                    })
                    .collect();
                break (scores, truth);
            }
        };
        let got = roc(&scores, &truth, &exact_thresholds(&scores)).unwrap().auc;
        worst = worst.max((got - brute_force_auc(&scores, &truth)).abs());
        let squared: Vec<f64> = scores.iter().map(|p| p * p).collect();
        invariant &= exact_auc(&squared, &truth).unwrap() == got;
    }
    verdict(
        worst <= 1e-12 && invariant,
        format!("50 random cases: max |AUC - oracle| = {worst:.1e} (<= 1e-12); AUC(p) == AUC(p^2): {invariant}"),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mrnseg"))
        .args(args)
        .env("MRNSEG_THREADS", "1")
        .output()
        .expect("spawn mrnseg");
    assert!(
        out.status.success(),
        "mrnseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn reproducibility() -> Verdict {
    let root = artifact_dir("criterion7");
    let slides = root.join("slides");
    let s = |p: &Path| p.display().to_string();
    run_cli(&["gen", "--out", &s(&slides), "--slides", "2", "--seed", "7", "--size", "128"]);
    let mut runs = Vec::new();
    for name in ["run-a", "run-b"] {
        let out = root.join(name);
        run_cli(&[
            "train", "--data", &s(&slides), "--model", "mrn-bilinear", "--mpp-levels", "2",
            "--depth", "1", "--base-channels", "4", "--size", "32", "--epochs", "3",
            "--n-per-slide", "5", "--seed", "5", "--out", &s(&out),
        ]);
        runs.push(out);
    }
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let csv_same = read(runs[0].join("loss.csv")) == read(runs[1].join("loss.csv"));
    let ckpt_same = read(runs[0].join("best.ckpt")) == read(runs[1].join("best.ckpt"));

    let path = runs[0].join("best.ckpt");
    let ck = Checkpoint::<f32>::load(&path).unwrap();
    let copy = root.join("copy.ckpt");
    ck.save(&copy).unwrap();
    let bytes_same = read(path.clone()) == read(copy.clone());
    let back = Checkpoint::<f32>::load(&copy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<Tensor<f32>> = (0..2)
        .map(|_| Tensor::uniform(Shape::new(2, 32, 32, 3), 0.0, 1.0, &mut rng))
        .collect();
    let a = ck.model.predict(&x).unwrap();
    let b = back.model.predict(&x).unwrap();
    let forward_same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let state_same = ck.model.params == back.model.params
        && ck.model.stats == back.model.stats
        && ck.adam == back.adam;
    verdict(
        csv_same && ckpt_same && bytes_same && forward_same && state_same,
        format!(
            "loss.csv identical: {csv_same}; best.ckpt identical: {ckpt_same}; \
             save/load bytes identical: {bytes_same}; tensors identical: {state_same}; \
             infer forward bit-identical: {forward_same}"
        ),
    )
}

fn stitching() -> Verdict {
    let size = 1024u32;
    let img = RgbImage::from_pixel(size, size, Rgb([176, 128, 168]));
    let mut mask = GrayImage::new(size, size);
    mask.put_pixel(5, 5, image::Luma([1]));
    let slide = SlidePyramid::from_level0("constant".into(), 0, 0.5, img, mask, 3).unwrap();
    let train_slides = vec![generate_synthetic_slide(8, 256, &SyntheticParams::default()).unwrap()];
    let mut notes = Vec::new();
    let mut pass = tile_starts(1024, 64).len() == 31 && tile_starts(1024, 128).len() == 15;
    for cfg in [
        ModelConfig::unet(1, 4, 64),
        ModelConfig::mrn(ModelKind::MrnBilinear, 2, 1, 4, 64),
    ] {
        let sampler = SamplerConfig {
            size: 64,
            resolutions: cfg.resolutions,
            n_per_slide: 5,
            ..SamplerConfig::default()
        };
        let split = sample_dataset::<f32>(&train_slides, &sampler, 0).unwrap();
        let tc = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let ck = train(Model::build(cfg, 0).unwrap(), &split, &tc).unwrap().best;
        let map = predict_slide(&ck.model, &slide, &TileConfig::default()).unwrap();
        let lo = map.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = map.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let min_cov = map.coverage.iter().min().copied().unwrap_or(0);
        let ok = (map.width, map.height) == (1024, 1024) && hi - lo < 1e-6 && min_cov >= 1;
        pass &= ok;
        notes.push(format!(
            "{} J={}: L-inf spread {:.1e} (< 1e-6), min coverage {min_cov} (>= 1), \
             spread within 2x2 phase classes of the tile-covered interior {:.1e}",
            cfg.kind,
            cfg.resolutions,
            hi - lo,
            phase_spread(&map, 16)
        ));
    }
    verdict(pass, format!("1024x1024 constant slide; {}", notes.join("; ")))
}

/// Largest spread among pixels sharing the same (y mod 2, x mod 2) phase,
/// ignoring a `margin`-wide border. Stride-2 transposed convolutions map a
/// constant input to a 2-periodic output, so this isolates stitching errors
/// from that architectural pattern.
fn phase_spread(map: &mrnseg_core::pipeline::ProbabilityMap, margin: usize) -> f32 {
    let mut lo = [f32::INFINITY; 4];
    let mut hi = [f32::NEG_INFINITY; 4];
    for y in margin..map.height - margin {
        for x in margin..map.width - margin {
            let v = map.values[y * map.width + x];
            let k = (y % 2) * 2 + x % 2;
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (0..4).map(|k| hi[k] - lo[k]).fold(0.0, f32::max)
}
