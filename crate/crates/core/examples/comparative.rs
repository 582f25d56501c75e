//! Trains the five comparison models on synthetic slides for one seed and
//! prints the pooled test AUC of each.
//!
//! ```text
//! EPOCHS=30 SEED=0 MODELS=unet0,mrn-bilinear cargo run --release --example comparative
//! ```
//!
//! `MODELS` is a comma-separated subset of unet0, unet1, unet2 (U-Net on
//! pyramid level 0/1/2), mrn-bilinear and mrn-transposed.

use std::time::Instant;

use mrnseg_core::eval::{exact_auc, PooledPixels};
use mrnseg_core::models::{Model, ModelConfig, ModelKind};
use mrnseg_core::pipeline::{predict_slide, train_with, TileConfig, TrainConfig};
use mrnseg_core::wsi::{
    generate_synthetic_slide, sample_dataset, slide_seed, SamplerConfig, SyntheticParams,
};

fn env_or(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn model_config(name: &str) -> Option<ModelConfig> {
    let unet = |level| ModelConfig {
        input_level: level,
        ..ModelConfig::unet(3, 16, 128)
    };
    Some(match name {
        "unet0" => unet(0),
        "unet1" => unet(1),
        "unet2" => unet(2),
        "mrn-bilinear" => ModelConfig::mrn(ModelKind::MrnBilinear, 3, 3, 16, 128),
        "mrn-transposed" => ModelConfig::mrn(ModelKind::MrnTransposed, 3, 3, 16, 128),
        _ => return None,
    })
}

fn main() -> mrnseg_core::Result<()> {
    let epochs = env_or("EPOCHS", 10);
    let seed = env_or("SEED", 0) as u64;
    let models = std::env::var("MODELS")
        .unwrap_or_else(|_| "unet0,unet1,unet2,mrn-bilinear,mrn-transposed".into());

    let params = SyntheticParams::default();
    let slides = (0..10)
        .map(|i| generate_synthetic_slide(slide_seed(0, i), 1024, &params))
        .collect::<mrnseg_core::Result<Vec<_>>>()?;
    let (train_slides, test_slides) = slides.split_at(8);

    for name in models.split(',') {
        let Some(cfg) = model_config(name) else {
            eprintln!("unknown model {name}");
            std::process::exit(2);
        };
        let start = Instant::now();
        let sampler = SamplerConfig {
            size: cfg.input_size,
            resolutions: cfg.resolutions,
            base_level: cfg.input_level,
            n_per_slide: 10,
            balance: 0.5,
            validation_fraction: 0.2,
        };
        let split = sample_dataset::<f32>(train_slides, &sampler, seed)?;
        let tc = TrainConfig {
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let out = train_with(Model::build(cfg, seed)?, &split, &tc, |r| {
            eprintln!("{name} epoch {} train {:.4} val {:?}", r.epoch, r.train_loss, r.val_loss)
        })?;
        let mut pixels = PooledPixels::default();
        for s in test_slides {
            let map = predict_slide(&out.best.model, s, &TileConfig::default())?;
            pixels.add(&s.id, &map, s.mask())?;
        }
        println!(
            "{name}: auc {:.4} best epoch {} ({:.0}s)",
            exact_auc(&pixels.scores, &pixels.truth)?,
            out.best.epoch,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
