//! Regenerates the committed test fixtures under `tests/fixtures/`:
//! a 10-sample synthetic dataset, a small trained checkpoint, and a
//! one-level single-stage checkpoint used to pin the tensor naming order.
//!
//! The frozen metric values in `tests/fixtures.rs` must be updated by hand
//! whenever this is rerun.

use std::path::Path;

use msunet::architecture::{build_cascade, FusionMode};
use msunet::data::{generate_synthetic, save_checkpoint, save_dataset, Size, SynthParams};
use msunet::loss::StageWeights;
use msunet::metrics::evaluate;
use msunet::training::{train, AugmentConfig, TrainConfig};

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let samples = generate_synthetic(&SynthParams::new(10, 77, Size::new(32, 32)));
    save_dataset(&root.join("synth10"), &samples).unwrap();

    let cfg = TrainConfig {
        stages: 2,
        levels: 2,
        channel_widths: vec![4, 8, 16],
        fusion_mode: FusionMode::Cifs,
        alphas: StageWeights::for_stages(2),
        learning_rate: 5e-3,
        batch_size: 5,
        epochs: 60,
        input_size: Size::new(32, 32),
        augmentation: AugmentConfig::disabled(),
        seed: 5,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    let model = train(&cfg, &samples, &[], None).unwrap().model;
    save_checkpoint(&root.join("fixture.ckpt"), &model, &cfg).unwrap();

    // Evaluate what was written, after the PNG round trip.
    let (model, cfg) = msunet::data::load_checkpoint(&root.join("fixture.ckpt")).unwrap();
    let loaded = msunet::data::load_dataset(&root.join("synth10"), cfg.input_size).unwrap();
    let report = evaluate(&model, &cfg, &loaded, cfg.threshold as f32).unwrap();
    println!("{:?}", report.means);

    let toy = TrainConfig {
        stages: 1,
        levels: 1,
        channel_widths: vec![2, 4],
        alphas: StageWeights::for_stages(1),
        input_size: Size::new(8, 8),
        ..TrainConfig::default()
    };
    let model = build_cascade::<f32>(&toy.cascade_config(), 1).unwrap();
    save_checkpoint(&root.join("toy_level1.ckpt"), &model, &toy).unwrap();
    for (name, t) in model.named_params() {
        println!("{name} {}", t.shape());
    }
}
