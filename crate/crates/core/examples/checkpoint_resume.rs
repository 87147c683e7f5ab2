//! Trains a small network for two epochs, then trains one epoch, saves,
//! resumes for the second and compares the two metric traces.

use std::fs;

use capsnet::caps::ArchitectureSpec;
use capsnet::checkpoint::Checkpoint;
use capsnet::data::{idx_paths, load_idx, split_train_val};
use capsnet::model::CapsNet;
use capsnet::train::{resume, train, TrainConfig, LAST_CHECKPOINT, METRICS_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let (images, labels) = idx_paths(&dir, "train")?;
    let (train_set, val_set) = split_train_val(&load_idx(images, labels)?.take(600), 500, 100, 1)?;
    let work = std::env::temp_dir().join(format!("capsnet-resume-{}", std::process::id()));
    let (full, split) = (work.join("full"), work.join("split"));

    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let fresh = || CapsNet::new(ArchitectureSpec::baseline(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    train(&mut fresh()?, &train_set, &val_set, &cfg, Some(&full))?;

    let first = TrainConfig { epochs: 1, ..cfg.clone() };
    train(&mut fresh()?, &train_set, &val_set, &first, Some(&split))?;
    let (_, metrics) = resume(Checkpoint::load(&split.join(LAST_CHECKPOINT))?, &train_set, &val_set, &cfg, Some(&split))?;

    let a = fs::read_to_string(full.join(METRICS_FILE))?;
    let b = fs::read_to_string(split.join(METRICS_FILE))?;
    print!("{a}");
    println!("resumed run identical: {}", a == b);
    println!("best validation accuracy {:.4}", metrics.best().1);
    fs::remove_dir_all(&work).ok();
    Ok(())
}
