//! Trains the baseline shortcut network with fuzzy routing on the bundled
//! MNIST subset (8,000 train / 2,000 validation).
//!
//! cargo run --release --example train_mnist -- [epochs] [out_dir]

use std::path::{Path, PathBuf};

use capsnet::caps::ArchitectureSpec;
use capsnet::data::{idx_paths, load_idx, split_train_val};
use capsnet::model::CapsNet;
use capsnet::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capsnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(15, |s| s.parse().expect("epochs must be an integer"));
    let out_dir = args.next().map(PathBuf::from);

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let (images, labels) = idx_paths(&dir, "train")?;
    let all = load_idx(images, labels)?;
    let (train_set, val_set) = split_train_val(&all, 8000, 2000, 0)?;

    let cfg = TrainConfig {
        epochs,
        record_wall_time: true,
        ..TrainConfig::default()
    };
    let mut net = CapsNet::new(ArchitectureSpec::baseline(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    println!("{} parameters", net.param_count());
    let metrics = train(&mut net, &train_set, &val_set, &cfg, out_dir.as_deref())?;
    let (epoch, acc) = metrics.best();
    println!("best validation accuracy {acc:.4} at epoch {epoch}");
    Ok(())
}
