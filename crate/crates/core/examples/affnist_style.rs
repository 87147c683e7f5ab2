//! Builds the affNist-style evaluation set from the validation digits and,
//! given a checkpoint trained on padded 40x40 inputs, reports its accuracy.
//!
//! cargo run --release --example affnist_style -- [checkpoint]

use std::path::Path;

use capsnet::checkpoint::load_checkpoint;
use capsnet::data::{idx_paths, load_idx, make_affnist_style, split_train_val, AffnistVariant, AugmentConfig};
use capsnet::train::evaluate;

fn main() -> capsnet::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let (images, labels) = idx_paths(&dir, "train")?;
    let (_, val) = split_train_val(&load_idx(images, labels)?, 8000, 2000, 0)?;
    let cfg = AugmentConfig::default();
    let test = make_affnist_style(&val, &cfg, AffnistVariant::Test, 0)?;
    println!("{} digits, {}x{} after affine warp and padding", test.len(), test.height(), test.width());

    let mut ink = vec![0.0; test.width()];
    for i in 0..test.len() {
        for (j, v) in test.image(i).iter().enumerate() {
            ink[j % test.width()] += v;
        }
    }
    let total: f64 = ink.iter().sum();
    let centre: f64 = ink.iter().enumerate().map(|(j, v)| j as f64 * v).sum::<f64>() / total;
    println!("mean horizontal ink centre {centre:.2} (image centre {:.1})", (test.width() - 1) as f64 / 2.0);

    if let Some(path) = std::env::args().nth(1) {
        let (net, _, _) = load_checkpoint(Path::new(&path), None)?;
        if net.spec().input_size != test.width() {
            println!("{path} takes {0}x{0} inputs; train with `capsnet train --padded` first", net.spec().input_size);
            return Ok(());
        }
        println!("accuracy {:.4}", evaluate(&net, &test, 256)?);
    }
    Ok(())
}
