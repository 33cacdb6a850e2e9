#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asrep::pipeline::{DataFormat, Mode, PipelineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Interactions for `users` users over `items` items. Each user walks a
/// ring, mostly stepping to the next item, so the data has learnable order.
pub fn synthetic_tsv(users: usize, items: u32, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for u in 0..users {
        let len = rng.random_range(3..=14);
        let mut item = rng.random_range(0..items);
        for t in 0..len {
            let _ = writeln!(out, "u{u}\ti{item}\t{}", 1_000 + t);
            item = if rng.random_bool(0.8) {
                (item + 1) % items
            } else {
                rng.random_range(0..items)
            };
        }
    }
    out
}

pub fn write_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("interactions.tsv");
    std::fs::write(&path, synthetic_tsv(60, 140, 7)).unwrap();
    path
}

/// Tiny model and budget so a full run takes well under a second.
pub fn small_config(dataset: PathBuf, out: PathBuf, mode: Mode) -> PipelineConfig {
    PipelineConfig {
        dataset,
        format: DataFormat::Tsv,
        max_len: 12,
        hidden: 8,
        layers: 1,
        heads: 2,
        dropout: 0.2,
        batch_size: 16,
        pretrain_epochs: 2,
        finetune_epochs: 2,
        k: 3,
        m: 6,
        num_negatives: 20,
        mode,
        out,
        ..PipelineConfig::default()
    }
}
