//! Searched loss vs. plain softmax on 10-class blobs with 20% label noise.
//!
//! ```text
//! cargo run --release -p lossearch --example noisy_blobs [seeds]
//! ```

use std::time::Instant;

use lossearch::data::{corrupt_labels, make_blobs};
use lossearch::losses::LossSpec;
use lossearch::nnet::{HeadKind, TrainConfig};
use lossearch::search::{run_search, train_baseline, SearchConfig};

fn main() -> lossearch::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let started = Instant::now();
    for seed in 1..=seeds {
        let clean = make_blobs(10, 250, 16, 0.35, seed)?;
        let data = corrupt_labels(&clean, 0.2, seed)?;
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let cfg = SearchConfig {
            population: 8,
            intervals: 6,
            epochs: 20,
            train: train.clone(),
            workers: 8,
            seed,
            ..SearchConfig::default()
        };
        let (_, history) = train_baseline(
            &LossSpec::Softmax,
            &TrainConfig {
                epochs: cfg.epochs,
                ..train
            },
            &cfg.hidden_dims,
            cfg.feature_dim,
            HeadKind::Cosine,
            &data,
        )?;
        let outcome = run_search(&cfg, &data)?;
        let searched = outcome.model.evaluate(&data.val)?;
        let baseline = history.last().map(|h| h.val_accuracy).unwrap_or(0.0);
        println!("seed {seed}: baseline {baseline:.4}  searched {searched:.4}");
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
