//! Trains sequence matching, behavioral cloning and plain maximum likelihood
//! on the toy grammar, then measures how often each produces an in-grammar
//! string when the environment injects random symbols during generation.
//!
//! ```text
//! cargo run --release --example backspace_recovery -- [seeds]
//! ```

use seqmatch::evalx::{data_support, sample_rates};
use seqmatch::policy::SampleConfig;
use seqmatch::toy;
use seqmatch::trainer::{load_train_dataset, train, ObjectiveKind, TrainConfig};

fn main() -> seqmatch::error::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seeds"));
    let support = data_support(&toy::dataset(), toy::CONTEXT_LEN)?;
    let data = load_train_dataset(&TrainConfig::default())?;
    println!("{:<5} {:>12} {:>12} {:>14} {:>14}", "", "valid", "valid", "backspaces", "backspaces");
    println!("{:<5} {:>12} {:>12} {:>14} {:>14}", "", "clean", "injected", "clean", "injected");
    for kind in [ObjectiveKind::Sm, ObjectiveKind::Bc, ObjectiveKind::Mle] {
        let mut acc = [0.0; 4];
        for seed in 0..seeds {
            let cfg = TrainConfig { objective: kind, seed, eval_every: 1000, ..TrainConfig::default() };
            let policy = train(&data, &cfg, |_, _| Ok(()))?.policy;
            for (i, inject_prob) in [0.0, 0.1].into_iter().enumerate() {
                let sc = SampleConfig { inject_prob, max_steps: 1024, ..Default::default() };
                let r = sample_rates(&policy, &support, 10_000, &sc, 77 + seed)?;
                acc[i] += r.valid_rate() / seeds as f64;
                acc[2 + i] += r.backspace_rate() / seeds as f64;
            }
        }
        println!("{:<5} {:>12.4} {:>12.4} {:>14.4} {:>14.4}", format!("{kind:?}"), acc[0], acc[1], acc[2], acc[3]);
    }
    Ok(())
}
