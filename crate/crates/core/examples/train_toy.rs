//! Trains a tabular policy on the built-in toy grammar and prints the exact
//! occupancy divergences at each evaluation step.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [lr]
//! ```

use seqmatch::trainer::{load_train_dataset, train, TrainConfig};

fn main() -> seqmatch::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::default();
    if let Some(s) = args.next() {
        cfg.steps = s.parse().expect("steps");
    }
    if let Some(lr) = args.next() {
        cfg.lr = lr.parse().expect("lr");
    }
    let data = load_train_dataset(&cfg)?;
    let out = train(&data, &cfg, |row, _| {
        if let (Some(kl), Some(chi)) = (row.kl_exact, row.chi2_mixture_exact) {
            println!(
                "step {:>5}  beta {:.3}  loss {:>9.5}  kl {:.5}  chi2-mix {:.5}  valid {:.3}",
                row.step,
                row.beta,
                row.loss_total,
                kl,
                chi,
                row.valid_rate.unwrap_or(0.0)
            );
        }
        Ok(())
    })?;
    println!("finished in {:.2}s", out.summary.elapsed_seconds);
    Ok(())
}
