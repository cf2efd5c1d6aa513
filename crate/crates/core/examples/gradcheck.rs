//! Checks the analytic gradient of the occupancy loss against central finite
//! differences on random tabular instances, for every divergence.
//!
//! ```text
//! cargo run --example gradcheck -- [trials]
//! ```

use seqmatch::divergence::PhiKind;
use seqmatch::objective::gradcheck_random;

fn main() -> seqmatch::error::Result<()> {
    let trials: u64 = std::env::args().nth(1).map_or(20, |s| s.parse().expect("trials"));
    for kind in PhiKind::ALL {
        let mut worst = 0.0f64;
        let mut params = 0;
        for seed in 0..trials {
            let r = gradcheck_random(kind, seed)?;
            worst = worst.max(r.rel_error);
            params = params.max(r.num_params);
        }
        println!("{kind:<13} {trials} trials, up to {params} parameters, max relative error {worst:.2e}");
    }
    Ok(())
}
