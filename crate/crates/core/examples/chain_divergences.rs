//! The compounding-error chain: a policy that leaves the data path with
//! probability ε per step. Prints enumerated and closed-form divergences for
//! a range of chain lengths, showing how sequence-level KL grows linearly in
//! n while reverse KL is infinite and occupancy χ²-mixture stays bounded.
//!
//! ```text
//! cargo run --example chain_divergences -- [eps] [gamma]
//! ```

use seqmatch::evalx::chain_experiment;

fn main() -> seqmatch::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let eps: f64 = args.next().map_or(0.1, |s| s.parse().expect("eps"));
    let gamma: f64 = args.next().map_or(0.9, |s| s.parse().expect("gamma"));
    println!("eps {eps}  gamma {gamma}");
    println!("{:>3} {:>10} {:>10} {:>10} {:>12} {:>12} {:>10}", "n", "complete", "seq kl", "rev kl", "occ kl", "occ chi2mix", "max gap");
    for n in [1, 2, 5, 10, 15, 20] {
        let r = chain_experiment(n, eps, gamma)?;
        println!(
            "{n:>3} {:>10.6} {:>10.6} {:>10} {:>12.6} {:>12.6} {:>10.1e}",
            r.completion_prob,
            r.joint.kl,
            r.joint.reverse_kl,
            r.occupancy.kl,
            r.occupancy.chi2_mixture,
            r.max_disagreement()
        );
    }
    Ok(())
}
