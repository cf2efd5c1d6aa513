//! The reward/Q bijection on random finite MDPs: the inverse soft Bellman
//! operator maps logits to rewards, the forward operator maps them back, and
//! the telescoping identities tie expected rewards to initial-state values.
//!
//! ```text
//! cargo run --example bellman_identities
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmatch::occupancy::{bellman, exact_occupancy, inverse_bellman, policy_from_q, telescoping_check, FiniteMdp, DEFAULT_TOL};

fn main() -> seqmatch::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for gamma in [0.5, 0.9, 0.99] {
        let mdp = FiniteMdp::random(&mut rng, 8, 3, 2);
        let q: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pol = policy_from_q(&q, 3)?;
        let r = inverse_bellman(&mdp, &q, &pol, gamma)?;
        let back = bellman(&mdp, &r, &pol, gamma, DEFAULT_TOL)?;
        let trip = q.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let other: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rho = exact_occupancy(&mdp, &policy_from_q(&other, 3)?, gamma)?;
        let (a, b, c) = telescoping_check(&mdp, &q, &pol, &rho, gamma)?;
        println!("gamma {gamma:<5} round trip {trip:.1e}  telescoping {a:.10} {b:.10} {c:.10}");
    }
    Ok(())
}
