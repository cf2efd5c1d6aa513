//! Exact occupancy measures on the enumerated toy state space: compares the
//! data occupancy with that of a uniform policy and of a briefly trained
//! one, under every divergence.
//!
//! ```text
//! cargo run --release --example occupancy_divergences
//! ```

use std::sync::Arc;

use seqmatch::evalx::exact_pair;
use seqmatch::occupancy::{occupancy_divergence, DivergenceKind};
use seqmatch::policy::TabularPolicy;
use seqmatch::seq_mdp::{SeqSpace, DEFAULT_STATE_BUDGET};
use seqmatch::toy;
use seqmatch::trainer::{load_train_dataset, train, TrainConfig};

fn main() -> seqmatch::error::Result<()> {
    let space = Arc::new(SeqSpace::new(toy::vocab(), toy::CONTEXT_LEN, DEFAULT_STATE_BUDGET)?);
    println!("{} states, {} actions", space.num_states(), space.num_actions());
    let gamma = 0.875;
    let cfg = TrainConfig { steps: 400, ..TrainConfig::default() };
    let trained = train(&load_train_dataset(&cfg)?, &cfg, |_, _| Ok(()))?.policy;
    let data = toy::dataset();
    for (name, policy) in [("uniform", TabularPolicy::zeros(space.clone())), ("trained", trained)] {
        let (rho_data, rho_model) = exact_pair(&policy, &data, gamma)?;
        print!("{name:<8}");
        for kind in DivergenceKind::ALL {
            print!("  {} {:.5}", kind.as_str(), occupancy_divergence(&rho_data, &rho_model, kind)?);
        }
        println!();
    }
    Ok(())
}
