//! Noise augmentation of expert data: random symbols are inserted and then
//! deleted with a backspace, so the model sees recoveries from states off the
//! data path. Prints a few augmented trajectories of each toy string.
//!
//! ```text
//! cargo run --example noise_augmentation -- [eta]
//! ```

use seqmatch::preprocess::{augment_noise, NoiseConfig};
use seqmatch::toy;

fn main() -> seqmatch::error::Result<()> {
    let eta: f64 = std::env::args().nth(1).map_or(0.3, |s| s.parse().expect("eta"));
    let vocab = toy::vocab();
    for (i, seq) in toy::sequences().iter().enumerate() {
        for seed in 0..3 {
            let cfg = NoiseConfig::new(eta, 100 * i as u64 + seed)?;
            let traj = augment_noise(&vocab, seq, &cfg, toy::CONTEXT_LEN)?;
            println!("{:<8} {}", toy::STRINGS[i], vocab.render_edits(&traj));
        }
    }
    println!("(*x marks a symbol inserted by the environment; the recorded label is the expert action)");
    Ok(())
}
