//! Trains briefly on the toy grammar, then samples with temperature and
//! nucleus truncation, with and without random-token injection. Backspaces
//! roll the state back in place; `*x` marks an injected symbol.
//!
//! ```text
//! cargo run --release --example sampling -- [temperature] [top_p]
//! ```

use seqmatch::evalx::{data_support, sample_rates};
use seqmatch::policy::{sample_many, SampleConfig};
use seqmatch::seq_mdp::SeqState;
use seqmatch::toy;
use seqmatch::trainer::{load_train_dataset, train, TrainConfig};

fn main() -> seqmatch::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let temperature: f64 = args.next().map_or(1.0, |s| s.parse().expect("temperature"));
    let top_p: f64 = args.next().map_or(1.0, |s| s.parse().expect("top_p"));
    let cfg = TrainConfig { eta: 0.05, ..TrainConfig::default() };
    let policy = train(&load_train_dataset(&cfg)?, &cfg, |_, _| Ok(()))?.policy;
    let vocab = policy.space().vocab();
    let support = data_support(&toy::dataset(), toy::CONTEXT_LEN)?;
    for inject_prob in [0.0, 0.2] {
        let sc = SampleConfig { temperature, top_p, inject_prob, ..Default::default() };
        println!("inject_prob {inject_prob}");
        for t in sample_many(&policy, &vec![SeqState::root(); 6], &sc, 1)? {
            let last = t.final_state().cloned().unwrap_or_else(SeqState::root);
            println!("  {:<28} via {}", vocab.render(&last), vocab.render_edits(&t));
        }
        let r = sample_rates(&policy, &support, 5000, &sc, 2)?;
        println!("  valid {:.3}  backspace rate {:.4}  mean length {:.2}", r.valid_rate(), r.backspace_rate(), r.mean_length());
    }
    Ok(())
}
