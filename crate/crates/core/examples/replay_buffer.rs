//! Sampling cadence and FIFO replay: how often the trainer refills the
//! buffer, and which rounds survive after a few refills.
//!
//! ```text
//! cargo run --example replay_buffer -- [capacity] [batch] [reuse]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqmatch::seq_mdp::{SeqState, Source, Trajectory};
use seqmatch::policy::prompt_transitions;
use seqmatch::trainer::{sampling_cadence, ReplayBuffer, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = TrainConfig {
        buffer_capacity: args.next().map_or(100, |s| s.parse().expect("capacity")),
        batch_size: args.next().map_or(10, |s| s.parse().expect("batch")),
        reuse_factor: args.next().map_or(8.0, |s| s.parse().expect("reuse")),
        gen_batch: Some(100),
        ..TrainConfig::default()
    };
    let c = sampling_cadence(&cfg);
    println!(
        "capacity {}  batch {}  reuse {}  -> {} trajectories every {} steps",
        cfg.buffer_capacity, cfg.batch_size, cfg.reuse_factor, c.round, c.every
    );
    let mut buf = ReplayBuffer::new(cfg.buffer_capacity);
    let placeholder = |_| -> Trajectory { prompt_transitions(&SeqState::root(), Source::Model) };
    for round in 0..4 {
        let step = round * c.every;
        let evicted = buf.insert_round(step, (0..c.round).map(placeholder).collect());
        let steps: std::collections::BTreeSet<usize> = buf.insertion_steps().collect();
        println!("step {step:>4}: evicted {evicted:>3}, holding {} from rounds {steps:?}", buf.len());
    }
    let drawn = buf.draw(cfg.batch_size, &mut ChaCha8Rng::seed_from_u64(0));
    println!("drew {} trajectories", drawn.len());
}
