//! Round trips a text dataset through the token-id format and a trained
//! policy through a checkpoint, then shows the hash check rejecting a
//! checkpoint loaded against a different state space.
//!
//! ```text
//! cargo run --example dataset_checkpoint_io
//! ```

use std::sync::Arc;

use seqmatch::dataio::{load_checkpoint, load_checkpoint_for, load_dataset, parse_text_lines, save_checkpoint, save_dataset, DatasetFormat};
use seqmatch::seq_mdp::{SeqSpace, Vocab, DEFAULT_STATE_BUDGET};
use seqmatch::trainer::{train, TrainConfig};

fn main() -> seqmatch::error::Result<()> {
    let dir = std::env::temp_dir().join(format!("seqmatch-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let mut ds = parse_text_lines("hello\nhelp\nheap\n")?;
    println!("vocabulary {:?}, {} records", ds.vocab.symbols(), ds.records.len());
    ds.format = DatasetFormat::TokenIds;
    let path = dir.join("words.tok");
    save_dataset(&path, &ds)?;
    print!("{}", std::fs::read_to_string(&path)?);
    let (back, _) = load_dataset(&path, DatasetFormat::TokenIds, 7)?;
    assert_eq!(back.records, ds.records);

    let cfg = TrainConfig { steps: 100, ..TrainConfig::default() };
    let policy = train(&ds, &cfg, |_, _| Ok(()))?.policy;
    let ckpt = dir.join("policy.sqmc");
    save_checkpoint(&policy, &serde_json::to_value(&cfg)?, &ckpt)?;
    let loaded = load_checkpoint(&ckpt)?;
    assert_eq!(loaded.params(), policy.params());
    println!("checkpoint: {} bytes, {} parameters restored", std::fs::metadata(&ckpt)?.len(), loaded.params().len());

    let other = Arc::new(SeqSpace::new(Vocab::from_chars("xyz".chars())?, 7, DEFAULT_STATE_BUDGET)?);
    match load_checkpoint_for(&ckpt, other) {
        Err(e) => println!("loading against another space: {e}"),
        Ok(_) => unreachable!("hash check passed for a different space"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
