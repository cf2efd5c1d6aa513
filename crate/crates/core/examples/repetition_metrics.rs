//! rep-n and diversity on a few hand-picked continuations.
//!
//! ```text
//! cargo run --example repetition_metrics -- "a a b a a b"
//! ```

use seqmatch::evalx::{diversity, rep_n};
use seqmatch::seq_mdp::{Token, Vocab};

fn main() -> seqmatch::error::Result<()> {
    let vocab = Vocab::from_chars("abcd".chars())?;
    let mut inputs = vec!["a a a a a".to_string(), "a b c d".to_string(), "a b a b a b a b".to_string()];
    inputs.extend(std::env::args().skip(1));
    for text in &inputs {
        let seq: Vec<Token> = text
            .split_whitespace()
            .map(|w| Token::Sym(vocab.symbol_index(w).expect("symbols a..d")))
            .collect();
        let reps: Vec<String> = (2..=4).map(|n| format!("rep-{n} {:6.2}", rep_n(&seq, n).0)).collect();
        println!("{text:<20} {}  diversity {:.5}", reps.join("  "), diversity(&seq));
    }
    Ok(())
}
