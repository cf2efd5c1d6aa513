//! Converts an action sequence containing backspaces into single-pass model
//! inputs and prints the attention mask, position ids and labels, then
//! checks that every row sees exactly the state it should.
//!
//! ```text
//! cargo run --example backspace_masks -- "ab<cd<<e$"
//! ```
//!
//! In the action string `<` is a backspace and `$` is end-of-sequence.

use seqmatch::preprocess::{encode_actions, state_views};
use seqmatch::seq_mdp::{EditAction, Vocab};

fn main() -> seqmatch::error::Result<()> {
    let spec = std::env::args().nth(1).unwrap_or_else(|| "ab<cd<<e$".into());
    let vocab = Vocab::from_chars("abcde".chars())?;
    let actions: Vec<EditAction> = spec
        .chars()
        .map(|c| match c {
            '<' => EditAction::Backspace,
            '$' => EditAction::Eos,
            c => EditAction::Insert(vocab.symbol_index(&c.to_string()).expect("symbol in a..e")),
        })
        .collect();
    let batch = encode_actions(&vocab, &actions, actions.len() + 1)?;
    print!("{}", batch.render(&vocab));
    let views = state_views(&actions);
    for (row, want) in views.iter().enumerate() {
        assert_eq!(&batch.reconstruct(&vocab, row)?, want);
    }
    println!("all {} rows reconstruct their state", views.len());
    Ok(())
}
