//! A small fixed grammar used by tests, examples and `builtin:toy` configs.

use crate::seq_mdp::{Token, Vocab};

pub const SYMBOLS: &str = "abc";

/// The five expert strings, each at most five symbols long.
pub const STRINGS: [&str; 5] = ["ab", "abc", "acba", "bca", "cabab"];

/// Room for `<bos>`, five symbols and `<eos>`.
pub const CONTEXT_LEN: usize = 7;

pub fn vocab() -> Vocab {
    Vocab::from_chars(SYMBOLS.chars()).expect("distinct symbols")
}

/// Payloads ending in `<eos>`, one per expert string.
pub fn sequences() -> Vec<Vec<Token>> {
    let v = vocab();
    STRINGS
        .iter()
        .map(|s| {
            let mut seq: Vec<Token> = s
                .chars()
                .map(|c| Token::Sym(v.symbol_index(&c.to_string()).expect("grammar symbol")))
                .collect();
            seq.push(Token::Eos);
            seq
        })
        .collect()
}

/// The expert strings with equal weight.
pub fn dataset() -> Vec<(Vec<Token>, f64)> {
    sequences().into_iter().map(|s| (s, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_fits_context() {
        let seqs = sequences();
        assert_eq!(seqs.len(), 5);
        assert!(seqs.iter().all(|s| s.len() < CONTEXT_LEN && s.last() == Some(&Token::Eos)));
        assert_eq!(vocab().len(), 3);
    }
}
