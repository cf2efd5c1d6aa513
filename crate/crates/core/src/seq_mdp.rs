//! The sequence MDP.
//!
//! States are token prefixes rooted at begin-of-sequence. Actions insert a
//! vocabulary symbol, insert end-of-sequence, or delete the final token with
//! a backspace. A state ending in end-of-sequence is absorbing: every action
//! maps it to itself.
//!
//! Id layout used wherever tokens or actions need integers:
//!
//! ```text
//! token ids : 0 = <bos>, 1..=K = symbols, K+1 = <eos>, K+2 = <backspace>
//! action ids: token id - 1, i.e. 0..K-1 symbols, K = <eos>, K+1 = <backspace>
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default cap on the number of enumerated states.
pub const DEFAULT_STATE_BUDGET: usize = 1_000_000;

/// A token that can appear inside a state. Backspace is deliberately absent:
/// it is an action, never part of a state.
///
/// The derived order (`Bos < Sym(0) < Sym(1) < .. < Eos`) is the order used for
/// state enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Bos,
    Sym(u32),
    Eos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditAction {
    Insert(u32),
    Eos,
    Backspace,
}

impl EditAction {
    pub fn is_backspace(self) -> bool {
        matches!(self, EditAction::Backspace)
    }

    /// The token appended by an insert, `None` for backspace.
    pub fn inserted(self) -> Option<Token> {
        match self {
            EditAction::Insert(i) => Some(Token::Sym(i)),
            EditAction::Eos => Some(Token::Eos),
            EditAction::Backspace => None,
        }
    }

    pub fn from_token(t: Token) -> Option<EditAction> {
        match t {
            Token::Bos => None,
            Token::Sym(i) => Some(EditAction::Insert(i)),
            Token::Eos => Some(EditAction::Eos),
        }
    }
}

/// Ordered payload symbols plus the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        if symbols.len() > u32::MAX as usize - 3 {
            return Err(Error::VocabOverflow(format!("{} symbols", symbols.len())));
        }
        Ok(Self { symbols })
    }

    /// One symbol per distinct character, sorted.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut cs: Vec<char> = chars.into_iter().collect();
        cs.sort_unstable();
        cs.dedup();
        Self::new(cs.into_iter().map(String::from))
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Number of payload symbols (specials excluded).
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn symbol_index(&self, s: &str) -> Option<u32> {
        self.symbols.iter().position(|x| x == s).map(|i| i as u32)
    }

    pub fn action_index(&self, a: EditAction) -> usize {
        let k = self.symbols.len();
        match a {
            EditAction::Insert(i) => {
                debug_assert!((i as usize) < k, "symbol {i} outside vocabulary");
                i as usize
            }
            EditAction::Eos => k,
            EditAction::Backspace => k + 1,
        }
    }

    pub fn action(&self, index: usize) -> EditAction {
        let k = self.symbols.len();
        match index.cmp(&k) {
            Ordering::Less => EditAction::Insert(index as u32),
            Ordering::Equal => EditAction::Eos,
            Ordering::Greater => {
                assert!(index == k + 1, "action index {index} out of range");
                EditAction::Backspace
            }
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = EditAction> + '_ {
        (0..self.num_actions()).map(move |i| self.action(i))
    }

    pub fn backspace_index(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn eos_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn bos_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        self.symbols.len() as u32 + 1
    }

    pub fn backspace_id(&self) -> u32 {
        self.symbols.len() as u32 + 2
    }

    /// Total number of ids in the shared token/backspace id space.
    pub fn id_count(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn token_id(&self, t: Token) -> u32 {
        match t {
            Token::Bos => 0,
            Token::Sym(i) => i + 1,
            Token::Eos => self.eos_id(),
        }
    }

    pub fn token_from_id(&self, id: u32) -> Option<Token> {
        let k = self.symbols.len() as u32;
        match id {
            0 => Some(Token::Bos),
            i if i <= k => Some(Token::Sym(i - 1)),
            i if i == k + 1 => Some(Token::Eos),
            _ => None,
        }
    }

    pub fn action_id(&self, a: EditAction) -> u32 {
        self.action_index(a) as u32 + 1
    }

    pub fn action_from_id(&self, id: u32) -> Option<EditAction> {
        if id == 0 || id as usize > self.num_actions() {
            None
        } else {
            Some(self.action(id as usize - 1))
        }
    }

    pub fn token_str(&self, t: Token) -> &str {
        match t {
            Token::Bos => "<bos>",
            Token::Eos => "<eos>",
            Token::Sym(i) => &self.symbols[i as usize],
        }
    }

    pub fn action_str(&self, a: EditAction) -> &str {
        match a {
            EditAction::Insert(i) => &self.symbols[i as usize],
            EditAction::Eos => "<eos>",
            EditAction::Backspace => "<bs>",
        }
    }

    pub fn render(&self, s: &SeqState) -> String {
        s.tokens()
            .iter()
            .map(|&t| self.token_str(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The edits a trajectory actually made: recorded actions, except that
    /// symbols injected by the environment show as `*x` and inserts turned
    /// into a forced end show as `<eos>`.
    pub fn render_edits(&self, traj: &Trajectory) -> String {
        traj.transitions
            .iter()
            .map(|t| match t.kind {
                TransitionKind::Plain => self.action_str(t.action).to_string(),
                TransitionKind::Noise => format!("*{}", self.token_str(t.next.last())),
                TransitionKind::ForcedEos => self.token_str(Token::Eos).to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn contains(&self, t: Token) -> bool {
        match t {
            Token::Sym(i) => (i as usize) < self.symbols.len(),
            _ => true,
        }
    }
}

/// A token prefix. Always starts with `<bos>`; terminal iff it ends in `<eos>`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqState {
    tokens: Vec<Token>,
}

impl SeqState {
    pub fn root() -> Self {
        Self { tokens: vec![Token::Bos] }
    }

    /// Builds `<bos>` followed by `payload`.
    pub fn from_payload(payload: &[Token]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(payload.len() + 1);
        tokens.push(Token::Bos);
        for (i, &t) in payload.iter().enumerate() {
            match t {
                Token::Bos => {
                    return Err(Error::InvalidArgument("<bos> inside a state".into()));
                }
                Token::Eos if i + 1 != payload.len() => {
                    return Err(Error::InvalidArgument("<eos> before the end of a state".into()));
                }
                _ => tokens.push(t),
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Tokens after `<bos>`.
    pub fn payload(&self) -> &[Token] {
        &self.tokens[1..]
    }

    /// Length including `<bos>`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_root(&self) -> bool {
        self.tokens.len() == 1
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.tokens.last(), Some(Token::Eos))
    }

    pub fn last(&self) -> Token {
        *self.tokens.last().expect("state always holds <bos>")
    }

    pub fn push(&self, t: Token) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(t);
        Self { tokens }
    }

    /// The state with the final token removed; the root is its own parent.
    pub fn parent(&self) -> Self {
        if self.is_root() {
            self.clone()
        } else {
            Self {
                tokens: self.tokens[..self.tokens.len() - 1].to_vec(),
            }
        }
    }
}

impl fmt::Debug for SeqState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match t {
                Token::Bos => f.write_str("bos")?,
                Token::Eos => f.write_str("eos")?,
                Token::Sym(s) => write!(f, "{s}")?,
            }
        }
        f.write_str("]")
    }
}

/// Shortlex: shorter states first, ties broken lexicographically by token.
impl Ord for SeqState {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tokens
            .len()
            .cmp(&other.tokens.len())
            .then_with(|| self.tokens.cmp(&other.tokens))
    }
}

impl PartialOrd for SeqState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Deterministic editing dynamics. Total: every (state, action) pair has a
/// successor.
pub fn step(s: &SeqState, a: EditAction) -> SeqState {
    if s.is_terminal() {
        return s.clone();
    }
    match a.inserted() {
        Some(t) => s.push(t),
        None => s.parent(),
    }
}

/// `s0` followed by the state after each action.
pub fn apply_actions(s0: &SeqState, actions: &[EditAction]) -> Vec<SeqState> {
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(s0.clone());
    let mut cur = s0.clone();
    for &a in actions {
        cur = step(&cur, a);
        out.push(cur.clone());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    /// `next == step(state, action)`.
    Plain,
    /// The environment inserted a random symbol instead of the chosen action.
    Noise,
    /// The context was full, so the insert was replaced by `<eos>`.
    ForcedEos,
}

/// Dynamics with a context-length cap: a non-terminal state never reaches
/// `context_len` tokens (counting `<bos>`); an insert that would get there
/// appends `<eos>` instead.
pub fn step_capped(s: &SeqState, a: EditAction, context_len: usize) -> (SeqState, TransitionKind) {
    let next = step(s, a);
    if !next.is_terminal() && next.len() >= context_len && next.len() > s.len() {
        (s.push(Token::Eos), TransitionKind::ForcedEos)
    } else {
        (next, TransitionKind::Plain)
    }
}

fn geometric_count(k: u128, terms: usize) -> u128 {
    // 1 + k + k^2 + .. + k^(terms-1), saturating
    let mut total: u128 = 0;
    let mut p: u128 = 1;
    for _ in 0..terms {
        total = total.saturating_add(p);
        p = p.saturating_mul(k);
    }
    total
}

/// Number of states `enumerate_states(vocab, max_len, _)` would return.
pub fn count_states(vocab: &Vocab, max_len: usize) -> u128 {
    let k = vocab.len() as u128;
    let non_terminal = geometric_count(k, max_len + 1);
    let terminal = geometric_count(k, max_len);
    non_terminal.saturating_add(terminal)
}

/// Every state reachable from `[bos]` with at most `max_len` tokens after
/// `<bos>`, terminal states included, in shortlex order.
pub fn enumerate_states(vocab: &Vocab, max_len: usize, budget: usize) -> Result<Vec<SeqState>> {
    let needed = count_states(vocab, max_len);
    if needed > budget as u128 {
        return Err(Error::BudgetExceeded { needed, cap: budget });
    }
    let mut out = Vec::with_capacity(needed as usize);
    let mut frontier = vec![SeqState::root()];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for s in &frontier {
            out.push(s.clone());
            if depth < max_len {
                out.push(s.push(Token::Eos));
                for i in 0..vocab.len() as u32 {
                    next.push(s.push(Token::Sym(i)));
                }
            }
        }
        frontier = next;
    }
    out.sort();
    Ok(out)
}

/// The enumerated state space of a context-capped sequence MDP, with a
/// precomputed successor table.
#[derive(Clone, Debug)]
pub struct SeqSpace {
    vocab: Vocab,
    context_len: usize,
    states: Vec<SeqState>,
    index: HashMap<SeqState, usize>,
    next: Vec<usize>,
    kinds: Vec<TransitionKind>,
}

impl SeqSpace {
    /// States with at most `context_len` tokens (counting `<bos>`); non-terminal
    /// states are limited to `context_len - 1`.
    pub fn new(vocab: Vocab, context_len: usize, budget: usize) -> Result<Self> {
        if context_len < 2 {
            return Err(Error::ContextTooShort(context_len));
        }
        let states: Vec<SeqState> = enumerate_states(&vocab, context_len - 1, budget)?
            .into_iter()
            .filter(|s| s.is_terminal() || s.len() < context_len)
            .collect();
        let index: HashMap<SeqState, usize> =
            states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let na = vocab.num_actions();
        let mut next = Vec::with_capacity(states.len() * na);
        let mut kinds = Vec::with_capacity(states.len() * na);
        for s in &states {
            for a in vocab.actions() {
                let (n, kind) = step_capped(s, a, context_len);
                next.push(index[&n]);
                kinds.push(kind);
            }
        }
        Ok(Self {
            vocab,
            context_len,
            states,
            index,
            next,
            kinds,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.vocab.num_actions()
    }

    pub fn states(&self) -> &[SeqState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &SeqState {
        &self.states[i]
    }

    pub fn index_of(&self, s: &SeqState) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn require(&self, s: &SeqState) -> Result<usize> {
        self.index_of(s)
            .ok_or_else(|| Error::UnknownState(format!("{:?}", s)))
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.states[i].is_terminal()
    }

    /// Successor index under the capped dynamics.
    pub fn successor(&self, s: usize, a: usize) -> usize {
        self.next[s * self.num_actions() + a]
    }

    pub fn transition_kind(&self, s: usize, a: usize) -> TransitionKind {
        self.kinds[s * self.num_actions() + a]
    }

    /// Stable fingerprint of the vocabulary, context length, and state order.
    pub fn enumeration_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"seqmatch-space-v1");
        h.update((self.context_len as u64).to_le_bytes());
        h.update((self.vocab.len() as u64).to_le_bytes());
        for s in self.vocab.symbols() {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        h.update((self.states.len() as u64).to_le_bytes());
        for s in &self.states {
            h.update([s.len() as u8]);
            for &t in s.tokens() {
                h.update(self.vocab.token_id(t).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Data,
    Model,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SeqState,
    pub action: EditAction,
    pub next: SeqState,
    pub kind: TransitionKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub source: Source,
}

impl Trajectory {
    pub fn new(source: Source) -> Self {
        Self {
            transitions: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn start(&self) -> Option<&SeqState> {
        self.transitions.first().map(|t| &t.state)
    }

    pub fn final_state(&self) -> Option<&SeqState> {
        self.transitions.last().map(|t| &t.next)
    }

    pub fn terminated(&self) -> bool {
        self.final_state().is_some_and(SeqState::is_terminal)
    }

    pub fn actions(&self) -> impl Iterator<Item = EditAction> + '_ {
        self.transitions.iter().map(|t| t.action)
    }

    /// Checks chaining and that plain transitions follow `step`.
    pub fn is_consistent(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].next == w[1].state)
            && self.transitions.iter().all(|t| match t.kind {
                TransitionKind::Plain => step(&t.state, t.action) == t.next,
                TransitionKind::ForcedEos => t.next == t.state.push(Token::Eos),
                TransitionKind::Noise => t.next.parent() == t.state && t.next.len() == t.state.len() + 1,
            })
    }
}
