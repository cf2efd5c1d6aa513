//! Single-pass encoding of edit sequences (with backspace) into inputs,
//! labels, attention masks, and position ids.
//!
//! Row 0 is `<bos>`. Row `t` represents the state after the first `t`
//! actions: the visible rows of `mask[t]`, ordered by position id, spell that
//! state. An insert adds a row for the new token. A backspace never appears
//! in the inputs; instead the row it produces is a copy of the token that
//! becomes final again (same token, same position), and both the deleted row
//! and the original of the copied row are masked out from then on.
//!
//! ```text
//! actions: a  b  <bs>  c
//! inputs : <bos> a  b  a  c
//! pos    : 0     1  2  1  2
//! mask   : 1 . . . .      [bos]
//!          1 1 . . .      [bos a]
//!          1 1 1 . .      [bos a b]
//!          1 . . 1 .      [bos a]
//!          1 . . 1 1      [bos a c]
//! ```
//!
//! `labels[t]` is the id of the action taken from the state at row `t`; the
//! final row carries [`PAD_LABEL`].

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq_mdp::{apply_actions, step, step_capped, EditAction, SeqState, Source, Token, Trajectory, Transition, TransitionKind, Vocab};

/// Label of rows that carry no loss.
pub const PAD_LABEL: i64 = -100;

pub const BATCH_FORMAT: &str = "seqmatch-batch";
pub const BATCH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessedBatch {
    pub inputs: Vec<u32>,
    pub labels: Vec<i64>,
    pub pos_ids: Vec<u32>,
    /// Row-major `len × len` visibility matrix.
    pub mask: Vec<bool>,
    /// The recorded action sequence (ids), kept for inspection.
    pub actions: Vec<u32>,
}

impl PreprocessedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn visible(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.len() + col]
    }

    /// `(token id, position)` pairs visible from `row`, ordered by position.
    pub fn row_view(&self, row: usize) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = (0..self.len())
            .filter(|&j| self.visible(row, j))
            .map(|j| (self.inputs[j], self.pos_ids[j]))
            .collect();
        out.sort_by_key(|&(_, p)| p);
        out
    }

    /// The state spelled by the visible tokens of `row`.
    pub fn reconstruct(&self, vocab: &Vocab, row: usize) -> Result<SeqState> {
        let view = self.row_view(row);
        let mut tokens = Vec::with_capacity(view.len());
        for (i, &(id, pos)) in view.iter().enumerate() {
            if pos as usize != i {
                return Err(Error::Corrupt(format!("row {row}: position ids are not consecutive")));
            }
            tokens.push(vocab.token_from_id(id).ok_or_else(|| Error::Corrupt(format!("token id {id}")))?);
        }
        if tokens.first() != Some(&Token::Bos) {
            return Err(Error::Corrupt(format!("row {row} does not start with <bos>")));
        }
        SeqState::from_payload(&tokens[1..])
    }

    /// Text rendering: one line per row with token, position, label, and mask.
    pub fn render(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let tok = vocab
                .token_from_id(self.inputs[i])
                .map(|t| vocab.token_str(t).to_string())
                .unwrap_or_else(|| "?".into());
            let label = if self.labels[i] == PAD_LABEL {
                "-".to_string()
            } else {
                vocab
                    .action_from_id(self.labels[i] as u32)
                    .map(|a| vocab.action_str(a).to_string())
                    .unwrap_or_else(|| "?".into())
            };
            let row: String = (0..self.len())
                .map(|j| if self.visible(i, j) { '1' } else { '.' })
                .collect();
            out.push_str(&format!("{i:>3} {tok:>6} pos={:<3} label={label:<6} {row}\n", self.pos_ids[i]));
        }
        out
    }
}

/// Ground-truth state after each action, by stack simulation from `[bos]`.
pub fn state_views(actions: &[EditAction]) -> Vec<SeqState> {
    apply_actions(&SeqState::root(), actions)
}

/// What a step did to the state, independent of which action was recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    Push(Token),
    Pop,
    Stay,
}

fn edit_between(s: &SeqState, next: &SeqState) -> Result<Edit> {
    if next == s {
        Ok(Edit::Stay)
    } else if next.len() == s.len() + 1 && &next.parent() == s {
        Ok(Edit::Push(next.last()))
    } else if !s.is_root() && &s.parent() == next {
        Ok(Edit::Pop)
    } else {
        Err(Error::Mismatch(format!("{s:?} -> {next:?} is not a single edit")))
    }
}

fn encode_edits(vocab: &Vocab, edits: &[Edit], labels: &[EditAction], context_len: usize) -> Result<PreprocessedBatch> {
    let n = edits.len() + 1;
    let mut inputs = Vec::with_capacity(n);
    let mut pos_ids = Vec::with_capacity(n);
    let mut mask = vec![false; n * n];
    // rows visible from the current row, in position order
    let mut stack: Vec<usize> = vec![0];
    inputs.push(vocab.bos_id());
    pos_ids.push(0);
    mask[0] = true;

    for (t, &e) in edits.iter().enumerate() {
        let row = t + 1;
        match e {
            Edit::Push(tok) => {
                inputs.push(vocab.token_id(tok));
                pos_ids.push(stack.len() as u32);
                stack.push(row);
            }
            Edit::Pop => {
                if stack.len() < 2 {
                    return Err(Error::Mismatch("backspace below <bos>".into()));
                }
                // deletion pointer: last visible row; copy pointer: the one before
                stack.pop();
                let copy = stack.pop().expect("bos stays visible");
                inputs.push(inputs[copy]);
                pos_ids.push(pos_ids[copy]);
                stack.push(row);
            }
            Edit::Stay => {
                let copy = stack.pop().expect("stack never empty");
                inputs.push(inputs[copy]);
                pos_ids.push(pos_ids[copy]);
                stack.push(row);
            }
        }
        if stack.len() > context_len {
            return Err(Error::ContextOverflow {
                len: stack.len(),
                context_len,
            });
        }
        for &j in &stack {
            mask[row * n + j] = true;
        }
    }

    let mut lab: Vec<i64> = labels.iter().map(|&a| vocab.action_id(a) as i64).collect();
    lab.push(PAD_LABEL);
    Ok(PreprocessedBatch {
        inputs,
        labels: lab,
        pos_ids,
        mask,
        actions: labels.iter().map(|&a| vocab.action_id(a)).collect(),
    })
}

/// Encodes an action sequence taken from `[bos]` under plain dynamics.
///
/// Fails with [`Error::ContextOverflow`] when some intermediate state holds
/// more than `context_len` tokens (counting `<bos>`).
pub fn encode_actions(vocab: &Vocab, actions: &[EditAction], context_len: usize) -> Result<PreprocessedBatch> {
    let mut edits = Vec::with_capacity(actions.len());
    let mut s = SeqState::root();
    for &a in actions {
        if let EditAction::Insert(i) = a {
            if i as usize >= vocab.len() {
                return Err(Error::InvalidArgument(format!("symbol {i} outside vocabulary")));
            }
        }
        let next = step(&s, a);
        edits.push(edit_between(&s, &next)?);
        s = next;
    }
    encode_edits(vocab, &edits, actions, context_len)
}

/// Encodes a trajectory that may contain noise or forced-eos transitions:
/// rows follow the realized states, labels follow the recorded actions.
pub fn encode_trajectory(vocab: &Vocab, traj: &Trajectory, context_len: usize) -> Result<PreprocessedBatch> {
    if let Some(s0) = traj.start() {
        if !s0.is_root() {
            return Err(Error::InvalidArgument("trajectory does not start at [bos]".into()));
        }
    }
    let mut edits = Vec::with_capacity(traj.len());
    for (i, tr) in traj.transitions.iter().enumerate() {
        if i > 0 && traj.transitions[i - 1].next != tr.state {
            return Err(Error::Mismatch(format!("transition {i} does not chain")));
        }
        edits.push(edit_between(&tr.state, &tr.next)?);
    }
    let labels: Vec<EditAction> = traj.actions().collect();
    encode_edits(vocab, &edits, &labels, context_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub eta: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(eta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(Self { eta, seed })
    }
}

/// Plain trajectory of a token sequence under the context cap.
///
/// An insert that would fill the context without `<eos>` keeps its action
/// but lands in `s + <eos>` (a forced-eos transition), ending the trajectory.
pub fn truncate_to_context(seq: &[Token], context_len: usize) -> Result<Trajectory> {
    if context_len < 2 {
        return Err(Error::ContextTooShort(context_len));
    }
    let mut traj = Trajectory::new(Source::Data);
    let mut s = SeqState::root();
    for &t in seq {
        let a = EditAction::from_token(t).ok_or_else(|| Error::InvalidArgument("<bos> inside a sequence".into()))?;
        let (next, kind) = step_capped(&s, a, context_len);
        traj.transitions.push(Transition {
            state: s,
            action: a,
            next: next.clone(),
            kind,
        });
        s = next;
        if s.is_terminal() {
            break;
        }
    }
    Ok(traj)
}

fn random_symbol<R: Rng + ?Sized>(vocab: &Vocab, rng: &mut R) -> Token {
    Token::Sym(rng.gen_range(0..vocab.len() as u32))
}

fn corrupt_before(out: &mut Vec<Transition>, tr: &Transition, noise: Token) {
    let wrong = tr.state.push(noise);
    out.push(Transition {
        state: tr.state.clone(),
        action: tr.action,
        next: wrong.clone(),
        kind: TransitionKind::Noise,
    });
    out.push(Transition {
        state: wrong,
        action: EditAction::Backspace,
        next: tr.state.clone(),
        kind: TransitionKind::Plain,
    });
}

fn can_corrupt(tr: &Transition, vocab: &Vocab, context_len: usize) -> bool {
    !vocab.is_empty() && !tr.state.is_terminal() && tr.state.len() + 2 <= context_len
}

/// Noise augmentation of a data trajectory: before each step, with
/// probability `eta`, the environment appends a uniformly random symbol in
/// place of the recorded action, which is followed by a backspace and then
/// the original step. Positions whose corrupted state would not fit the
/// context are left alone.
pub fn augment_trajectory<R: Rng + ?Sized>(
    vocab: &Vocab,
    traj: &Trajectory,
    eta: f64,
    rng: &mut R,
    context_len: usize,
) -> Trajectory {
    let mut out = Vec::with_capacity(traj.len() * 2);
    for tr in &traj.transitions {
        if eta > 0.0 && can_corrupt(tr, vocab, context_len) && rng.gen_bool(eta) {
            let noise = random_symbol(vocab, rng);
            corrupt_before(&mut out, tr, noise);
        }
        out.push(tr.clone());
    }
    Trajectory {
        transitions: out,
        source: traj.source,
    }
}

/// [`truncate_to_context`] followed by [`augment_trajectory`] seeded from `cfg`.
pub fn augment_noise(vocab: &Vocab, seq: &[Token], cfg: &NoiseConfig, context_len: usize) -> Result<Trajectory> {
    let base = truncate_to_context(seq, context_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(augment_trajectory(vocab, &base, cfg.eta, &mut rng, context_len))
}

/// Test hook: corrupt exactly the steps at `positions` (indices into `seq`).
pub fn augment_noise_at<R: Rng + ?Sized>(
    vocab: &Vocab,
    seq: &[Token],
    positions: &[usize],
    rng: &mut R,
    context_len: usize,
) -> Result<Trajectory> {
    let base = truncate_to_context(seq, context_len)?;
    let mut out = Vec::new();
    for (i, tr) in base.transitions.iter().enumerate() {
        if positions.contains(&i) && can_corrupt(tr, vocab, context_len) {
            let noise = random_symbol(vocab, rng);
            corrupt_before(&mut out, tr, noise);
        }
        out.push(tr.clone());
    }
    Ok(Trajectory {
        transitions: out,
        source: Source::Data,
    })
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    format: String,
    version: u32,
    vocab: Vec<String>,
    context_len: usize,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct BatchRecord {
    inputs: Vec<u32>,
    labels: Vec<i64>,
    pos_ids: Vec<u32>,
    /// Row-major mask bits, most significant bit first, hex encoded.
    mask: String,
    actions: Vec<u32>,
}

fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
    }
    hex::encode(bytes)
}

fn unpack_bits(hex_str: &str, n: usize) -> Option<Vec<bool>> {
    let bytes = hex::decode(hex_str).ok()?;
    if bytes.len() != n.div_ceil(8) {
        return None;
    }
    Some((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

/// Writes batches as line-delimited JSON: a header line, then one record per
/// sequence.
pub fn write_batches<W: Write>(mut w: W, vocab: &Vocab, context_len: usize, batches: &[PreprocessedBatch]) -> Result<()> {
    let header = BatchHeader {
        format: BATCH_FORMAT.into(),
        version: BATCH_VERSION,
        vocab: vocab.symbols().to_vec(),
        context_len,
        records: batches.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for b in batches {
        let rec = BatchRecord {
            inputs: b.inputs.clone(),
            labels: b.labels.clone(),
            pos_ids: b.pos_ids.clone(),
            mask: pack_bits(&b.mask),
            actions: b.actions.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_batches<R: BufRead>(r: R) -> Result<(Vocab, usize, Vec<PreprocessedBatch>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Corrupt("empty batch file".into()))??;
    let header: BatchHeader = serde_json::from_str(&first).map_err(|e| Error::Malformed {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != BATCH_FORMAT {
        return Err(Error::Corrupt(format!("unknown format {:?}", header.format)));
    }
    if header.version != BATCH_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: BATCH_VERSION,
        });
    }
    let vocab = Vocab::new(header.vocab)?;
    let mut out = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Malformed { line: i + 2, msg };
        let rec: BatchRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let n = rec.inputs.len();
        if rec.labels.len() != n || rec.pos_ids.len() != n {
            return Err(bad("field lengths differ".into()));
        }
        let mask = unpack_bits(&rec.mask, n * n).ok_or_else(|| bad("bad mask encoding".into()))?;
        out.push(PreprocessedBatch {
            inputs: rec.inputs,
            labels: rec.labels,
            pos_ids: rec.pos_ids,
            mask,
            actions: rec.actions,
        });
    }
    if out.len() != header.records {
        return Err(Error::Corrupt(format!("header promises {} records, found {}", header.records, out.len())));
    }
    Ok((vocab, header.context_len, out))
}
