//! Dataset files and policy checkpoints.
//!
//! Text-lines datasets hold one record per line; the vocabulary is the
//! sorted set of characters in the file and blank lines are skipped.
//! Token-id datasets hold whitespace-separated ids per line, optionally
//! preceded by a header
//!
//! ```text
//! #! seqmatch-tokens v1 symbols=K
//! ```
//!
//! Symbol ids run from 1 to K and `K+1` (`<eos>`) may close a record. Without
//! a header K is the largest id in the file and every id is a symbol. Records
//! without a closing `<eos>` get one appended.
//!
//! A checkpoint is the magic `SQMC`, a little-endian u32 version, a u64
//! length and that many bytes of JSON metadata, a u64 count and that many
//! little-endian f64 logits, and a trailing SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::preprocess::truncate_to_context;
use crate::seq_mdp::{SeqSpace, Token, Trajectory, Vocab, DEFAULT_STATE_BUDGET};

pub const TOKENS_HEADER: &str = "#! seqmatch-tokens";
pub const TOKENS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    TextLines,
    TokenIds,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text-lines" => Ok(Self::TextLines),
            "tokens" | "token-ids" => Ok(Self::TokenIds),
            _ => Err(Error::InvalidArgument(format!("unknown dataset format {s:?}"))),
        }
    }
}

/// Records as payloads ending in `<eos>`, before any context cut.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub format: DatasetFormat,
    pub vocab: Vocab,
    pub records: Vec<Vec<Token>>,
}

impl DatasetFile {
    /// Equal-weight view used by the occupancy and evaluation code.
    pub fn weighted(&self) -> Vec<(Vec<Token>, f64)> {
        self.records.iter().map(|r| (r.clone(), 1.0)).collect()
    }

    pub fn trajectories(&self, context_len: usize) -> Result<Vec<Trajectory>> {
        self.records.iter().map(|r| truncate_to_context(r, context_len)).collect()
    }
}

pub fn parse_text_lines(text: &str) -> Result<DatasetFile> {
    let lines: Vec<&str> = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = Vocab::from_chars(lines.iter().flat_map(|l| l.chars()))?;
    let records = lines
        .iter()
        .map(|l| {
            let mut r: Vec<Token> = l
                .chars()
                .map(|c| Token::Sym(vocab.symbol_index(&c.to_string()).expect("char in vocabulary")))
                .collect();
            r.push(Token::Eos);
            r
        })
        .collect();
    Ok(DatasetFile {
        format: DatasetFormat::TextLines,
        vocab,
        records,
    })
}

fn parse_header(line: &str, lineno: usize) -> Result<usize> {
    let rest = line[TOKENS_HEADER.len()..].trim();
    let mut parts = rest.split_whitespace();
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Malformed {
            line: lineno,
            msg: "header needs a version like v1".into(),
        })?;
    if version != TOKENS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: TOKENS_VERSION,
        });
    }
    let k = parts
        .next()
        .and_then(|p| p.strip_prefix("symbols="))
        .and_then(|k| k.parse::<usize>().ok())
        .ok_or_else(|| Error::Malformed {
            line: lineno,
            msg: "header needs symbols=K".into(),
        })?;
    if k == 0 {
        return Err(Error::Malformed {
            line: lineno,
            msg: "symbols must be positive".into(),
        });
    }
    if k > u32::MAX as usize - 3 {
        return Err(Error::VocabOverflow(format!("{k} symbols")));
    }
    Ok(k)
}

pub fn parse_token_ids(text: &str) -> Result<DatasetFile> {
    let mut declared = None;
    let mut rows: Vec<(usize, Vec<u64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with(TOKENS_HEADER) {
            if declared.is_some() || !rows.is_empty() {
                return Err(Error::Malformed {
                    line: lineno,
                    msg: "header must be the first record".into(),
                });
            }
            declared = Some(parse_header(line, lineno)?);
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|w| {
                w.parse::<u64>().map_err(|_| Error::Malformed {
                    line: lineno,
                    msg: format!("not a token id: {w:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((lineno, ids));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = match declared {
        Some(k) => k,
        None => {
            let max = rows.iter().flat_map(|(_, r)| r.iter().copied()).max().unwrap_or(0);
            if max > u32::MAX as u64 - 3 {
                return Err(Error::VocabOverflow(format!("id {max}")));
            }
            max.max(1) as usize
        }
    };
    let eos = k as u64 + 1;
    let mut records = Vec::with_capacity(rows.len());
    for (lineno, ids) in rows {
        let mut rec = Vec::with_capacity(ids.len() + 1);
        for (j, &id) in ids.iter().enumerate() {
            if id == 0 || id == eos + 1 {
                return Err(Error::Malformed {
                    line: lineno,
                    msg: format!("reserved id {id} in a record"),
                });
            }
            if id == eos {
                if j + 1 != ids.len() {
                    return Err(Error::Malformed {
                        line: lineno,
                        msg: "end-of-sequence before the end of the record".into(),
                    });
                }
                continue;
            }
            if id > eos {
                return Err(Error::VocabOverflow(format!("id {id} at line {lineno} exceeds {k} symbols")));
            }
            rec.push(Token::Sym(id as u32 - 1));
        }
        rec.push(Token::Eos);
        records.push(rec);
    }
    Ok(DatasetFile {
        format: DatasetFormat::TokenIds,
        vocab: Vocab::new((1..=k).map(|i| i.to_string()))?,
        records,
    })
}

/// Reads a dataset and its un-augmented, context-capped trajectories.
pub fn load_dataset(path: &Path, format: DatasetFormat, context_len: usize) -> Result<(DatasetFile, Vec<Trajectory>)> {
    let text = fs::read_to_string(path)?;
    let ds = match format {
        DatasetFormat::TextLines => parse_text_lines(&text)?,
        DatasetFormat::TokenIds => parse_token_ids(&text)?,
    };
    let trajs = ds.trajectories(context_len)?;
    Ok((ds, trajs))
}

/// Writes a dataset in its own format; loading the result gives it back.
/// Loads `source`, which is a file path or `builtin:toy`.
pub fn resolve_dataset(source: &str, format: DatasetFormat, context_len: usize) -> Result<DatasetFile> {
    if source == "builtin:toy" {
        return Ok(DatasetFile {
            format: DatasetFormat::TextLines,
            vocab: crate::toy::vocab(),
            records: crate::toy::sequences(),
        });
    }
    Ok(load_dataset(Path::new(source), format, context_len)?.0)
}

pub fn save_dataset(path: &Path, ds: &DatasetFile) -> Result<()> {
    let mut out = String::new();
    match ds.format {
        DatasetFormat::TextLines => {
            for r in &ds.records {
                for t in r.iter().filter(|t| matches!(t, Token::Sym(_))) {
                    out.push_str(ds.vocab.token_str(*t));
                }
                out.push('\n');
            }
        }
        DatasetFormat::TokenIds => {
            out.push_str(&format!("{TOKENS_HEADER} v{TOKENS_VERSION} symbols={}\n", ds.vocab.len()));
            for r in &ds.records {
                let ids: Vec<String> = r.iter().map(|&t| ds.vocab.token_id(t).to_string()).collect();
                out.push_str(&ids.join(" "));
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab: Vec<String>,
    pub context_len: usize,
    pub enumeration_hash: String,
    pub num_states: usize,
    pub num_actions: usize,
    /// Free-form run information, typically the training configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn save_checkpoint(policy: &TabularPolicy, config: &serde_json::Value, path: &Path) -> Result<()> {
    let space = policy.space();
    let meta = CheckpointMeta {
        vocab: space.vocab().symbols().to_vec(),
        context_len: space.context_len(),
        enumeration_hash: space.enumeration_hash(),
        num_states: space.num_states(),
        num_actions: space.num_actions(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(48 + json.len() + 8 * policy.params().len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(policy.params().len() as u64).to_le_bytes());
    for &x in policy.params() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Corrupt("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a checkpoint without rebuilding its state space.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<f64>)> {
    let buf = fs::read(path)?;
    if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    if buf.len() < 8 + 32 {
        return Err(Error::Corrupt("truncated checkpoint".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let json_len = c.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(json_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    let n = c.u64()? as usize;
    if n != meta.num_states * meta.num_actions {
        return Err(Error::Corrupt(format!("{n} logits for {} states", meta.num_states)));
    }
    let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("logit count overflow".into()))?)?;
    if c.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    let logits = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok((meta, logits))
}

/// Loads a checkpoint onto a freshly enumerated space and checks that the
/// enumeration still produces the recorded hash.
pub fn load_checkpoint(path: &Path) -> Result<TabularPolicy> {
    let (meta, logits) = read_checkpoint(path)?;
    let space = SeqSpace::new(Vocab::new(meta.vocab.clone())?, meta.context_len, DEFAULT_STATE_BUDGET)?;
    check_hash(&meta, &space)?;
    TabularPolicy::from_logits(Arc::new(space), logits)
}

/// Loads a checkpoint for a specific vocabulary and context length.
pub fn load_checkpoint_for(path: &Path, space: Arc<SeqSpace>) -> Result<TabularPolicy> {
    let (meta, logits) = read_checkpoint(path)?;
    check_hash(&meta, &space)?;
    TabularPolicy::from_logits(space, logits)
}

fn check_hash(meta: &CheckpointMeta, space: &SeqSpace) -> Result<()> {
    let found = space.enumeration_hash();
    if found != meta.enumeration_hash {
        return Err(Error::HashMismatch {
            expected: meta.enumeration_hash.clone(),
            found,
        });
    }
    Ok(())
}
