//! Append-only hash-chained JSON-lines files.
//!
//! Every line is one record `{seq, prev, body, hash}` where `hash` covers
//! `prev`, `seq` and the body, and `prev` is the previous record's hash.
//! A well-formed file ends with a closing record. Lines must be in the
//! exact compact form the writer produces, so any byte change is caught.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::sha256_hex;

pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corrupt journal at record {index}: {reason}")]
pub struct CorruptJournal {
    pub index: usize,
    pub reason: String,
}

impl CorruptJournal {
    fn at(index: usize, reason: impl Into<String>) -> Self {
        CorruptJournal {
            index,
            reason: reason.into(),
        }
    }
}

/// Bodies that can terminate a chain.
pub trait Closing {
    fn is_close(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record<B> {
    pub seq: u64,
    pub prev: String,
    pub body: B,
    pub hash: String,
}

fn record_hash<B: Serialize>(seq: u64, prev: &str, body: &B) -> String {
    let body = serde_json::to_string(body).expect("journal bodies serialize");
    sha256_hex(format!("{prev}\n{seq}\n{body}").as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain<B> {
    records: Vec<Record<B>>,
}

impl<B> Default for Chain<B> {
    fn default() -> Self {
        Chain { records: Vec::new() }
    }
}

impl<B: Serialize + Clone> Chain<B> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, body: B) -> &Record<B> {
        let seq = self.records.len() as u64;
        let prev = self
            .records
            .last()
            .map(|r| r.hash.clone())
            .unwrap_or_else(|| GENESIS.to_string());
        let hash = record_hash(seq, &prev, &body);
        self.records.push(Record { seq, prev, body, hash });
        self.records.last().expect("just pushed")
    }

    pub fn records(&self) -> &[Record<B>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head(&self) -> &str {
        self.records.last().map(|r| r.hash.as_str()).unwrap_or(GENESIS)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("journal records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Parses and verifies a chain, returning the bodies in order.
pub fn read_chain<B>(text: &str) -> Result<Vec<B>, CorruptJournal>
where
    B: Serialize + DeserializeOwned + Closing,
{
    let mut bodies: Vec<B> = Vec::new();
    let mut prev = GENESIS.to_string();
    let mut rest = text;
    let mut index = 0;
    while !rest.is_empty() {
        let Some(end) = rest.find('\n') else {
            return Err(CorruptJournal::at(index, "unterminated record"));
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        if bodies.last().is_some_and(Closing::is_close) {
            return Err(CorruptJournal::at(index, "record after close"));
        }
        let record: Record<B> = serde_json::from_str(line)
            .map_err(|e| CorruptJournal::at(index, format!("unparseable record: {e}")))?;
        if serde_json::to_string(&record).ok().as_deref() != Some(line) {
            return Err(CorruptJournal::at(index, "non-canonical encoding"));
        }
        if record.seq != index as u64 {
            return Err(CorruptJournal::at(index, "sequence gap"));
        }
        if record.prev != prev {
            return Err(CorruptJournal::at(index, "broken chain link"));
        }
        if record_hash(record.seq, &record.prev, &record.body) != record.hash {
            return Err(CorruptJournal::at(index, "hash mismatch"));
        }
        prev = record.hash;
        bodies.push(record.body);
        index += 1;
    }
    if !bodies.last().is_some_and(Closing::is_close) {
        return Err(CorruptJournal::at(index, "missing close record"));
    }
    Ok(bodies)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    enum Op {
        Put(String, f64),
        Close,
    }

    impl Closing for Op {
        fn is_close(&self) -> bool {
            matches!(self, Op::Close)
        }
    }

    fn sample() -> String {
        let mut c = Chain::new();
        c.append(Op::Put("a".into(), 0.1));
        c.append(Op::Put("b".into(), 1e-7));
        c.append(Op::Close);
        c.to_jsonl()
    }

    #[test]
    fn round_trip() {
        let bodies: Vec<Op> = read_chain(&sample()).unwrap();
        assert_eq!(bodies.len(), 3);
        assert_eq!(bodies[1], Op::Put("b".into(), 1e-7));
    }

    #[test]
    fn every_single_bit_flip_is_located() {
        let text = sample();
        let starts: Vec<usize> = std::iter::once(0)
            .chain(text.match_indices('\n').map(|(i, _)| i + 1))
            .collect();
        for pos in 0..text.len() {
            let line = starts.iter().rposition(|&s| s <= pos).unwrap();
            for bit in 0..8 {
                let mut bytes = text.clone().into_bytes();
                bytes[pos] ^= 1 << bit;
                let Ok(s) = String::from_utf8(bytes) else { continue };
                let err = read_chain::<Op>(&s).unwrap_err();
                assert_eq!(err.index, line, "pos {pos} bit {bit}: {}", err.reason);
            }
        }
    }

    #[test]
    fn truncation_reports_end() {
        let text = sample();
        let lines: Vec<&str> = text.lines().collect();
        let cut = format!("{}\n{}\n", lines[0], lines[1]);
        assert_eq!(read_chain::<Op>(&cut).unwrap_err().index, 2);
        let partial = &text[..text.len() - 5];
        assert_eq!(read_chain::<Op>(partial).unwrap_err().index, 2);
        assert_eq!(read_chain::<Op>("").unwrap_err().index, 0);
    }

    #[test]
    fn records_after_close_rejected() {
        let mut text = sample();
        let first = text.lines().next().unwrap().to_string();
        text.push_str(&first);
        text.push('\n');
        assert_eq!(read_chain::<Op>(&text).unwrap_err().index, 3);
    }
}
