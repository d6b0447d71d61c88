//! `SRLF1` preprocessed dataset cache.
//!
//! Little-endian layout:
//!
//! ```text
//! "SRLF1"
//! u32 digest length, digest bytes (UTF-8)
//! u32 item_count, u64 raw id per dense item 1..=item_count
//! per split (train, validation, test):
//!   u32 session count; per session: u32 len, u32 items[len], u8 behaviors[len]
//!   u32 transition count n, then columns:
//!     u32 state[n * 10], u32 action[n], f64 reward[n],
//!     u32 next_state[n * 10], u8 terminal[n], u32 session[n]
//! ```

use std::path::Path;

use super::events::Behavior;
use super::split::{DatasetSplit, Session};
use super::transitions::{build_transitions, Transition, WINDOW};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 5] = b"SRLF1";

/// A split dataset together with the digest of the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCache {
    pub digest: String,
    pub split: DatasetSplit,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_split(buf: &mut Vec<u8>, sessions: &[Session]) {
    put_u32(buf, sessions.len() as u32);
    for s in sessions {
        put_u32(buf, s.len() as u32);
        for &i in &s.items {
            put_u32(buf, i);
        }
        buf.extend(s.behaviors.iter().map(|b| b.to_byte()));
    }
    let tr = build_transitions(sessions);
    put_u32(buf, tr.len() as u32);
    for t in &tr {
        for &i in &t.state {
            put_u32(buf, i);
        }
    }
    for t in &tr {
        put_u32(buf, t.action);
    }
    for t in &tr {
        buf.extend_from_slice(&t.reward.to_le_bytes());
    }
    for t in &tr {
        for &i in &t.next_state {
            put_u32(buf, i);
        }
    }
    buf.extend(tr.iter().map(|t| t.terminal as u8));
    for t in &tr {
        put_u32(buf, t.session);
    }
}

impl DatasetCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        put_u32(&mut buf, self.digest.len() as u32);
        buf.extend_from_slice(self.digest.as_bytes());
        put_u32(&mut buf, self.split.item_count);
        for &raw in &self.split.remap {
            buf.extend_from_slice(&raw.to_le_bytes());
        }
        for sessions in [&self.split.train, &self.split.validation, &self.split.test] {
            encode_split(&mut buf, sessions);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != CACHE_MAGIC {
            return Err(r.err("missing SRLF1 magic"));
        }
        let dlen = r.u32()? as usize;
        let digest = String::from_utf8(r.take(dlen)?.to_vec()).map_err(|_| r.err("digest is not UTF-8"))?;
        let item_count = r.u32()?;
        let remap = (0..item_count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            splits.push(r.split(item_count)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let test = splits.pop().expect("three splits");
        let validation = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(DatasetCache {
            digest,
            split: DatasetSplit {
                train,
                validation,
                test,
                item_count,
                remap,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            kind: "cache",
            msg: format!("{msg} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn window(&mut self) -> Result<[u32; WINDOW]> {
        let mut w = [0u32; WINDOW];
        for slot in &mut w {
            *slot = self.u32()?;
        }
        Ok(w)
    }

    fn split(&mut self, item_count: u32) -> Result<Vec<Session>> {
        let n = self.u32()? as usize;
        let mut sessions = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let items = (0..len).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            if items.iter().any(|&i| i == 0 || i > item_count) {
                return Err(self.err("item id outside [1, item_count]"));
            }
            let behaviors = self
                .take(len)?
                .iter()
                .map(|&b| Behavior::from_byte(b).ok_or_else(|| self.err("bad behavior byte")))
                .collect::<Result<Vec<_>>>()?;
            sessions.push(Session { items, behaviors });
        }
        let m = self.u32()? as usize;
        let states = (0..m).map(|_| self.window()).collect::<Result<Vec<_>>>()?;
        let actions = (0..m).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let rewards = (0..m).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let next = (0..m).map(|_| self.window()).collect::<Result<Vec<_>>>()?;
        let terminal = self.take(m)?.to_vec();
        let owner = (0..m).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let stored: Vec<Transition> = (0..m)
            .map(|i| Transition {
                state: states[i],
                action: actions[i],
                reward: rewards[i],
                next_state: next[i],
                terminal: terminal[i] != 0,
                session: owner[i],
            })
            .collect();
        if stored != build_transitions(&sessions) {
            return Err(self.err("transition arrays disagree with sessions"));
        }
        Ok(sessions)
    }
}
