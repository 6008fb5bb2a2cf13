//! Append-only log of graph mutation groups.
//!
//! Frame layout: `[len u32 LE][crc32 u32 LE][len bytes of JSON]`, where the
//! JSON is one [`WalGroup`]. A group holds every op of one logical mutation,
//! so replay never sees half of an insert or delete. A frame cut short at
//! the end of the file is a torn write and is dropped; a complete frame with
//! a bad checksum is corruption and refuses to load.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StorageError;
use crate::graph::{GraphOp, MemoryGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalEntry {
    pub lsn: u64,
    #[serde(flatten)]
    pub op: GraphOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalGroup {
    pub entries: Vec<WalEntry>,
}

impl WalGroup {
    pub fn last_lsn(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.lsn)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WalContents {
    pub groups: Vec<WalGroup>,
    /// Length of the valid prefix in bytes.
    pub valid_len: u64,
    /// Bytes of a torn final frame, discarded.
    pub torn_bytes: u64,
}

const HEADER: usize = 8;

pub fn encode_frame(group: &WalGroup) -> Vec<u8> {
    let body = serde_json::to_vec(group).expect("group serializes");
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses a whole log image.
pub fn decode(bytes: &[u8]) -> Result<WalContents, StorageError> {
    let mut pos = 0usize;
    let mut groups: Vec<WalGroup> = Vec::new();
    let mut last = 0u64;
    while pos < bytes.len() {
        if bytes.len() - pos < HEADER {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        if bytes.len() - pos - HEADER < len {
            break;
        }
        let body = &bytes[pos + HEADER..pos + HEADER + len];
        if crc32fast::hash(body) != crc {
            return Err(StorageError::Checksum { what: "wal frame".into(), offset: pos as u64 });
        }
        let group: WalGroup = serde_json::from_slice(body)
            .map_err(|e| StorageError::Corrupt(format!("wal frame at byte {pos}: {e}")))?;
        for e in &group.entries {
            if e.lsn <= last {
                return Err(StorageError::Corrupt(format!("wal lsn {} not increasing at byte {pos}", e.lsn)));
            }
            last = e.lsn;
        }
        groups.push(group);
        pos += HEADER + len;
    }
    Ok(WalContents { groups, valid_len: pos as u64, torn_bytes: (bytes.len() - pos) as u64 })
}

pub fn read(path: &Path) -> Result<WalContents, StorageError> {
    match std::fs::read(path) {
        Ok(bytes) => decode(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(WalContents::default()),
        Err(e) => Err(e.into()),
    }
}

/// Applies every group with an lsn above `after`. Returns the groups applied.
pub fn replay(graph: &mut MemoryGraph, groups: &[WalGroup], after: u64) -> Result<usize, StorageError> {
    let mut applied = 0;
    for g in groups.iter().filter(|g| g.last_lsn() > after) {
        for e in g.entries.iter().filter(|e| e.lsn > after) {
            graph.apply_op(e.op.clone()).map_err(|err| StorageError::Replay { lsn: e.lsn, source: err })?;
        }
        applied += 1;
    }
    Ok(applied)
}

#[derive(Debug)]
pub struct Wal {
    file: File,
    path: PathBuf,
    next_lsn: u64,
}

impl Wal {
    /// Opens (or creates) the log, truncating a torn tail.
    pub fn open(path: impl Into<PathBuf>) -> Result<(Wal, WalContents), StorageError> {
        let path = path.into();
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let contents = decode(&bytes)?;
        if contents.torn_bytes > 0 {
            file.set_len(contents.valid_len)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        let next_lsn = contents.groups.last().map_or(0, |g| g.last_lsn()) + 1;
        Ok((Wal { file, path, next_lsn }, contents))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    /// Last lsn handed out, 0 for an empty log.
    pub fn last_lsn(&self) -> u64 {
        self.next_lsn - 1
    }

    /// Raises the lsn counter, e.g. past a snapshot's lsn.
    pub fn advance_to(&mut self, next_lsn: u64) {
        self.next_lsn = self.next_lsn.max(next_lsn);
    }

    /// Writes `ops` as one durable group. Empty input writes nothing.
    pub fn append(&mut self, ops: Vec<GraphOp>) -> Result<Option<WalGroup>, StorageError> {
        if ops.is_empty() {
            return Ok(None);
        }
        let entries = ops
            .into_iter()
            .map(|op| {
                let e = WalEntry { lsn: self.next_lsn, op };
                self.next_lsn += 1;
                e
            })
            .collect();
        let group = WalGroup { entries };
        self.file.write_all(&encode_frame(&group))?;
        self.file.sync_data()?;
        Ok(Some(group))
    }

    /// Drops every frame; lsns keep counting up.
    pub fn truncate(&mut self) -> Result<(), StorageError> {
        self.file.set_len(0)?;
        self.file.seek(SeekFrom::Start(0))?;
        self.file.sync_data()?;
        Ok(())
    }
}
