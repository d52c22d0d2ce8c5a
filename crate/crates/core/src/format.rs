//! Versioned binary container for optimizer states and influence vectors.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! magic        8 bytes   "MGBLOCK\0"
//! version      u32       1
//! kind         u32       0 = optimizer state, 1 = influence vector
//! step         u64       step index (states) or run length T (influence)
//! block_count  u32
//! per block    u32 tag, u64 length
//! payload      the blocks' f64 values, in header order
//! ```
//!
//! Doubles are stored by bit pattern, so save/load is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptimizerState;

pub const MAGIC: &[u8; 8] = b"MGBLOCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum FileKind {
    State = 0,
    Influence = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum BlockTag {
    Params = 0,
    Moment0 = 1,
    Moment1 = 2,
    Influence = 16,
    CenterOutput = 17,
}

impl BlockTag {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => BlockTag::Params,
            1 => BlockTag::Moment0,
            2 => BlockTag::Moment1,
            16 => BlockTag::Influence,
            17 => BlockTag::CenterOutput,
            _ => return None,
        })
    }

    fn moment(k: usize) -> Self {
        match k {
            0 => BlockTag::Moment0,
            1 => BlockTag::Moment1,
            _ => panic!("at most two moment blocks"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFile {
    pub kind: FileKind,
    pub step: u64,
    pub blocks: Vec<(BlockTag, Vec<f64>)>,
}

impl BlockFile {
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.blocks.iter().map(|(_, b)| b.len() * 8).sum();
        let mut out = Vec::with_capacity(28 + 12 * self.blocks.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (tag, b) in &self.blocks {
            out.extend_from_slice(&(*tag as u32).to_le_bytes());
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        }
        for (_, b) in &self.blocks {
            for v in b {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = match read_u32(&mut r).ok_or_else(|| bad("truncated header"))? {
            0 => FileKind::State,
            1 => FileKind::Influence,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let step = read_u64(&mut r).ok_or_else(|| bad("truncated header"))?;
        let count = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = read_u32(&mut r).ok_or_else(|| bad("truncated block table"))?;
            let tag = BlockTag::from_u32(tag).ok_or_else(|| bad(&format!("unknown block tag {tag}")))?;
            let len = read_u64(&mut r).ok_or_else(|| bad("truncated block table"))? as usize;
            layout.push((tag, len));
        }
        let expected: usize = layout.iter().map(|(_, n)| n * 8).sum();
        if r.len() != expected {
            return Err(bad(&format!(
                "payload is {} bytes, header declares {expected}",
                r.len()
            )));
        }
        let mut blocks = Vec::with_capacity(count);
        for (tag, len) in layout {
            let mut b = Vec::with_capacity(len);
            for _ in 0..len {
                b.push(f64::from_bits(read_u64(&mut r).expect("length checked")));
            }
            blocks.push((tag, b));
        }
        Ok(BlockFile { kind, step, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        BlockFile::decode(&bytes, path)
    }

    pub fn from_state(s: &OptimizerState) -> Self {
        let mut blocks = vec![(BlockTag::Params, s.params.clone())];
        for (k, m) in s.moments.iter().enumerate() {
            blocks.push((BlockTag::moment(k), m.clone()));
        }
        BlockFile {
            kind: FileKind::State,
            step: s.step as u64,
            blocks,
        }
    }

    pub fn into_state(self, path: &Path) -> Result<OptimizerState> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if self.kind != FileKind::State {
            return Err(bad("not an optimizer-state file"));
        }
        let mut blocks = self.blocks.into_iter();
        let params = match blocks.next() {
            Some((BlockTag::Params, p)) => p,
            _ => return Err(bad("first block must be params")),
        };
        let mut moments = Vec::new();
        for (k, (tag, b)) in blocks.enumerate() {
            if k > 1 || tag != BlockTag::moment(k) || b.len() != params.len() {
                return Err(bad("inconsistent moment blocks"));
            }
            moments.push(b);
        }
        Ok(OptimizerState {
            params,
            moments,
            step: self.step as usize,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

pub fn save_state(s: &OptimizerState, path: &Path) -> Result<()> {
    BlockFile::from_state(s).write(path)
}

pub fn load_state(path: &Path) -> Result<OptimizerState> {
    BlockFile::read(path)?.into_state(path)
}
