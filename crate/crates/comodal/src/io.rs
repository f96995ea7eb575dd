//! Experiment artifacts: binary parameter checkpoints ("CMKT" format) and
//! JSON-lines metrics emission. Both are bit-exact: the checkpoint stores raw
//! float64 little-endian payloads, and metrics floats are written with 17
//! significant digits so they round-trip to the same f64.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ParamStore;
use crate::objectives::LossTerm;
use crate::trainer::MetricsRecord;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMKT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// A malformed checkpoint, with the byte offset where reading failed.
    #[error("format: {msg} at byte {offset}")]
    Format { offset: usize, msg: String },
    /// A well-formed checkpoint that does not fit the receiving model.
    #[error("mismatch: {0}")]
    Mismatch(String),
}

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialize entries in order:
/// magic "CMKT", version (u32), entry count (u32), then per entry
/// name length (u16) + UTF-8 name, rank (u8), dims (u32 each), and the
/// float64 little-endian row-major payload.
pub fn entries_bytes(entries: &[CheckpointEntry]) -> Vec<u8> {
    let scalars: usize = entries.iter().map(|e| e.data.len()).sum();
    let mut out = Vec::with_capacity(16 + 8 * scalars);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).expect("entry count fits u32").to_le_bytes());
    for entry in entries {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).expect("name fits u16").to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(entry.dims.len()).expect("rank fits u8"));
        for &d in &entry.dims {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        for v in &entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Every parameter of a store as checkpoint entries, in registry order.
pub fn store_entries(store: &ParamStore) -> Vec<CheckpointEntry> {
    store
        .iter()
        .map(|(_, e)| CheckpointEntry {
            name: e.name.clone(),
            dims: e.shape.clone(),
            data: e.data.as_ref().clone(),
        })
        .collect()
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    entries_bytes(&store_entries(store))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), IoError> {
    std::fs::write(path, checkpoint_bytes(store))?;
    Ok(())
}

pub fn save_entries(path: &Path, entries: &[CheckpointEntry]) -> Result<(), IoError> {
    std::fs::write(path, entries_bytes(entries))?;
    Ok(())
}

/// A cursor over checkpoint bytes that reports the failing offset on
/// truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Format {
                offset: self.bytes.len(),
                msg: format!(
                    "truncated while reading {what} ({n} bytes wanted at byte {})",
                    self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("sized")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("sized")))
    }
}

/// Parse checkpoint bytes. Magic/version mismatches and truncation are
/// format errors carrying the byte offset of the failure.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(IoError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?} (expected \"CMKT\")"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| IoError::Format {
                offset: name_pos,
                msg: format!("entry {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(8 * numel, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("sized")))
            .collect();
        entries.push(CheckpointEntry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(IoError::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after the last entry", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, IoError> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Load checkpoint entries into a store built from the same config: every
/// checkpoint entry must match a registered parameter's name and shape, and
/// every parameter must be covered.
pub fn load_into(store: &mut ParamStore, entries: &[CheckpointEntry]) -> Result<(), IoError> {
    if entries.len() != store.len() {
        return Err(IoError::Mismatch(format!(
            "checkpoint has {} entries, model has {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .id_of(&e.name)
            .ok_or_else(|| IoError::Mismatch(format!("no parameter named \"{}\"", e.name)))?;
        if store.get(id).shape != e.dims {
            return Err(IoError::Mismatch(format!(
                "shape of \"{}\": checkpoint {:?}, model {:?}",
                e.name,
                e.dims,
                store.get(id).shape
            )));
        }
        store
            .set_data(id, e.data.clone())
            .map_err(|err| IoError::Mismatch(err.to_string()))?;
    }
    Ok(())
}

/// Identifier joining all artifacts of one run: the first 16 hex digits of
/// sha256(config bytes, seed).
pub fn run_id(config_bytes: &[u8], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_bytes);
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    digest[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `f64` with 17 significant digits: enough to reparse to the identical bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_loss_terms(line: &mut String, terms: &[LossTerm]) {
    line.push('{');
    for (i, t) in terms.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        let _ = write!(
            line,
            "\"{}\":{{\"value\":{},\"weight\":{}}}",
            t.name,
            fmt_f64(t.value),
            fmt_f64(t.weight)
        );
    }
    line.push('}');
}

/// Render records as JSON Lines, one object per (branch, metric) with a fixed
/// key order, plus one `branch:"loss"` line per record that carries a loss
/// breakdown. Hand-formatted so equal runs emit byte-identical files.
pub fn metrics_lines(run_id: &str, records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let head = |metric: &str, branch: &str| {
            format!(
                "{{\"run_id\":\"{run_id}\",\"epoch\":{},\"split\":\"{}\",\"branch\":\"{branch}\",\"metric\":\"{metric}\"",
                rec.epoch, rec.split
            )
        };
        for (branch, metrics) in &rec.branches {
            for (metric, value) in metrics.named_values() {
                let mut line = head(metric, branch);
                let _ = write!(line, ",\"value\":{},\"loss_terms\":{{}}}}", fmt_f64(value));
                out.push_str(&line);
                out.push('\n');
            }
        }
        if !rec.loss_terms.is_empty() {
            let total: f64 = rec.loss_terms.iter().map(|t| t.weight * t.value).sum();
            let mut line = head("total", "loss");
            let _ = write!(line, ",\"value\":{},\"loss_terms\":", fmt_f64(total));
            push_loss_terms(&mut line, &rec.loss_terms);
            line.push('}');
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}
