//! Per-token divergence measurement and the logit trace format.
//!
//! The multiple token divergence (MTD) at a position is the KL divergence
//! between the full model's next-token distribution and the MTP head's
//! prediction for the same position:
//!
//! ```text
//! mtd_t = D_KL( softmax(full_t / T) || softmax(mtp_t / T) )
//! ```
//!
//! Raw logit pairs are the unit of exchange: everything downstream (stats,
//! steering, analysis) can be recomputed from them, so traces store logits
//! verbatim rather than any derived quantity. On disk logits are f32; all
//! computation happens in f64 after widening.
//!
//! # Trace file format (`MTDT`)
//!
//! Little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MTDT"
//! 4       4     version (u32) = 1
//! 8       4     vocab_size K (u32, >= 2)
//! 12      8     record_count (u64)
//! 20      4     meta_count (u32)
//! 24      ...   meta entries: key_len u32, key (utf-8), val_len u32, val (utf-8)
//! ...     ...   records: token_id u32, K * f32 full logits, K * f32 mtp logits
//! ```
//!
//! Records are exhaustive: the file ends exactly after the last record.
//! Reserved meta keys (all optional, values are strings): `task`,
//! `complexity`, `difficulty`, `correct`, `temperature`, `alpha`, `seed`.

use crate::geometry::{self, GeometryError};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRACE_MAGIC: [u8; 4] = *b"MTDT";
pub const TRACE_VERSION: u32 = 1;

/// Conventional meta keys for [`LogitTrace::meta`].
pub mod meta_keys {
    pub const TASK: &str = "task";
    pub const COMPLEXITY: &str = "complexity";
    pub const DIFFICULTY: &str = "difficulty";
    pub const CORRECT: &str = "correct";
    pub const TEMPERATURE: &str = "temperature";
    pub const ALPHA: &str = "alpha";
    pub const SEED: &str = "seed";
    /// Description length (bits) of the automaton behind the sequence.
    pub const DL: &str = "dl";
}

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("full and mtp logit vectors differ in length ({full} vs {mtp})")]
    LengthMismatch { full: usize, mtp: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("record {index} invalid: {what}")]
    InvalidRecord { index: usize, what: String },
}

/// One decoding step: the token that was realized, and both models'
/// unmodified logits for that position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub token_id: u32,
    pub full_logits: Vec<f32>,
    pub mtp_logits: Vec<f32>,
}

/// A recorded sequence of logit pairs plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogitTrace {
    pub vocab_size: u32,
    pub meta: BTreeMap<String, String>,
    pub records: Vec<TokenRecord>,
}

/// Per-sequence aggregation of MTD and NLL, measured at temperature 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SequenceStats {
    pub per_token_mtd: Vec<f64>,
    pub per_token_nll: Vec<f64>,
    pub mean_mtd: f64,
    pub mean_nll: f64,
    pub cum_mtd: f64,
    pub cum_nll: f64,
}

/// MTD between two logit vectors at temperature `t`, in nats.
pub fn mtd(full_logits: &[f64], mtp_logits: &[f64], t: f64) -> Result<f64, DivergenceError> {
    if full_logits.len() != mtp_logits.len() {
        return Err(DivergenceError::LengthMismatch {
            full: full_logits.len(),
            mtp: mtp_logits.len(),
        });
    }
    let p = geometry::softmax_with_temperature(full_logits, t)?;
    let m = geometry::softmax_with_temperature(mtp_logits, t)?;
    Ok(geometry::kl_divergence(&p, &m))
}

/// Negative log-likelihood of `token` under `softmax(logits)`, in nats.
pub fn nll(logits: &[f64], token: usize) -> Result<f64, DivergenceError> {
    if token >= logits.len() {
        return Err(DivergenceError::TokenOutOfRange {
            token,
            vocab: logits.len(),
        });
    }
    let p = geometry::softmax_with_temperature(logits, 1.0)?;
    Ok(-p.probs()[token].ln())
}

impl LogitTrace {
    /// An empty trace over a `vocab_size`-token alphabet.
    pub fn new(vocab_size: u32) -> Self {
        Self {
            vocab_size,
            meta: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    /// Validates every record against the header (logit lengths and token
    /// range). Called by the writer; useful before hand-built traces travel.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.vocab_size < 2 {
            return Err(TraceError::Format {
                offset: 8,
                what: format!("vocab_size must be >= 2, got {}", self.vocab_size),
            });
        }
        let k = self.vocab_size as usize;
        for (index, rec) in self.records.iter().enumerate() {
            if rec.full_logits.len() != k || rec.mtp_logits.len() != k {
                return Err(TraceError::InvalidRecord {
                    index,
                    what: format!(
                        "logit lengths ({}, {}) do not match vocab_size {}",
                        rec.full_logits.len(),
                        rec.mtp_logits.len(),
                        k
                    ),
                });
            }
            if rec.token_id >= self.vocab_size {
                return Err(TraceError::InvalidRecord {
                    index,
                    what: format!("token id {} out of range for vocab {}", rec.token_id, k),
                });
            }
        }
        Ok(())
    }

    /// Bit-level equality: every header field, meta entry, and f32 logit bit
    /// pattern must match (NaN payloads included). `PartialEq` would treat
    /// NaN as unequal to itself; this is the comparison round-trip tests want.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let logits_eq = |a: &[f32], b: &[f32]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.vocab_size == other.vocab_size
            && self.meta == other.meta
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(r, s)| {
                r.token_id == s.token_id
                    && logits_eq(&r.full_logits, &s.full_logits)
                    && logits_eq(&r.mtp_logits, &s.mtp_logits)
            })
    }

    /// Serializes to the `MTDT` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, TraceError> {
        self.validate()?;
        let k = self.vocab_size as usize;
        let mut buf = Vec::with_capacity(24 + self.records.len() * (4 + 8 * k));
        buf.extend_from_slice(&TRACE_MAGIC);
        buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (key, val) in &self.meta {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(val.len() as u32).to_le_bytes());
            buf.extend_from_slice(val.as_bytes());
        }
        for rec in &self.records {
            buf.extend_from_slice(&rec.token_id.to_le_bytes());
            for &x in &rec.full_logits {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            for &x in &rec.mtp_logits {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Parses the `MTDT` byte layout; errors name the byte offset at which
    /// the input stopped making sense.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut cur = Cursor {
            bytes,
            offset: 0,
        };
        let magic = cur.take(4, "magic")?;
        if magic != TRACE_MAGIC {
            return Err(TraceError::Format {
                offset: 0,
                what: format!("bad magic {:?}, expected \"MTDT\"", magic),
            });
        }
        let version = cur.u32("version")?;
        if version != TRACE_VERSION {
            return Err(TraceError::Format {
                offset: 4,
                what: format!("unsupported version {version}, expected {TRACE_VERSION}"),
            });
        }
        let vocab_size = cur.u32("vocab_size")?;
        if vocab_size < 2 {
            return Err(TraceError::Format {
                offset: 8,
                what: format!("vocab_size must be >= 2, got {vocab_size}"),
            });
        }
        let record_count = cur.u64("record_count")?;
        let meta_count = cur.u32("meta_count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_count {
            let key = cur.string("meta key")?;
            let val = cur.string("meta value")?;
            meta.insert(key, val);
        }
        let k = vocab_size as usize;
        let mut records = Vec::with_capacity(record_count.min(1 << 20) as usize);
        for _ in 0..record_count {
            let token_offset = cur.offset;
            let token_id = cur.u32("record token_id")?;
            if token_id >= vocab_size {
                return Err(TraceError::Format {
                    offset: token_offset as u64,
                    what: format!("token id {token_id} out of range for vocab {k}"),
                });
            }
            let full_logits = cur.f32s(k, "full logits")?;
            let mtp_logits = cur.f32s(k, "mtp logits")?;
            records.push(TokenRecord {
                token_id,
                full_logits,
                mtp_logits,
            });
        }
        if cur.offset != bytes.len() {
            return Err(TraceError::Format {
                offset: cur.offset as u64,
                what: format!("{} trailing bytes after the last record", bytes.len() - cur.offset),
            });
        }
        Ok(Self {
            vocab_size,
            meta,
            records,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TraceError> {
        if self.offset + n > self.bytes.len() {
            return Err(TraceError::Format {
                offset: self.offset as u64,
                what: format!(
                    "file truncated: needed {n} bytes for {what}, found {}",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TraceError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TraceError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, TraceError> {
        let len = self.u32(&format!("{what} length"))? as usize;
        let start = self.offset;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| TraceError::Format {
            offset: start as u64,
            what: format!("{what} is not valid utf-8: {e}"),
        })
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, TraceError> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Writes a trace to `path` in the `MTDT` layout.
pub fn write_trace<P: AsRef<Path>>(path: P, trace: &LogitTrace) -> Result<(), TraceError> {
    let path = path.as_ref();
    let bytes = trace.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a trace written by [`write_trace`].
pub fn read_trace<P: AsRef<Path>>(path: P) -> Result<LogitTrace, TraceError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LogitTrace::from_bytes(&bytes)
}

/// Per-token and aggregate MTD/NLL for a trace, at temperature 1.
/// A zero-record trace yields empty vectors and zero means by convention.
pub fn sequence_stats(trace: &LogitTrace) -> Result<SequenceStats, DivergenceError> {
    let mut per_token_mtd = Vec::with_capacity(trace.records.len());
    let mut per_token_nll = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        let full: Vec<f64> = rec.full_logits.iter().map(|&x| x as f64).collect();
        let mtp: Vec<f64> = rec.mtp_logits.iter().map(|&x| x as f64).collect();
        per_token_mtd.push(mtd(&full, &mtp, 1.0)?);
        per_token_nll.push(nll(&full, rec.token_id as usize)?);
    }
    let n = per_token_mtd.len();
    let cum_mtd: f64 = per_token_mtd.iter().sum();
    let cum_nll: f64 = per_token_nll.iter().sum();
    let (mean_mtd, mean_nll) = if n == 0 {
        (0.0, 0.0)
    } else {
        (cum_mtd / n as f64, cum_nll / n as f64)
    };
    Ok(SequenceStats {
        per_token_mtd,
        per_token_nll,
        mean_mtd,
        mean_nll,
        cum_mtd,
        cum_nll,
    })
}

/// Exports a trace as JSON lines: `{"token_id":…,"mtd":…,"nll":…}` per
/// record, computed at temperature 1.
pub fn export_jsonl<P: AsRef<Path>>(trace: &LogitTrace, path: P) -> Result<(), TraceError> {
    let path = path.as_ref();
    let stats = sequence_stats(trace).map_err(|e| TraceError::InvalidRecord {
        index: usize::MAX,
        what: e.to_string(),
    })?;
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for (i, rec) in trace.records.iter().enumerate() {
        let line = serde_json::json!({
            "token_id": rec.token_id,
            "mtd": stats.per_token_mtd[i],
            "nll": stats.per_token_nll[i],
        });
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mtd_known_values() {
        // Identical logits at any temperature.
        for &t in &[0.3, 1.0, 2.5] {
            assert_eq!(mtd(&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0], t).unwrap(), 0.0);
        }
        // A near-one-hot full distribution against a flat MTP head costs ln K.
        let k = 16;
        let mut full = vec![0.0; k];
        full[3] = 100.0;
        let flat = vec![0.0; k];
        assert!(close(mtd(&full, &flat, 1.0).unwrap(), (k as f64).ln(), 1e-6));
        // Hand value: KL((0.9, 0.1) || (0.5, 0.5)).
        assert!(close(
            mtd(&[9.0f64.ln(), 0.0], &[1.0, 1.0], 1.0).unwrap(),
            0.36806420716849715,
            1e-9
        ));
        // Errors: mismatched lengths and bad temperature.
        assert!(matches!(
            mtd(&[0.0, 1.0], &[0.0, 1.0, 2.0], 1.0),
            Err(DivergenceError::LengthMismatch { full: 2, mtp: 3 })
        ));
        assert!(mtd(&[0.0, 1.0], &[0.0, 1.0], 0.0).is_err());
        assert!(mtd(&[f64::NAN, 1.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn nll_known_values() {
        // Uniform logits: every token costs ln K.
        assert!(close(nll(&[0.0; 8], 5).unwrap(), 8f64.ln(), 1e-12));
        // Logits (0, ln 3): token 0 has probability 1/4.
        assert!(close(nll(&[0.0, 3.0f64.ln()], 0).unwrap(), 4.0f64.ln(), 1e-12));
        // A dominant logit makes its token nearly free.
        let mut logits = vec![0.0; 4];
        logits[2] = 30.0;
        assert!(nll(&logits, 2).unwrap() < 1e-9);
        assert!(matches!(
            nll(&[0.0, 1.0], 2),
            Err(DivergenceError::TokenOutOfRange { token: 2, vocab: 2 })
        ));
    }

    fn small_trace() -> LogitTrace {
        let mut trace = LogitTrace::new(4);
        trace.meta.insert("task".into(), "unit".into());
        trace.meta.insert("seed".into(), "7".into());
        // Flat vs flat: mtd 0, nll ln 4.
        trace.records.push(TokenRecord {
            token_id: 3,
            full_logits: vec![0.0; 4],
            mtp_logits: vec![0.0; 4],
        });
        // Near one-hot vs flat: mtd ≈ ln 4, nll ≈ 0.
        trace.records.push(TokenRecord {
            token_id: 0,
            full_logits: vec![100.0, 0.0, 0.0, 0.0],
            mtp_logits: vec![0.0; 4],
        });
        // Flat vs near one-hot: mtd ≈ 75 - ln 4.
        trace.records.push(TokenRecord {
            token_id: 1,
            full_logits: vec![0.0; 4],
            mtp_logits: vec![100.0, 0.0, 0.0, 0.0],
        });
        trace
    }

    #[test]
    fn sequence_stats_hand_values() {
        let ln4 = 4.0f64.ln();
        let stats = sequence_stats(&small_trace()).unwrap();
        assert_eq!(stats.per_token_mtd.len(), 3);
        assert!(close(stats.per_token_mtd[0], 0.0, 1e-12));
        assert!(close(stats.per_token_nll[0], ln4, 1e-9));
        assert!(close(stats.per_token_mtd[1], ln4, 1e-6));
        assert!(stats.per_token_nll[1] < 1e-9);
        // KL(uniform || softmax(100,0,0,0)) = 0.75 * 100 - ln 4 (up to e^-100 terms).
        assert!(close(stats.per_token_mtd[2], 75.0 - ln4, 1e-6));
        assert!(close(stats.per_token_nll[2], ln4, 1e-9));
        assert!(close(stats.cum_mtd, stats.per_token_mtd.iter().sum(), 1e-12));
        assert!(close(stats.mean_mtd, stats.cum_mtd / 3.0, 1e-12));
        assert!(close(stats.mean_nll, stats.cum_nll / 3.0, 1e-12));
    }

    #[test]
    fn sequence_stats_empty_and_singleton() {
        let empty = LogitTrace::new(4);
        let stats = sequence_stats(&empty).unwrap();
        assert!(stats.per_token_mtd.is_empty());
        assert_eq!(stats.mean_mtd, 0.0);
        assert_eq!(stats.cum_nll, 0.0);

        let mut one = LogitTrace::new(2);
        one.records.push(TokenRecord {
            token_id: 1,
            full_logits: vec![0.0, 3.0f32.ln()],
            mtp_logits: vec![0.0, 0.0],
        });
        let stats = sequence_stats(&one).unwrap();
        assert_eq!(stats.mean_mtd, stats.cum_mtd);
        assert_eq!(stats.mean_nll, stats.cum_nll);
        assert!(close(stats.mean_nll, (4.0f64 / 3.0).ln(), 1e-7));
    }

    #[test]
    fn trace_round_trip_with_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mtdt");
        let trace = small_trace();
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        assert!(trace.bitwise_eq(&back));
        assert_eq!(back.meta["task"], "unit");
    }

    #[test]
    fn trace_format_errors_name_offsets() {
        let trace = small_trace();
        let bytes = trace.to_bytes().unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            LogitTrace::from_bytes(&bad),
            Err(TraceError::Format { offset: 0, .. })
        ));

        // Bad version.
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            LogitTrace::from_bytes(&bad),
            Err(TraceError::Format { offset: 4, .. })
        ));

        // Truncation inside the record block names where bytes ran out.
        let cut = bytes.len() - 7;
        match LogitTrace::from_bytes(&bytes[..cut]) {
            Err(TraceError::Format { offset, what }) => {
                assert!(offset as usize <= cut);
                assert!(what.contains("truncated"), "unexpected message: {what}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        // Trailing garbage is rejected at the first trailing byte.
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0, 1, 2]);
        match LogitTrace::from_bytes(&padded) {
            Err(TraceError::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len()),
            other => panic!("expected trailing-bytes error, got {other:?}"),
        }

        // Out-of-range token id on read names the record's byte offset.
        let mut trace2 = small_trace();
        trace2.records[1].token_id = 3; // valid; corrupt the bytes instead
        let bytes2 = trace2.to_bytes().unwrap();
        let rec0_start = bytes2.len() - 3 * (4 + 32);
        let mut bad = bytes2.clone();
        bad[rec0_start..rec0_start + 4].copy_from_slice(&99u32.to_le_bytes());
        match LogitTrace::from_bytes(&bad) {
            Err(TraceError::Format { offset, what }) => {
                assert_eq!(offset as usize, rec0_start);
                assert!(what.contains("out of range"));
            }
            other => panic!("expected token range error, got {other:?}"),
        }
    }

    #[test]
    fn write_rejects_inconsistent_records() {
        let mut trace = LogitTrace::new(4);
        trace.records.push(TokenRecord {
            token_id: 9,
            full_logits: vec![0.0; 4],
            mtp_logits: vec![0.0; 4],
        });
        assert!(matches!(
            trace.to_bytes(),
            Err(TraceError::InvalidRecord { index: 0, .. })
        ));
        trace.records[0].token_id = 1;
        trace.records[0].full_logits.pop();
        assert!(matches!(
            trace.to_bytes(),
            Err(TraceError::InvalidRecord { index: 0, .. })
        ));
    }

    #[test]
    fn jsonl_export_matches_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trace = small_trace();
        export_jsonl(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let stats = sequence_stats(&trace).unwrap();
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["token_id"].as_u64().unwrap(), trace.records[i].token_id as u64);
            assert!(close(v["mtd"].as_f64().unwrap(), stats.per_token_mtd[i], 1e-12));
            assert!(close(v["nll"].as_f64().unwrap(), stats.per_token_nll[i], 1e-12));
        }
    }

    prop_compose! {
        fn arb_trace()(k in 2u32..20, n_rec in 0usize..12)(
            k in Just(k),
            tokens in proptest::collection::vec(0u32..k, n_rec),
            bits in proptest::collection::vec(
                proptest::collection::vec(any::<u32>(), 2 * k as usize),
                n_rec,
            ),
            meta in proptest::collection::btree_map("[a-z]{1,8}", "[ -~]{0,12}", 0..4),
        ) -> LogitTrace {
            let records = tokens
                .iter()
                .zip(&bits)
                .map(|(&token_id, row)| TokenRecord {
                    token_id,
                    full_logits: row[..k as usize].iter().map(|&b| f32::from_bits(b)).collect(),
                    mtp_logits: row[k as usize..].iter().map(|&b| f32::from_bits(b)).collect(),
                })
                .collect();
            LogitTrace { vocab_size: k, meta, records }
        }
    }

    proptest! {
        // Every f32 bit pattern — NaN payloads, infinities, subnormals —
        // must survive the disk round trip untouched.
        #[test]
        fn trace_round_trip_is_bit_exact(trace in arb_trace()) {
            let bytes = trace.to_bytes().unwrap();
            let back = LogitTrace::from_bytes(&bytes).unwrap();
            prop_assert!(trace.bitwise_eq(&back));
            // And the byte stream itself is stable under a second pass.
            prop_assert_eq!(bytes, back.to_bytes().unwrap());
        }
    }
}
