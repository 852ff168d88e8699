//! Antibody records: JSONL ingestion, validation, filtering and splitting.
//!
//! One record per line:
//!
//! ```json
//! {"pdb": "1abc", "resolution": 2.1, "heavy_seq": "EVQL...",
//!  "cdr": {"h1": [25, 31], "h2": [51, 56], "h3": [98, 109]},
//!  "coords": {"N": [[x, y, z], ...], "CA": [...], "C": [...]}}
//! ```
//!
//! Spans are 0-based and inclusive. Coordinate arrays cover the full heavy
//! chain; entries outside the loop spans may be `null`.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Backbone, Point3};

/// The twenty standard residues in index order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_AMINO_ACIDS: usize = 20;

pub fn aa_index(letter: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == letter)
}

pub fn aa_letter(index: usize) -> char {
    AMINO_ACIDS[index] as char
}

/// Heavy-chain CDR loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Loop {
    H1,
    H2,
    H3,
}

impl Loop {
    pub const ALL: [Loop; 3] = [Loop::H1, Loop::H2, Loop::H3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Loop::H1 => "H1",
            Loop::H2 => "H2",
            Loop::H3 => "H3",
        }
    }
}

impl fmt::Display for Loop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive residue span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end + 1
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainCoords {
    pub n: Vec<Option<Point3>>,
    pub ca: Vec<Option<Point3>>,
    pub c: Vec<Option<Point3>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntibodyRecord {
    pub pdb_id: String,
    pub resolution: Option<f64>,
    pub heavy_seq: String,
    pub loop_spans: [Span; 3],
    pub coords: ChainCoords,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("heavy_seq is empty")]
    EmptySequence,
    #[error("heavy_seq position {position}: unknown residue '{letter}'")]
    UnknownResidue { position: usize, letter: char },
    #[error("cdr.{loop_name}: span [{start},{end}] outside sequence of length {len}")]
    SpanOutOfBounds {
        loop_name: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("cdr spans must be ordered H1 < H2 < H3 without overlap")]
    SpanOrder,
    #[error("coords.{field}: expected {expected} entries (heavy_seq length), got {got}")]
    CoordLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("coords.{field}[{index}]: missing or non-finite coordinate inside a loop")]
    MissingCoord { field: &'static str, index: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct RawCdr {
    h1: [usize; 2],
    h2: [usize; 2],
    h3: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct RawCoords {
    #[serde(rename = "N")]
    n: Vec<Option<[f64; 3]>>,
    #[serde(rename = "CA")]
    ca: Vec<Option<[f64; 3]>>,
    #[serde(rename = "C")]
    c: Vec<Option<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    pdb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolution: Option<f64>,
    heavy_seq: String,
    cdr: RawCdr,
    coords: RawCoords,
}

fn to_points(v: Vec<Option<[f64; 3]>>) -> Vec<Option<Point3>> {
    v.into_iter().map(|p| p.map(Point3::from)).collect()
}

fn from_points(v: &[Option<Point3>]) -> Vec<Option<[f64; 3]>> {
    v.iter().map(|p| p.map(Point3::to_array)).collect()
}

impl AntibodyRecord {
    /// Checks every structural invariant of a record.
    pub fn validate(&self) -> Result<(), RecordError> {
        let len = self.heavy_seq.len();
        if len == 0 {
            return Err(RecordError::EmptySequence);
        }
        if let Some((position, &b)) = self
            .heavy_seq
            .as_bytes()
            .iter()
            .enumerate()
            .find(|(_, &b)| aa_index(b).is_none())
        {
            return Err(RecordError::UnknownResidue {
                position,
                letter: b as char,
            });
        }
        for (lp, span) in Loop::ALL.iter().zip(&self.loop_spans) {
            if span.start > span.end || span.end >= len {
                return Err(RecordError::SpanOutOfBounds {
                    loop_name: match lp {
                        Loop::H1 => "h1",
                        Loop::H2 => "h2",
                        Loop::H3 => "h3",
                    },
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
        }
        let [a, b, c] = self.loop_spans;
        if !(a.end < b.start && b.end < c.start) {
            return Err(RecordError::SpanOrder);
        }
        let fields = [
            ("N", &self.coords.n),
            ("CA", &self.coords.ca),
            ("C", &self.coords.c),
        ];
        for (field, arr) in fields {
            if arr.len() != len {
                return Err(RecordError::CoordLength {
                    field,
                    expected: len,
                    got: arr.len(),
                });
            }
        }
        for span in &self.loop_spans {
            for index in span.range() {
                for (field, arr) in fields {
                    if !arr[index].is_some_and(Point3::is_finite) {
                        return Err(RecordError::MissingCoord { field, index });
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses and validates one JSON line.
    pub fn from_json(line: &str) -> Result<Self, RecordError> {
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| RecordError::Json(e.to_string()))?;
        let span = |[start, end]: [usize; 2]| Span { start, end };
        let record = Self {
            pdb_id: raw.pdb,
            resolution: raw.resolution,
            heavy_seq: raw.heavy_seq,
            loop_spans: [span(raw.cdr.h1), span(raw.cdr.h2), span(raw.cdr.h3)],
            coords: ChainCoords {
                n: to_points(raw.coords.n),
                ca: to_points(raw.coords.ca),
                c: to_points(raw.coords.c),
            },
        };
        record.validate()?;
        Ok(record)
    }

    pub fn to_json(&self) -> String {
        let [h1, h2, h3] = self.loop_spans.map(|s| [s.start, s.end]);
        let raw = RawRecord {
            pdb: self.pdb_id.clone(),
            resolution: self.resolution,
            heavy_seq: self.heavy_seq.clone(),
            cdr: RawCdr { h1, h2, h3 },
            coords: RawCoords {
                n: from_points(&self.coords.n),
                ca: from_points(&self.coords.ca),
                c: from_points(&self.coords.c),
            },
        };
        serde_json::to_string(&raw).expect("records always serialize")
    }

    pub fn span(&self, lp: Loop) -> Span {
        self.loop_spans[lp.index()]
    }
}

/// Records accepted from a JSONL source, plus the rejected lines when
/// parsing leniently.
#[derive(Debug, Default)]
pub struct Parsed {
    pub records: Vec<AntibodyRecord>,
    pub rejected: Vec<DataError>,
}

/// Parses JSONL text. Blank lines are ignored. With `strict`, the first
/// invalid line aborts; otherwise it is collected in [`Parsed::rejected`].
pub fn parse_jsonl_str(text: &str, strict: bool) -> Result<Parsed, DataError> {
    let mut out = Parsed::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match AntibodyRecord::from_json(line) {
            Ok(r) => out.records.push(r),
            Err(source) => {
                let err = DataError::Record {
                    line: i + 1,
                    source,
                };
                if strict {
                    return Err(err);
                }
                out.rejected.push(err);
            }
        }
    }
    Ok(out)
}

pub fn parse_jsonl(path: impl AsRef<Path>, strict: bool) -> Result<Parsed, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl_str(&text, strict)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[AntibodyRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Ungapped percent identity over the shorter length.
pub fn seq_identity(a: &str, b: &str) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let matches = a.bytes().zip(b.bytes()).filter(|(x, y)| x == y).count();
    100.0 * matches as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    /// Records with a resolution value above this (Å) are dropped.
    pub max_resolution: f64,
    /// Percent identity at or above which two chains count as duplicates.
    pub identity_cutoff: f64,
    /// Held-out heavy chains; near-identical training records are removed.
    pub exclude: Vec<String>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            max_resolution: 4.0,
            identity_cutoff: 99.0,
            exclude: Vec::new(),
        }
    }
}

/// Resolution filter, test-set exclusion and first-seen-wins
/// deduplication, in file order. Records without a resolution are kept.
pub fn preprocess(records: &[AntibodyRecord], opts: &PreprocessOptions) -> Vec<AntibodyRecord> {
    let mut kept: Vec<AntibodyRecord> = Vec::new();
    for r in records {
        if r.resolution.is_some_and(|res| res > opts.max_resolution) {
            continue;
        }
        let near = |s: &str| seq_identity(&r.heavy_seq, s) >= opts.identity_cutoff;
        if opts.exclude.iter().any(|s| near(s)) {
            continue;
        }
        if kept.iter().any(|k| near(&k.heavy_seq)) {
            continue;
        }
        kept.push(r.clone());
    }
    kept
}

/// Seeded shuffle, then the first `⌈ratio·n⌉` records train.
pub fn split<T: Clone>(records: &[T], ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must be in (0, 1)");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // Guard against 0.8 * 10 landing a hair above 8.
    let n_train = ((ratio * records.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let train = order[..n_train]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let val = order[n_train..]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    (train, val)
}

/// The three loops of one record concatenated as H1‖H2‖H3.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopBundle {
    pub pdb_id: String,
    /// Residue indices into [`AMINO_ACIDS`].
    pub seq: Vec<usize>,
    pub backbone: Vec<Backbone>,
    /// Start of each loop inside the concatenation.
    pub offsets: [usize; 3],
}

impl LoopBundle {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn loop_range(&self, lp: Loop) -> Range<usize> {
        let k = lp.index();
        let end = if k == 2 {
            self.len()
        } else {
            self.offsets[k + 1]
        };
        self.offsets[k]..end
    }

    pub fn loop_len(&self, lp: Loop) -> usize {
        self.loop_range(lp).len()
    }

    pub fn loop_of(&self, i: usize) -> Loop {
        if i >= self.offsets[2] {
            Loop::H3
        } else if i >= self.offsets[1] {
            Loop::H2
        } else {
            Loop::H1
        }
    }

    pub fn labels(&self) -> Vec<Loop> {
        (0..self.len()).map(|i| self.loop_of(i)).collect()
    }

    pub fn ca(&self) -> Vec<Point3> {
        self.backbone.iter().map(|b| b.ca).collect()
    }

    pub fn sequence_string(&self) -> String {
        self.seq.iter().map(|&i| aa_letter(i)).collect()
    }
}

/// Extracts and concatenates the three loops of a validated record.
pub fn bundle_loops(record: &AntibodyRecord) -> Result<LoopBundle, RecordError> {
    record.validate()?;
    let bytes = record.heavy_seq.as_bytes();
    let mut seq = Vec::new();
    let mut backbone = Vec::new();
    let mut offsets = [0; 3];
    for (k, span) in record.loop_spans.iter().enumerate() {
        offsets[k] = seq.len();
        for i in span.range() {
            seq.push(aa_index(bytes[i]).expect("validated residue"));
            backbone.push(Backbone {
                n: record.coords.n[i].expect("validated coordinate"),
                ca: record.coords.ca[i].expect("validated coordinate"),
                c: record.coords.c[i].expect("validated coordinate"),
            });
        }
    }
    Ok(LoopBundle {
        pdb_id: record.pdb_id.clone(),
        seq,
        backbone,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_record(seq: &str, spans: [[usize; 2]; 3]) -> AntibodyRecord {
        let n = seq.len();
        let pts: Vec<Option<Point3>> = (0..n)
            .map(|i| Some(Point3::new(i as f64 * 3.8, (i % 2) as f64, 0.0)))
            .collect();
        AntibodyRecord {
            pdb_id: "toy".into(),
            resolution: Some(2.0),
            heavy_seq: seq.into(),
            loop_spans: spans.map(|[s, e]| Span { start: s, end: e }),
            coords: ChainCoords {
                n: pts.clone(),
                ca: pts.clone(),
                c: pts,
            },
        }
    }

    #[test]
    fn identity_examples() {
        assert_eq!(seq_identity("EVQLV", "EVQLV"), 100.0);
        assert_eq!(seq_identity("AAAA", "AAAT"), 75.0);
        assert_eq!(seq_identity("AAAA", "AAAATTT"), 100.0);
    }

    #[test]
    fn ca_length_mismatch_names_field_and_line() {
        let mut r = tiny_record("ACDEFGHIKL", [[0, 1], [3, 4], [6, 8]]);
        r.coords.ca.pop();
        let text = format!("\n{}\n", r.to_json());
        let err = parse_jsonl_str(&text, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("coords.CA"), "{msg}");
    }

    #[test]
    fn lenient_parse_skips_bad_lines() {
        let good = tiny_record("ACDEFGHIKL", [[0, 1], [3, 4], [6, 8]]).to_json();
        let text = format!("{good}\nnot json\n{good}\n");
        let parsed = parse_jsonl_str(&text, false).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.rejected.len(), 1);
        assert!(parse_jsonl_str(&text, true).is_err());
    }

    #[test]
    fn empty_input() {
        assert!(parse_jsonl_str("", true).unwrap().records.is_empty());
    }

    #[test]
    fn rejects_unknown_residue_and_bad_spans() {
        let r = tiny_record("ACDXFGHIKL", [[0, 1], [3, 4], [6, 8]]);
        assert!(matches!(
            r.validate(),
            Err(RecordError::UnknownResidue { position: 3, .. })
        ));
        let r = tiny_record("ACDEFGHIKL", [[0, 3], [3, 4], [6, 8]]);
        assert_eq!(r.validate(), Err(RecordError::SpanOrder));
        let r = tiny_record("ACDEFGHIKL", [[0, 1], [3, 4], [6, 10]]);
        assert!(matches!(
            r.validate(),
            Err(RecordError::SpanOutOfBounds { .. })
        ));
    }

    #[test]
    fn null_coordinates_allowed_outside_loops_only() {
        let mut r = tiny_record("ACDEFGHIKL", [[0, 1], [3, 4], [6, 8]]);
        r.coords.n[2] = None;
        assert!(r.validate().is_ok());
        r.coords.n[7] = None;
        assert_eq!(
            r.validate(),
            Err(RecordError::MissingCoord {
                field: "N",
                index: 7
            })
        );
    }

    #[test]
    fn bundle_offsets() {
        let seq = "A".repeat(40);
        let r = tiny_record(&seq, [[2, 8], [12, 17], [25, 34]]);
        let b = bundle_loops(&r).unwrap();
        assert_eq!(b.len(), 23);
        assert_eq!(b.offsets, [0, 7, 13]);
        assert_eq!(b.loop_range(Loop::H3), 13..23);
        assert_eq!(b.loop_of(12), Loop::H2);

        let r = tiny_record("ACDEF", [[0, 0], [2, 2], [4, 4]]);
        let b = bundle_loops(&r).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.sequence_string(), "ADF");
    }

    #[test]
    fn preprocess_examples() {
        let a = tiny_record("ACDEFGHIKL", [[0, 1], [3, 4], [6, 8]]);
        assert_eq!(
            preprocess(&[a.clone(), a.clone()], &Default::default()).len(),
            1
        );
        let mut low = a.clone();
        low.resolution = Some(4.5);
        assert!(preprocess(&[low], &Default::default()).is_empty());
        let opts = PreprocessOptions {
            exclude: vec![a.heavy_seq.clone()],
            ..Default::default()
        };
        assert!(preprocess(&[a], &opts).is_empty());
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..10).collect();
        let (t, v) = split(&items, 0.8, 7);
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(split(&items, 0.8, 7), (t, v));
    }
}
