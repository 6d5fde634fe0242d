//! File formats: events TSV, binary frame probabilities (`FPB1`), binary
//! features (`FFB1`), `key = value` configuration text and the dataset
//! manifest. Readers validate everything and never panic on bad input.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::red::FramePosteriors;

pub const FRAME_PROB_MAGIC: &[u8; 4] = b"FPB1";
pub const FEATURE_MAGIC: &[u8; 4] = b"FFB1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated input at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{} trailing bytes after payload at byte {offset}", len)]
    TrailingBytes { offset: usize, len: usize },
    #[error("line {line}: non-numeric {field} {value:?}")]
    NonNumeric {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: onset {onset} is not before offset {offset}")]
    OnsetNotBeforeOffset { line: usize, onset: f64, offset: f64 },
    #[error("value out of range at {location}: {message}")]
    OutOfRange { location: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

/// One row of an events file.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub file: String,
    pub onset: f64,
    pub offset: f64,
    pub label: String,
    pub confidence: Option<f64>,
}

impl EventRecord {
    /// Rounds times to 3 decimals and confidence to 4, the stored precision.
    pub fn quantized(&self) -> Self {
        Self {
            onset: round_to(self.onset, 3),
            offset: round_to(self.offset, 3),
            confidence: self.confidence.map(|c| round_to(c, 4)),
            ..self.clone()
        }
    }
}

pub(crate) fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

const EVENTS_HEADER: &str = "filename\tonset\toffset\tevent_label";

/// Serialises records; a confidence column is written when any record has one.
pub fn write_events_tsv(records: &[EventRecord]) -> String {
    let with_conf = records.iter().any(|r| r.confidence.is_some());
    let mut out = String::from(EVENTS_HEADER);
    if with_conf {
        out.push_str("\tconfidence");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}\t{:.3}\t{:.3}\t{}", r.file, r.onset, r.offset, r.label);
        if with_conf {
            let _ = write!(out, "\t{:.4}", r.confidence.unwrap_or(1.0));
        }
        out.push('\n');
    }
    out
}

/// Parses an events file. The header row is optional; blank lines are skipped.
pub fn parse_events_tsv(text: &str) -> Result<Vec<EventRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || (i == 0 && line.starts_with("filename")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(FormatError::Syntax {
                line: line_no,
                message: format!("expected 4 or 5 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[3].is_empty() {
            return Err(FormatError::Syntax {
                line: line_no,
                message: "empty filename or label".into(),
            });
        }
        let onset = number(fields[1], line_no, "onset")?;
        let offset = number(fields[2], line_no, "offset")?;
        if onset < 0.0 {
            return Err(FormatError::OutOfRange {
                location: format!("line {line_no}"),
                message: format!("negative onset {onset}"),
            });
        }
        if onset >= offset {
            return Err(FormatError::OnsetNotBeforeOffset {
                line: line_no,
                onset,
                offset,
            });
        }
        let confidence = match fields.get(4) {
            Some(s) => {
                let c = number(s, line_no, "confidence")?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(FormatError::OutOfRange {
                        location: format!("line {line_no}"),
                        message: format!("confidence {c} outside [0, 1]"),
                    });
                }
                Some(c)
            }
            None => None,
        };
        out.push(EventRecord {
            file: fields[0].to_string(),
            onset,
            offset,
            label: fields[3].to_string(),
            confidence,
        });
    }
    Ok(out)
}

fn number(s: &str, line: usize, field: &'static str) -> Result<f64, FormatError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(FormatError::NonNumeric {
            line,
            field,
            value: s.to_string(),
        }),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.bytes.get(..4).unwrap_or(self.bytes);
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    /// Checks that exactly `count` f32 values remain, then reads them.
    fn payload(&mut self, count: Option<usize>) -> Result<Vec<f32>, FormatError> {
        let rest = self.bytes.len() - self.pos;
        let need = count.and_then(|c| c.checked_mul(4)).ok_or(FormatError::OutOfRange {
            location: "header".into(),
            message: "payload size overflows".into(),
        })?;
        if rest < need {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                needed: need - rest,
            });
        }
        if rest > need {
            return Err(FormatError::TrailingBytes {
                offset: self.pos + need,
                len: rest - need,
            });
        }
        let mut out = Vec::with_capacity(need / 4);
        for _ in 0..need / 4 {
            out.push(self.f32()?);
        }
        Ok(out)
    }
}

fn frame_dur_field(dt: f32) -> Result<f64, FormatError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(FormatError::OutOfRange {
            location: "byte 12".into(),
            message: format!("frame duration {dt}"),
        });
    }
    Ok(dt as f64)
}

/// Encodes start/end posteriors as `FPB1`, ordered `[class][frame][start, end]`.
pub fn encode_frame_probs(post: &FramePosteriors) -> Vec<u8> {
    let (c, t) = (post.n_classes(), post.n_frames());
    let mut out = Vec::with_capacity(HEADER_LEN + c * t * 8);
    out.extend_from_slice(FRAME_PROB_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(post.frame_dur as f32).to_le_bytes());
    for k in 0..c {
        for f in 0..t {
            out.extend_from_slice(&(post.start[[k, f]] as f32).to_le_bytes());
            out.extend_from_slice(&(post.end[[k, f]] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_frame_probs(bytes: &[u8]) -> Result<FramePosteriors, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FRAME_PROB_MAGIC)?;
    let c = r.u32()? as usize;
    let t = r.u32()? as usize;
    let dt = frame_dur_field(r.f32()?)?;
    let values = r.payload(c.checked_mul(t).and_then(|n| n.checked_mul(2)))?;
    let mut start = Array2::zeros((c, t));
    let mut end = Array2::zeros((c, t));
    for (i, pair) in values.chunks_exact(2).enumerate() {
        for &v in pair {
            if !(0.0..=1.0).contains(&v) {
                return Err(FormatError::OutOfRange {
                    location: format!("byte {}", HEADER_LEN + 8 * i),
                    message: format!("probability {v}"),
                });
            }
        }
        start[[i / t, i % t]] = pair[0] as f64;
        end[[i / t, i % t]] = pair[1] as f64;
    }
    FramePosteriors::new(start, end, dt).map_err(|e| FormatError::OutOfRange {
        location: "payload".into(),
        message: e.to_string(),
    })
}

/// Feature matrix (`F × T`) with its frame duration.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub values: Array2<f32>,
    pub frame_dur: f64,
}

/// Encodes features as `FFB1`: magic, u32 F, u32 T, f32 Δt, then `F·T` f32
/// values in row-major `[feature][frame]` order.
pub fn encode_features(feat: &Features) -> Vec<u8> {
    let (f, t) = feat.values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + f * t * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(feat.frame_dur as f32).to_le_bytes());
    for v in feat.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Features, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FEATURE_MAGIC)?;
    let f = r.u32()? as usize;
    let t = r.u32()? as usize;
    let dt = frame_dur_field(r.f32()?)?;
    let values = r.payload(f.checked_mul(t))?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::OutOfRange {
            location: format!("byte {}", HEADER_LEN + 4 * i),
            message: "non-finite feature".into(),
        });
    }
    let values = Array2::from_shape_vec((f, t), values).map_err(|e| FormatError::OutOfRange {
        location: "payload".into(),
        message: e.to_string(),
    })?;
    Ok(Features { values, frame_dur: dt })
}

/// Ordered `key = value` pairs. `#` starts a comment; duplicate keys are errors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut kv = Self::default();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(FormatError::Syntax {
                    line: i + 1,
                    message: format!("expected key = value, found {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(FormatError::Syntax {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if kv.get(k).is_some() {
                return Err(FormatError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key {k:?}"),
                });
            }
            kv.entries.push((k.to_string(), v.to_string()));
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces a value, keeping the original position.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Parses the value of `key` if present.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, FormatError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| FormatError::Syntax {
                line: self.line_of(key),
                message: format!("cannot parse {key} = {v:?}"),
            }),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.iter().position(|(k, _)| k == key).map_or(0, |i| i + 1)
    }

    /// Renders one `key = value` per line.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "eval" => Ok(Split::Eval),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Clip list with split assignment, stored as `clip<TAB>split` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub clips: Vec<(String, Split)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from("clip\tsplit\n");
        for (id, s) in &self.clips {
            let _ = writeln!(out, "{id}\t{}", s.as_str());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut clips = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || (i == 0 && line == "clip\tsplit") {
                continue;
            }
            let syntax = |message: String| FormatError::Syntax { line: i + 1, message };
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| syntax("expected clip<TAB>split".into()))?;
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(syntax(format!("invalid clip id {id:?}")));
            }
            let split: Split = split.parse().map_err(syntax)?;
            if !seen.insert(id.to_string()) {
                return Err(syntax(format!("duplicate clip {id:?}")));
            }
            clips.push((id.to_string(), split));
        }
        Ok(Self { clips })
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.clips.iter().filter(move |(_, s)| *s == split).map(|(id, _)| id.as_str())
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(file: &str, on: f64, off: f64, label: &str, conf: Option<f64>) -> EventRecord {
        EventRecord {
            file: file.into(),
            onset: on,
            offset: off,
            label: label.into(),
            confidence: conf,
        }
    }

    #[test]
    fn empty_events_file() {
        assert!(parse_events_tsv("").unwrap().is_empty());
        assert!(parse_events_tsv(&write_events_tsv(&[])).unwrap().is_empty());
    }

    #[test]
    fn events_round_trip() {
        let recs = vec![
            rec("a", 0.12345, 1.0, "dog", Some(0.87654)),
            rec("a", 2.0, 2.5004, "cat", Some(0.1)),
            rec("b", 0.0, 10.0, "dog", None),
        ];
        let back = parse_events_tsv(&write_events_tsv(&recs)).unwrap();
        let want: Vec<EventRecord> = recs
            .iter()
            .map(|r| {
                let q = r.quantized();
                EventRecord {
                    confidence: Some(q.confidence.unwrap_or(1.0)),
                    ..q
                }
            })
            .collect();
        assert_eq!(back, want);
    }

    #[test]
    fn event_errors_are_distinct() {
        assert!(matches!(
            parse_events_tsv("a\tx\t1\tdog"),
            Err(FormatError::NonNumeric { line: 1, field: "onset", .. })
        ));
        assert!(matches!(
            parse_events_tsv("a\t0.5\t1\tdog\n\na\t2\t2\tdog\r\n"),
            Err(FormatError::OnsetNotBeforeOffset { line: 3, .. })
        ));
        assert!(matches!(parse_events_tsv("a\t1\t2"), Err(FormatError::Syntax { .. })));
        assert!(matches!(
            parse_events_tsv("a\t1\t2\tdog\t1.5"),
            Err(FormatError::OutOfRange { .. })
        ));
    }

    #[test]
    fn frame_prob_layout() {
        let start = Array2::from_shape_fn((2, 5), |(c, t)| (c * 5 + t) as f64 / 16.0);
        let end = start.mapv(|v| 1.0 - v);
        let post = FramePosteriors::new(start, end, 0.04).unwrap();
        let bytes = encode_frame_probs(&post);
        assert_eq!(bytes.len(), 16 + 80);
        assert_eq!(&bytes[..4], b"FPB1");
        // class 0 frame 1 start value sits at payload offset 8
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.0 / 16.0);
        let back = decode_frame_probs(&bytes).unwrap();
        assert_eq!(back.start, post.start);
        assert_eq!(back.end, post.end);
        assert!((back.frame_dur - 0.04).abs() < 1e-7);
    }

    #[test]
    fn binary_errors() {
        let post = FramePosteriors::new(Array2::zeros((1, 2)), Array2::zeros((1, 2)), 0.1).unwrap();
        let bytes = encode_frame_probs(&post);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_frame_probs(&bad), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            decode_frame_probs(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_frame_probs(&long), Err(FormatError::TrailingBytes { .. })));
        let mut huge = bytes.clone();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_frame_probs(&huge).is_err());
        assert!(decode_frame_probs(b"FP").is_err());
    }

    #[test]
    fn features_round_trip() {
        let feat = Features {
            values: Array2::from_shape_fn((3, 4), |(i, j)| i as f32 - 0.5 * j as f32),
            frame_dur: 0.04,
        };
        let back = decode_features(&encode_features(&feat)).unwrap();
        assert_eq!(back.values, feat.values);
    }

    #[test]
    fn key_values() {
        let kv = KeyValues::parse("# c\na = 1\n b=two # note\r\n\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        assert_eq!(kv.parsed::<u32>("a").unwrap(), Some(1));
        assert!(kv.parsed::<u32>("b").is_err());
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            clips: vec![("c0".into(), Split::Train), ("c1".into(), Split::Eval)],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("x\tbogus").is_err());
        assert!(Manifest::parse("../x\ttrain").is_err());
        assert!(Manifest::parse("x\ttrain\nx\teval").is_err());
    }
}
