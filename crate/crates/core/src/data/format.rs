//! Sequence file format.
//!
//! ```text
//! offset  size    field
//! 0       4       magic "BIDS"
//! 4       2       version (u16 LE) = 1
//! 6       2       frame rate (u16 LE)
//! 8       4       T, frame count (u32 LE)
//! 12      4       J, values per frame (u32 LE)
//! 16      4*T*J   frames, row-major (frame by frame), f32 LE
//! ...             annotation block: UTF-8 lines "begin end label\n"
//! ```
//!
//! Annotation lines list action segments only (1-based, inclusive);
//! uncovered frames are background.

use std::fmt::Write as _;
use std::path::Path;

use super::motion::{validate_segments, ActionSegment, AnnotatedSequence, MotionSequence};
use crate::error::{Error, Result};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"BIDS";
pub const SEQUENCE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_sequence(seq: &AnnotatedSequence) -> Vec<u8> {
    let m = &seq.sequence;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values().len() + 16 * seq.segments.len());
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    out.extend_from_slice(&m.frame_rate().to_le_bytes());
    out.extend_from_slice(&(m.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.joints() as u32).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut text = String::new();
    for s in &seq.segments {
        writeln!(text, "{} {} {}", s.begin, s.end, s.label).expect("string write");
    }
    out.extend_from_slice(text.as_bytes());
    out
}

pub fn decode_sequence(bytes: &[u8], origin: &Path) -> Result<AnnotatedSequence> {
    let bad = |reason: String| Error::format(origin, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header".into()));
    }
    if &bytes[0..4] != SEQUENCE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SEQUENCE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let frame_rate = u16::from_le_bytes([bytes[6], bytes[7]]);
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let j = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if t == 0 || j == 0 {
        return Err(bad(format!("degenerate dimensions {t}x{j}")));
    }
    let payload_end = t
        .checked_mul(j)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let payload = bytes
        .get(HEADER_LEN..payload_end)
        .ok_or_else(|| bad(format!("payload shorter than {t}x{j} frames")))?;
    let frames: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let text = std::str::from_utf8(&bytes[payload_end..]).map_err(|_| bad("annotation block is not UTF-8".into()))?;
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: std::result::Result<Vec<usize>, _> = fields.iter().map(|f| f.parse::<usize>()).collect();
        match parsed {
            Ok(v) if v.len() == 3 => segments.push(ActionSegment::new(v[0], v[1], v[2])),
            _ => return Err(bad(format!("annotation line {}: expected `begin end label`", i + 1))),
        }
    }
    validate_segments(&segments, t).map_err(|e| bad(e.to_string()))?;
    let sequence = MotionSequence::new(t, j, frames, frame_rate).map_err(|e| bad(e.to_string()))?;
    Ok(AnnotatedSequence { sequence, segments })
}

pub fn write_sequence(path: &Path, seq: &AnnotatedSequence) -> Result<()> {
    std::fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<AnnotatedSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes, path)
}
