//! Corpus container and metadata sidecar.
//!
//! Container layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..8  | magic `SGMCCORP` |
//! | 8..12 | `u32` version (1) |
//! | 12..28 | `u32` n_clips, n_subjects, n_channels, n_times |
//! | 28..  | `f32` values, `[clip][subject][channel][time]` |
//!
//! The sidecar (same stem, `.meta`) holds `key=value` lines: `label=clip:class`,
//! `split=clip:train|val|test`, and `provenance.<key>=<value>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Corpus, Split};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: [u8; 8] = *b"SGMCCORP";
pub const BATCH_MAGIC: [u8; 8] = *b"SGMCBTCH";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

/// Header plus payload for a four-axis `f32` block.
pub fn encode_block(magic: &[u8; 8], dims: [u32; 4], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::format(offset as u64, "file ends inside the header"))
}

pub fn decode_block(bytes: &[u8], magic: &[u8; 8]) -> Result<([u32; 4], Vec<f32>)> {
    let Some(found) = bytes.get(..8) else {
        return Err(Error::format(0, "file is shorter than the magic number"));
    };
    if found != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = read_u32(bytes, 8)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = read_u32(bytes, 12 + 4 * i)?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let Some((count, payload_bytes)) = count else {
        return Err(Error::format(12, format!("dimensions {dims:?} overflow the addressable size")));
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_bytes {
        return Err(Error::format(
            (HEADER_LEN + payload.len().min(payload_bytes)) as u64,
            format!(
                "truncated or oversized payload: header declares {payload_bytes} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().expect("four bytes")));
    }
    Ok((dims, values))
}

pub fn encode_corpus(corpus: &Corpus) -> (Vec<u8>, String) {
    let dims = [
        corpus.n_clips() as u32,
        corpus.n_subjects() as u32,
        corpus.n_channels() as u32,
        corpus.n_times() as u32,
    ];
    (encode_block(&CORPUS_MAGIC, dims, corpus.data()), encode_meta(corpus))
}

fn encode_meta(corpus: &Corpus) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version={FORMAT_VERSION}");
    if let Some(labels) = corpus.labels() {
        for (clip, class) in labels.iter().enumerate() {
            let _ = writeln!(s, "label={clip}:{class}");
        }
    }
    if let Some(splits) = corpus.splits() {
        for (clip, split) in splits.iter().enumerate() {
            let _ = writeln!(s, "split={clip}:{split}");
        }
    }
    for (k, v) in &corpus.provenance {
        let _ = writeln!(s, "provenance.{k}={v}");
    }
    s
}

fn parse_clip_entry(value: &str, line: usize, n_clips: usize) -> Result<(usize, &str)> {
    let bad = || Error::format(line as u64, format!("sidecar line {line}: malformed entry {value:?}"));
    let (clip, rest) = value.split_once(':').ok_or_else(bad)?;
    let clip: usize = clip.parse().map_err(|_| bad())?;
    if clip >= n_clips {
        return Err(Error::format(line as u64, format!("sidecar line {line}: clip {clip} out of range")));
    }
    Ok((clip, rest))
}

/// Sidecar errors report the 1-based line number as the offset.
fn apply_meta(corpus: &mut Corpus, meta: &str) -> Result<()> {
    let n = corpus.n_clips();
    let mut labels: Vec<Option<u32>> = vec![None; n];
    let mut splits: Vec<Option<Split>> = vec![None; n];
    for (i, raw) in meta.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::format(line as u64, format!("sidecar line {line}: expected key=value")))?;
        match key {
            "version" => {
                if value != FORMAT_VERSION.to_string() {
                    return Err(Error::format(line as u64, format!("unsupported sidecar version {value}")));
                }
            }
            "label" => {
                let (clip, class) = parse_clip_entry(value, line, n)?;
                let class = class
                    .parse()
                    .map_err(|_| Error::format(line as u64, format!("sidecar line {line}: bad class {class:?}")))?;
                labels[clip] = Some(class);
            }
            "split" => {
                let (clip, tag) = parse_clip_entry(value, line, n)?;
                splits[clip] = Some(
                    tag.parse()
                        .map_err(|_| Error::format(line as u64, format!("sidecar line {line}: bad split {tag:?}")))?,
                );
            }
            _ => match key.strip_prefix("provenance.") {
                Some(k) => {
                    corpus.provenance.insert(k.to_string(), value.to_string());
                }
                None => return Err(Error::format(line as u64, format!("sidecar line {line}: unknown key {key:?}"))),
            },
        }
    }
    if labels.iter().any(Option::is_some) {
        let all: Option<Vec<u32>> = labels.into_iter().collect();
        let all = all.ok_or_else(|| Error::format(0, "sidecar labels some clips but not all"))?;
        corpus.set_labels(all)?;
    }
    if splits.iter().any(Option::is_some) {
        let all: Option<Vec<Split>> = splits.into_iter().collect();
        let all = all.ok_or_else(|| Error::format(0, "sidecar tags some clips but not all"))?;
        corpus.set_splits(all)?;
    }
    Ok(())
}

pub fn decode_corpus(bytes: &[u8], meta: Option<&str>) -> Result<Corpus> {
    let (dims, values) = decode_block(bytes, &CORPUS_MAGIC)?;
    let [clips, subjects, channels, times] = dims.map(|d| d as usize);
    let mut corpus = Corpus::new(clips, subjects, channels, times, values)
        .map_err(|e| Error::format(12, format!("invalid corpus header: {e}")))?;
    if let Some(meta) = meta {
        apply_meta(&mut corpus, meta)?;
    }
    Ok(corpus)
}

/// Sidecar path: the container path with its extension replaced by `.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let (bytes, meta) = encode_corpus(corpus);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

/// Reads a container and, when present, its sidecar.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let meta = match fs::read_to_string(&mp) {
        Ok(s) => Some(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(mp, e)),
    };
    decode_corpus(&bytes, meta.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, split_by_clip, SyntheticSpec};

    fn small() -> Corpus {
        let spec = SyntheticSpec {
            n_clips: 6,
            n_subjects: 3,
            n_channels: 2,
            n_times: 16,
            ..SyntheticSpec::default()
        };
        split_by_clip(&generate_synthetic_corpus(&spec).unwrap(), [0.5, 0.25, 0.25], 1).unwrap()
    }

    #[test]
    fn round_trip_preserves_metadata() {
        let c = small();
        let (bytes, meta) = encode_corpus(&c);
        let back = decode_corpus(&bytes, Some(&meta)).unwrap();
        assert_eq!(back, c);
        let (bytes2, meta2) = encode_corpus(&back);
        assert_eq!(bytes, bytes2);
        assert_eq!(meta, meta2);
    }

    #[test]
    fn header_layout() {
        let (bytes, _) = encode_corpus(&small());
        assert_eq!(&bytes[..8], b"SGMCCORP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 16);
        assert_eq!(bytes.len(), 28 + 6 * 3 * 2 * 16 * 4);
    }

    #[test]
    fn bad_magic_names_expected() {
        let (mut bytes, _) = encode_corpus(&small());
        bytes[0] = b'X';
        let err = decode_corpus(&bytes, None).unwrap_err().to_string();
        assert!(err.contains("SGMCCORP"), "{err}");
        assert!(err.contains("byte 0"), "{err}");
    }

    #[test]
    fn truncated_payload_detected() {
        let (bytes, _) = encode_corpus(&small());
        let err = decode_corpus(&bytes[..bytes.len() - 3], None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn overflowing_dimensions_detected() {
        let mut bytes = encode_block(&CORPUS_MAGIC, [u32::MAX; 4], &[]);
        bytes.truncate(28);
        assert!(matches!(decode_block(&bytes, &CORPUS_MAGIC), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn partial_labels_rejected() {
        let (bytes, _) = encode_corpus(&small());
        assert!(decode_corpus(&bytes, Some("label=0:1\n")).is_err());
    }
}
