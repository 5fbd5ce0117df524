//! Stimulus-aligned corpus model, preprocessing, clip-level splits, the
//! on-disk container, and a synthetic corpus generator.

mod format;
mod preprocess;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;

pub use format::{
    decode_block, decode_corpus, encode_block, encode_corpus, meta_path, read_corpus, write_corpus,
    BATCH_MAGIC, CORPUS_MAGIC, FORMAT_VERSION,
};
pub use preprocess::{baseline_subtract, binarize_rating, l2_normalize_per_channel, window_segment, RATING_THRESHOLD};
pub use split::split_by_clip;
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

use crate::error::{Error, Result};

/// Smallest window length that leaves an interior crossover position.
pub const MIN_TIMES: usize = 4;

/// Who a window came from. Crossover products carry both donors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubjectTag {
    Single(u32),
    /// Crossover product: first `c` time points from `prefix`, rest from `suffix`.
    Crossed { prefix: u32, suffix: u32 },
    /// Convex mixture of two windows.
    Mixed { first: u32, second: u32 },
}

/// One window of `n_times` sampling points over `n_channels` electrodes.
///
/// Values are stored channel-major (`[channel][time]`), the layout of the
/// corpus container and of the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSample {
    pub n_channels: usize,
    pub n_times: usize,
    pub values: Vec<f32>,
    pub clip_id: u32,
    pub subject: SubjectTag,
}

impl EegSample {
    pub fn new(n_channels: usize, n_times: usize, values: Vec<f32>, clip_id: u32, subject: SubjectTag) -> Result<Self> {
        if values.len() != n_channels * n_times {
            return Err(Error::shape(
                "sample",
                format!("{n_channels}x{n_times} window needs {} values, got {}", n_channels * n_times, values.len()),
            ));
        }
        if n_times < MIN_TIMES {
            return Err(Error::contract(format!("windows need at least {MIN_TIMES} time points, got {n_times}")));
        }
        Ok(Self {
            n_channels,
            n_times,
            values,
            clip_id,
            subject,
        })
    }

    #[inline]
    pub fn at(&self, channel: usize, time: usize) -> f32 {
        self.values[channel * self.n_times + time]
    }

    /// All electrode values at one sampling point.
    pub fn time_slice(&self, time: usize) -> Vec<f32> {
        (0..self.n_channels).map(|c| self.at(c, time)).collect()
    }

    pub fn same_shape(&self, other: &EegSample) -> bool {
        self.n_channels == other.n_channels && self.n_times == other.n_times
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Windows indexed by (clip, subject), with optional per-clip labels and
/// split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    n_clips: usize,
    n_subjects: usize,
    n_channels: usize,
    n_times: usize,
    /// `[clip][subject][channel][time]`.
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
    splits: Option<Vec<Split>>,
    pub provenance: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(n_clips: usize, n_subjects: usize, n_channels: usize, n_times: usize, data: Vec<f32>) -> Result<Self> {
        if n_clips == 0 || n_subjects == 0 || n_channels == 0 {
            return Err(Error::contract("corpus extents must be positive"));
        }
        if n_times < MIN_TIMES {
            return Err(Error::contract(format!("windows need at least {MIN_TIMES} time points, got {n_times}")));
        }
        let expect = n_clips * n_subjects * n_channels * n_times;
        if data.len() != expect {
            return Err(Error::shape("corpus", format!("expected {expect} values, got {}", data.len())));
        }
        Ok(Self {
            n_clips,
            n_subjects,
            n_channels,
            n_times,
            data,
            labels: None,
            splits: None,
            provenance: BTreeMap::new(),
        })
    }

    pub fn n_clips(&self) -> usize {
        self.n_clips
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn window_len(&self) -> usize {
        self.n_channels * self.n_times
    }

    pub fn window(&self, clip: usize, subject: usize) -> &[f32] {
        let w = self.window_len();
        let start = (clip * self.n_subjects + subject) * w;
        &self.data[start..start + w]
    }

    pub fn sample(&self, clip: usize, subject: usize) -> EegSample {
        EegSample {
            n_channels: self.n_channels,
            n_times: self.n_times,
            values: self.window(clip, subject).to_vec(),
            clip_id: clip as u32,
            subject: SubjectTag::Single(subject as u32),
        }
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<u32>) -> Result<()> {
        if labels.len() != self.n_clips {
            return Err(Error::contract(format!(
                "{} labels for {} clips; labels must cover every clip",
                labels.len(),
                self.n_clips
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn splits(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.n_clips {
            return Err(Error::contract(format!(
                "{} split tags for {} clips; tags must cover every clip",
                splits.len(),
                self.n_clips
            )));
        }
        self.splits = Some(splits);
        Ok(())
    }

    /// Clip indices tagged with `split`, in ascending order. An untagged
    /// corpus treats every clip as training data.
    pub fn clips_in(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(tags) => (0..self.n_clips).filter(|&c| tags[c] == split).collect(),
            None if split == Split::Train => (0..self.n_clips).collect(),
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_indexing_follows_axis_order() {
        let data: Vec<f32> = (0..2 * 3 * 2 * 4).map(|v| v as f32).collect();
        let c = Corpus::new(2, 3, 2, 4, data).unwrap();
        let s = c.sample(1, 2);
        assert_eq!(s.values[0], ((1 * 3 + 2) * 8) as f32);
        assert_eq!(s.at(1, 3), ((1 * 3 + 2) * 8 + 7) as f32);
        assert_eq!(s.time_slice(0), vec![40.0, 44.0]);
    }

    #[test]
    fn short_windows_are_rejected() {
        assert!(Corpus::new(1, 1, 1, 3, vec![0.0; 3]).is_err());
    }

    #[test]
    fn labels_must_cover_all_clips() {
        let mut c = Corpus::new(3, 1, 1, 4, vec![0.0; 12]).unwrap();
        assert!(c.set_labels(vec![0, 1]).is_err());
        c.set_labels(vec![0, 1, 1]).unwrap();
        assert_eq!(c.n_classes(), 2);
    }
}
