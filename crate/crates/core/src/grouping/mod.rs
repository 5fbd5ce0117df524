//! Stimulus-consistent group sampling and Meiosis augmentation.

mod meiosis;

pub use meiosis::{
    crossover, draw_split_position, meiosis, meiosis_batch, meiosis_traced, mixup_crossover, AugmentKind, MeiosisOutput,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_block, Corpus, EegSample, SubjectTag, Split, BATCH_MAGIC};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Clips per iteration.
    pub p: usize,
    /// Samples per augmented group; each sampled group holds `2q`.
    pub q: usize,
    /// Stimulus-aligned groups. When false, group members are drawn from any
    /// clip.
    #[serde(default = "yes")]
    pub consistent: bool,
    /// Draw a fresh subject subset for every group rather than one per
    /// iteration.
    #[serde(default)]
    pub redraw_subjects: bool,
}

fn yes() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(p: usize, q: usize) -> Self {
        Self {
            p,
            q,
            consistent: true,
            redraw_subjects: false,
        }
    }

    pub fn validate(&self, n_subjects: usize) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(Error::config(format!("P and Q must be positive, got P={} Q={}", self.p, self.q)));
        }
        if 2 * self.q > n_subjects {
            return Err(Error::config(format!(
                "2Q = {} exceeds the {n_subjects} subjects in the corpus",
                2 * self.q
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        2 * self.q
    }
}

/// `P` groups of `2Q` windows plus the clip each group was drawn for.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub groups: Vec<Vec<EegSample>>,
    pub group_clip_ids: Vec<u32>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Two homologous groups of `Q` windows per source group, and the split
/// position shared by every crossover in the iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub pairs: Vec<(Vec<EegSample>, Vec<EegSample>)>,
    pub split_position: usize,
}

impl AugmentedBatch {
    /// Every A-side window followed by every B-side window, group by group.
    pub fn samples_a_then_b(&self) -> impl Iterator<Item = &EegSample> {
        self.pairs
            .iter()
            .flat_map(|(a, _)| a.iter())
            .chain(self.pairs.iter().flat_map(|(_, b)| b.iter()))
    }
}

/// Clip order for the current epoch and how far into it the sampler is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochState {
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl EpochState {
    /// A fresh uniformly random ordering of `clips`.
    pub fn new(clips: &[usize], rng: &mut SeededRng) -> Self {
        let mut order = clips.to_vec();
        rng.shuffle(&mut order);
        Self { order, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    /// Number of batches one epoch of `order.len()` clips yields under the
    /// short-final-batch rule.
    pub fn batches_per_epoch(n_clips: usize, p: usize) -> usize {
        let full = n_clips / p;
        let rest = n_clips % p;
        full + usize::from(rest >= 2)
    }

    /// Next run of at most `p` clips. A short tail of one clip cannot form a
    /// negative pair, so it is consumed and dropped (`None`).
    fn take(&mut self, p: usize) -> Option<&[usize]> {
        let n = p.min(self.remaining());
        let start = self.cursor;
        self.cursor += n;
        if n == 0 || (n < p && n < 2) {
            return None;
        }
        Some(&self.order[start..start + n])
    }
}

fn check_corpus(corpus: &Corpus, config: &SamplerConfig) -> Result<()> {
    config.validate(corpus.n_subjects())
}

/// Stimulus-aligned batch: each of the next `min(P, remaining)` clips in the
/// epoch order contributes one group of its windows from `2Q` subjects.
/// Returns `None` when the epoch has no usable batch left.
pub fn sample_minibatch(
    corpus: &Corpus,
    config: &SamplerConfig,
    state: &mut EpochState,
    rng: &mut SeededRng,
) -> Result<Option<GroupBatch>> {
    check_corpus(corpus, config)?;
    if !config.consistent {
        return sample_nonconsistent(corpus, config, state, rng);
    }
    let Some(clips) = state.take(config.p) else {
        return Ok(None);
    };
    let clips = clips.to_vec();
    let n_subjects = corpus.n_subjects();
    let k = config.group_size();
    let shared = rng.choose_distinct(n_subjects, k);
    let mut groups = Vec::with_capacity(clips.len());
    for &clip in &clips {
        let subjects = if config.redraw_subjects {
            rng.choose_distinct(n_subjects, k)
        } else {
            shared.clone()
        };
        groups.push(subjects.iter().map(|&s| corpus.sample(clip, s)).collect());
    }
    Ok(Some(GroupBatch {
        groups,
        group_clip_ids: clips.iter().map(|&c| c as u32).collect(),
    }))
}

/// Ablation sampler: each group is `2Q` distinct (clip, subject) windows
/// drawn uniformly from the training clips, regardless of stimulus. The epoch
/// order still paces iterations, and its clip is the group's nominal id.
pub fn sample_nonconsistent(
    corpus: &Corpus,
    config: &SamplerConfig,
    state: &mut EpochState,
    rng: &mut SeededRng,
) -> Result<Option<GroupBatch>> {
    check_corpus(corpus, config)?;
    let Some(clips) = state.take(config.p) else {
        return Ok(None);
    };
    let clips = clips.to_vec();
    let pool = corpus.clips_in(Split::Train);
    if pool.is_empty() {
        return Err(Error::contract("corpus has no training clips"));
    }
    let n_subjects = corpus.n_subjects();
    let groups = clips
        .iter()
        .map(|_| {
            rng.choose_distinct(pool.len() * n_subjects, config.group_size())
                .into_iter()
                .map(|i| corpus.sample(pool[i / n_subjects], i % n_subjects))
                .collect()
        })
        .collect();
    Ok(Some(GroupBatch {
        groups,
        group_clip_ids: clips.iter().map(|&c| c as u32).collect(),
    }))
}

/// Writes groups of equally sized windows in the corpus container layout
/// with axes `[group][member][channel][time]` and magic `SGMCBTCH`.
pub fn dump_groups(groups: &[Vec<EegSample>]) -> Result<Vec<u8>> {
    let first = groups
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::contract("cannot dump an empty batch"))?;
    let members = groups[0].len();
    let mut values = Vec::with_capacity(groups.len() * members * first.values.len());
    for g in groups {
        if g.len() != members || g.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::contract("batch dump needs equally sized groups of equally shaped windows"));
        }
        for s in g {
            values.extend_from_slice(&s.values);
        }
    }
    let dims = [groups.len(), members, first.n_channels, first.n_times].map(|d| d as u32);
    Ok(encode_block(&BATCH_MAGIC, dims, &values))
}

pub(crate) fn prefix_donor(tag: SubjectTag) -> u32 {
    match tag {
        SubjectTag::Single(s) => s,
        SubjectTag::Crossed { prefix, .. } => prefix,
        SubjectTag::Mixed { first, .. } => first,
    }
}

pub(crate) fn suffix_donor(tag: SubjectTag) -> u32 {
    match tag {
        SubjectTag::Single(s) => s,
        SubjectTag::Crossed { suffix, .. } => suffix,
        SubjectTag::Mixed { second, .. } => second,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{decode_block, generate_synthetic_corpus, SyntheticSpec};
    use std::collections::BTreeSet;

    fn corpus(clips: usize, subjects: usize) -> Corpus {
        generate_synthetic_corpus(&SyntheticSpec {
            n_clips: clips,
            n_subjects: subjects,
            n_channels: 3,
            n_times: 16,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn epoch(c: &Corpus, config: &SamplerConfig, seed: u64) -> Vec<GroupBatch> {
        let mut rng = SeededRng::new(seed);
        let mut state = EpochState::new(&c.clips_in(Split::Train), &mut rng);
        let mut out = Vec::new();
        while !state.is_exhausted() {
            if let Some(b) = sample_minibatch(c, config, &mut state, &mut rng).unwrap() {
                out.push(b);
            }
        }
        out
    }

    #[test]
    fn deap_shaped_batch() {
        let c = Corpus::new(10, 32, 32, 128, vec![0.0; 10 * 32 * 32 * 128]).unwrap();
        let mut rng = SeededRng::new(0);
        let mut state = EpochState::new(&c.clips_in(Split::Train), &mut rng);
        let b = sample_minibatch(&c, &SamplerConfig::new(8, 2), &mut state, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(b.len(), 8);
        for g in &b.groups {
            assert_eq!(g.len(), 4);
            assert!(g.iter().all(|s| s.n_channels == 32 && s.n_times == 128));
        }
    }

    #[test]
    fn epoch_covers_every_clip_once() {
        let c = corpus(24, 6);
        let batches = epoch(&c, &SamplerConfig::new(5, 2), 4);
        let mut seen: Vec<u32> = batches.iter().flat_map(|b| b.group_clip_ids.clone()).collect();
        assert_eq!(batches.len(), 5);
        assert_eq!(batches.last().unwrap().len(), 4);
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn single_leftover_clip_is_skipped() {
        let c = corpus(11, 4);
        let batches = epoch(&c, &SamplerConfig::new(5, 1), 2);
        assert_eq!(batches.len(), 2);
        assert_eq!(EpochState::batches_per_epoch(11, 5), 2);
        assert_eq!(EpochState::batches_per_epoch(12, 5), 3);
    }

    #[test]
    fn consistent_groups_share_clip_and_subjects_are_distinct() {
        let c = corpus(12, 6);
        for b in epoch(&c, &SamplerConfig::new(4, 3), 1) {
            for (g, &clip) in b.groups.iter().zip(&b.group_clip_ids) {
                assert!(g.iter().all(|s| s.clip_id == clip));
                let subjects: BTreeSet<_> = g.iter().map(|s| s.subject).collect();
                assert_eq!(subjects.len(), 6);
            }
            // One subject subset per iteration.
            let first: Vec<_> = b.groups[0].iter().map(|s| s.subject).collect();
            assert!(b.groups.iter().all(|g| g.iter().map(|s| s.subject).collect::<Vec<_>>() == first));
        }
    }

    #[test]
    fn too_many_subjects_requested() {
        let c = corpus(4, 3);
        let mut rng = SeededRng::new(0);
        let mut state = EpochState::new(&[0, 1, 2, 3], &mut rng);
        let err = sample_minibatch(&c, &SamplerConfig::new(2, 2), &mut state, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nonconsistent_groups_mix_clips() {
        let c = corpus(40, 8);
        let config = SamplerConfig {
            consistent: false,
            ..SamplerConfig::new(8, 2)
        };
        let batches = epoch(&c, &config, 3);
        let homogeneous = batches
            .iter()
            .flat_map(|b| &b.groups)
            .filter(|g| g.iter().all(|s| s.clip_id == g[0].clip_id))
            .count();
        assert!(batches.iter().flat_map(|b| &b.groups).all(|g| g.len() == 4));
        assert!(homogeneous <= 1, "{homogeneous} homogeneous groups");
    }

    #[test]
    fn nonconsistent_on_one_clip_is_consistent() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            n_clips: 1,
            n_subjects: 4,
            n_classes: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = SamplerConfig {
            consistent: false,
            ..SamplerConfig::new(1, 2)
        };
        let b = &epoch(&c, &config, 0)[0];
        let subjects: BTreeSet<_> = b.groups[0].iter().map(|s| s.subject).collect();
        assert!(b.groups[0].iter().all(|s| s.clip_id == 0));
        assert_eq!(subjects.len(), 4);
    }

    #[test]
    fn same_seed_same_batches() {
        let c = corpus(20, 6);
        let config = SamplerConfig::new(4, 2);
        assert_eq!(epoch(&c, &config, 9), epoch(&c, &config, 9));
    }

    #[test]
    fn dump_uses_batch_magic() {
        let c = corpus(6, 4);
        let b = &epoch(&c, &SamplerConfig::new(3, 2), 0)[0];
        let bytes = dump_groups(&b.groups).unwrap();
        let (dims, values) = decode_block(&bytes, &BATCH_MAGIC).unwrap();
        assert_eq!(dims, [3, 4, 3, 16]);
        assert_eq!(&values[..48], &b.groups[0][0].values[..]);
    }
}
