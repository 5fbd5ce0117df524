use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{prefix_donor, suffix_donor, AugmentedBatch, GroupBatch};
use crate::corpus::{EegSample, SubjectTag, MIN_TIMES};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// What happens to each matched pair before the partners are separated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    /// Exchange the first `c` time points.
    Crossover,
    /// Leave the pair untouched; only the separation step runs.
    None,
    /// Convex mixture with `lambda ~ U(0, 1)` per pair.
    Mixup,
}

impl AugmentKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Crossover => "crossover",
            AugmentKind::None => "none",
            AugmentKind::Mixup => "mixup",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossover" => Ok(AugmentKind::Crossover),
            "none" => Ok(AugmentKind::None),
            "mixup" => Ok(AugmentKind::Mixup),
            other => Err(Error::config(format!("unknown augmenter {other:?}"))),
        }
    }
}

fn check_pair(a: &EegSample, b: &EegSample) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::contract(format!(
            "paired windows differ in shape: {}x{} vs {}x{}",
            a.n_channels, a.n_times, b.n_channels, b.n_times
        )));
    }
    Ok(())
}

fn check_split(c: usize, m: usize) -> Result<()> {
    if m < MIN_TIMES || c < 2 || c > m - 2 {
        return Err(Error::contract(format!("split position {c} outside [2, {}]", m.saturating_sub(2))));
    }
    Ok(())
}

fn crossed_tag(prefix: SubjectTag, suffix: SubjectTag) -> SubjectTag {
    let (p, s) = (prefix_donor(prefix), suffix_donor(suffix));
    if p == s {
        SubjectTag::Single(p)
    } else {
        SubjectTag::Crossed { prefix: p, suffix: s }
    }
}

/// Exchanges the first `c` time points of two windows: the first output is
/// `B[..c]` followed by `A[c..]`, the second `A[..c]` followed by `B[c..]`.
pub fn crossover(a: &EegSample, b: &EegSample, c: usize) -> Result<(EegSample, EegSample)> {
    check_pair(a, b)?;
    check_split(c, a.n_times)?;
    let m = a.n_times;
    let mut xa = a.values.clone();
    let mut xb = b.values.clone();
    for ch in 0..a.n_channels {
        let row = ch * m..ch * m + c;
        xa[row.clone()].copy_from_slice(&b.values[row.clone()]);
        xb[row.clone()].copy_from_slice(&a.values[row]);
    }
    let out_a = EegSample {
        values: xa,
        subject: crossed_tag(b.subject, a.subject),
        ..a.clone()
    };
    let out_b = EegSample {
        values: xb,
        subject: crossed_tag(a.subject, b.subject),
        ..b.clone()
    };
    Ok((out_a, out_b))
}

/// `(lambda A + (1 - lambda) B, (1 - lambda) A + lambda B)`.
pub fn mixup_crossover(a: &EegSample, b: &EegSample, lambda: f64) -> Result<(EegSample, EegSample)> {
    check_pair(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let mix = |x: f32, y: f32, l: f64| (l * f64::from(x) + (1.0 - l) * f64::from(y)) as f32;
    let xa = a.values.iter().zip(&b.values).map(|(&x, &y)| mix(x, y, lambda)).collect();
    let xb = a.values.iter().zip(&b.values).map(|(&x, &y)| mix(y, x, lambda)).collect();
    let (da, db) = (prefix_donor(a.subject), prefix_donor(b.subject));
    Ok((
        EegSample {
            values: xa,
            subject: SubjectTag::Mixed { first: da, second: db },
            ..a.clone()
        },
        EegSample {
            values: xb,
            subject: SubjectTag::Mixed { first: db, second: da },
            ..b.clone()
        },
    ))
}

/// Uniform split position in `[2, M - 2]`.
pub fn draw_split_position(n_times: usize, rng: &mut SeededRng) -> Result<usize> {
    if n_times < MIN_TIMES {
        return Err(Error::contract(format!("windows need at least {MIN_TIMES} time points, got {n_times}")));
    }
    Ok(rng.uniform_inclusive(2, n_times - 2))
}

/// Result of one Meiosis call, with the matching that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeiosisOutput {
    pub group_a: Vec<EegSample>,
    pub group_b: Vec<EegSample>,
    /// `pairs[k]` holds the input indices whose products are `group_a[k]`
    /// and `group_b[k]`.
    pub pairs: Vec<(usize, usize)>,
}

/// Meiosis with the matching exposed.
pub fn meiosis_traced(group: &[EegSample], c: usize, kind: AugmentKind, rng: &mut SeededRng) -> Result<MeiosisOutput> {
    if group.len() < 2 || group.len() % 2 != 0 {
        return Err(Error::contract(format!("meiosis needs an even group of at least 2, got {}", group.len())));
    }
    for s in &group[1..] {
        check_pair(&group[0], s)?;
    }
    if kind == AugmentKind::Crossover {
        check_split(c, group[0].n_times)?;
    }
    let q = group.len() / 2;
    let mut order: Vec<usize> = (0..group.len()).collect();
    rng.shuffle(&mut order);
    let mut out = MeiosisOutput {
        group_a: Vec::with_capacity(q),
        group_b: Vec::with_capacity(q),
        pairs: Vec::with_capacity(q),
    };
    for k in 0..q {
        let (i, j) = (order[k], order[k + q]);
        let (x, y) = match kind {
            AugmentKind::Crossover => crossover(&group[i], &group[j], c)?,
            AugmentKind::None => (group[i].clone(), group[j].clone()),
            AugmentKind::Mixup => mixup_crossover(&group[i], &group[j], rng.unit())?,
        };
        if rng.coin() {
            out.group_a.push(x);
            out.group_b.push(y);
            out.pairs.push((i, j));
        } else {
            out.group_a.push(y);
            out.group_b.push(x);
            out.pairs.push((j, i));
        }
    }
    Ok(out)
}

/// Randomly pairs the `2Q` windows of a group, augments every pair, and
/// sends the two products of each pair to different output groups.
pub fn meiosis(group: &[EegSample], c: usize, rng: &mut SeededRng) -> Result<(Vec<EegSample>, Vec<EegSample>)> {
    let out = meiosis_traced(group, c, AugmentKind::Crossover, rng)?;
    Ok((out.group_a, out.group_b))
}

/// Draws one split position for the iteration and applies Meiosis to every
/// group with it.
pub fn meiosis_batch(batch: &GroupBatch, kind: AugmentKind, rng: &mut SeededRng) -> Result<AugmentedBatch> {
    let first = batch
        .groups
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::contract("meiosis on an empty batch"))?;
    let c = draw_split_position(first.n_times, rng)?;
    let pairs = batch
        .groups
        .iter()
        .map(|g| meiosis_traced(g, c, kind, rng).map(|o| (o.group_a, o.group_b)))
        .collect::<Result<_>>()?;
    Ok(AugmentedBatch {
        pairs,
        split_position: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(values: Vec<f32>, n_channels: usize, subject: u32) -> EegSample {
        let m = values.len() / n_channels;
        EegSample::new(n_channels, m, values, 0, SubjectTag::Single(subject)).unwrap()
    }

    #[test]
    fn four_point_crossover() {
        let a = sample(vec![1.0, 2.0, 3.0, 4.0], 1, 0);
        let b = sample(vec![11.0, 12.0, 13.0, 14.0], 1, 1);
        let (xa, xb) = crossover(&a, &b, 2).unwrap();
        assert_eq!(xa.values, vec![11.0, 12.0, 3.0, 4.0]);
        assert_eq!(xb.values, vec![1.0, 2.0, 13.0, 14.0]);
        assert_eq!(xa.subject, SubjectTag::Crossed { prefix: 1, suffix: 0 });
        assert_eq!(xb.subject, SubjectTag::Crossed { prefix: 0, suffix: 1 });
    }

    #[test]
    fn crossover_swaps_every_channel_row() {
        let a = sample((0..12).map(|v| v as f32).collect(), 2, 0);
        let b = sample((100..112).map(|v| v as f32).collect(), 2, 1);
        let (xa, _) = crossover(&a, &b, 3).unwrap();
        assert_eq!(xa.time_slice(2), b.time_slice(2));
        assert_eq!(xa.time_slice(3), a.time_slice(3));
    }

    #[test]
    fn crossover_twice_restores_tags_too() {
        let a = sample(vec![1.0; 8], 1, 4);
        let b = sample(vec![2.0; 8], 1, 7);
        let (xa, xb) = crossover(&a, &b, 3).unwrap();
        let (ya, yb) = crossover(&xa, &xb, 3).unwrap();
        assert_eq!((ya, yb), (a, b));
    }

    #[test]
    fn split_position_bounds() {
        let a = sample(vec![0.0; 6], 1, 0);
        for bad in [0, 1, 5, 6] {
            assert!(crossover(&a, &a, bad).is_err(), "c = {bad}");
        }
        assert!(crossover(&a, &a, 2).is_ok() && crossover(&a, &a, 4).is_ok());
        let short = sample(vec![0.0; 5], 1, 0);
        assert!(crossover(&a, &short, 2).is_err());
    }

    #[test]
    fn split_positions_cover_interior() {
        let mut rng = SeededRng::new(1);
        let mut seen = [false; 9];
        for _ in 0..500 {
            seen[draw_split_position(8, &mut rng).unwrap()] = true;
        }
        assert_eq!(seen, [false, false, true, true, true, true, true, false, false]);
    }

    #[test]
    fn single_pair_outputs_are_the_two_products() {
        let a = sample(vec![1.0, 2.0, 3.0, 4.0], 1, 0);
        let b = sample(vec![5.0, 6.0, 7.0, 8.0], 1, 1);
        let (ga, gb) = meiosis(&[a.clone(), b.clone()], 2, &mut SeededRng::new(0)).unwrap();
        let (xa, xb) = crossover(&a, &b, 2).unwrap();
        let mut got = vec![ga[0].values.clone(), gb[0].values.clone()];
        let mut want = vec![xa.values, xb.values];
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn odd_group_rejected() {
        let a = sample(vec![0.0; 4], 1, 0);
        assert!(meiosis(&[a.clone(), a.clone(), a], 2, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn mixup_identities() {
        let a = sample(vec![1.0, -2.0, 3.0, 0.5], 1, 0);
        let b = sample(vec![4.0, 5.0, -6.0, 2.5], 1, 1);
        let (xa, xb) = mixup_crossover(&a, &b, 1.0).unwrap();
        assert_eq!((xa.values, xb.values), (a.values.clone(), b.values.clone()));
        let (xa, xb) = mixup_crossover(&a, &b, 0.5).unwrap();
        assert_eq!(xa.values, xb.values);
        assert_eq!(xa.values, vec![2.5, 1.5, -1.5, 1.5]);
        let (xa, xb) = mixup_crossover(&a, &b, 0.3).unwrap();
        for i in 0..4 {
            assert!((xa.values[i] + xb.values[i] - a.values[i] - b.values[i]).abs() < 1e-6);
        }
        assert!(mixup_crossover(&a, &b, 1.5).is_err());
    }

    #[test]
    fn separation_only_keeps_windows() {
        let group: Vec<_> = (0..4).map(|s| sample(vec![s as f32; 4], 1, s)).collect();
        let out = meiosis_traced(&group, 0, AugmentKind::None, &mut SeededRng::new(3)).unwrap();
        for (k, &(i, j)) in out.pairs.iter().enumerate() {
            assert_eq!(out.group_a[k], group[i]);
            assert_eq!(out.group_b[k], group[j]);
        }
    }

    #[test]
    fn augment_kind_names_round_trip() {
        for k in [AugmentKind::Crossover, AugmentKind::None, AugmentKind::Mixup] {
            assert_eq!(k.name().parse::<AugmentKind>().unwrap(), k);
        }
        assert!("cutmix".parse::<AugmentKind>().is_err());
    }
}
