//! Ablation variants and the P/Q sweep.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::finetune::{finetune, FinetuneConfig};
use super::pretrain::{pretrain, stimulus_retrieval, PretrainConfig};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::grouping::AugmentKind;
use crate::network::{Model, ModelConfig};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Complete,
    NonGroup,
    NonAugment,
    MixupAugment,
    NonConsistent,
    ConsistentOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Complete,
        Variant::NonGroup,
        Variant::NonAugment,
        Variant::MixupAugment,
        Variant::NonConsistent,
        Variant::ConsistentOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Complete => "complete",
            Variant::NonGroup => "non-group",
            Variant::NonAugment => "non-augment",
            Variant::MixupAugment => "mixup-augment",
            Variant::NonConsistent => "non-consistent",
            Variant::ConsistentOnly => "consistent-only",
        }
    }

    /// The pre-training recipe of this variant derived from `base`.
    pub fn apply(self, base: &PretrainConfig) -> PretrainConfig {
        let mut c = base.clone();
        c.sampler.consistent = true;
        c.augment = AugmentKind::Crossover;
        match self {
            Variant::Complete => {}
            Variant::NonGroup => c.sampler.q = 1,
            Variant::NonAugment => c.augment = AugmentKind::None,
            Variant::MixupAugment => c.augment = AugmentKind::Mixup,
            Variant::NonConsistent => c.sampler.consistent = false,
            Variant::ConsistentOnly => {
                c.sampler.q = 1;
                c.augment = AugmentKind::None;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub q: usize,
    pub augment: AugmentKind,
    pub consistent: bool,
    /// Final-epoch retrieval accuracy on training batches.
    pub acc_pre: f64,
    pub val_acc_pre: Option<f64>,
    /// Stimulus retrieval on training clips, `P` clips per trial, and its
    /// chance level `1 / P`.
    pub stimulus: f64,
    pub chance: f64,
    /// Stimulus retrieval over all validation clips and its chance level.
    pub val_stimulus: f64,
    pub val_chance: f64,
    pub finetune_mean: f64,
    pub finetune_sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("variant q augment consistent acc_pre val_acc_pre stimulus chance val_stimulus val_chance finetune_mean finetune_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} {} {} {} {:.4} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
                r.variant,
                r.q,
                r.augment,
                r.consistent,
                r.acc_pre,
                opt(r.val_acc_pre),
                r.stimulus,
                r.chance,
                r.val_stimulus,
                r.val_chance,
                r.finetune_mean,
                r.finetune_sd
            );
        }
        s
    }
}

/// Pre-trains and fine-tunes one model per variant from the same seed. The
/// stimulus probes use the base `P` and `Q` and the same trials for every
/// variant.
pub fn run_ablation(
    corpus: &Corpus,
    model: &ModelConfig,
    base: &PretrainConfig,
    tune: &FinetuneConfig,
    variants: &[Variant],
    probe_trials: usize,
) -> Result<AblationTable> {
    let probe_seed = SeededRng::new(base.seed).substream("probe").next_u64();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = variant.apply(base);
        let (trained, log) = pretrain(corpus, &config, Model::new(model.clone(), base.seed)?)?;
        let (p, q) = (base.sampler.p, base.sampler.q);
        let (stimulus, chance) = stimulus_retrieval(&trained, corpus, Split::Train, Some(p), q, probe_trials, probe_seed)?;
        let (val_stimulus, val_chance) =
            stimulus_retrieval(&trained, corpus, Split::Val, None, q, probe_trials, probe_seed)?;
        let report = finetune(&trained, corpus, tune)?;
        rows.push(AblationRow {
            variant,
            q: config.sampler.q,
            augment: config.augment,
            consistent: config.sampler.consistent,
            acc_pre: log.final_acc_pre().unwrap_or(0.0),
            val_acc_pre: log.last_val_acc_pre(),
            stimulus,
            chance,
            val_stimulus,
            val_chance,
            finetune_mean: report.mean,
            finetune_sd: report.sd,
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Done {
        acc_pre: f64,
        val_acc_pre: Option<f64>,
        finetune_mean: f64,
        finetune_sd: f64,
    },
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub q: usize,
    pub p: usize,
    pub outcome: CellOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn to_text(&self) -> String {
        let mut s = String::from("q p acc_pre val_acc_pre finetune_mean finetune_sd note\n");
        for c in &self.cells {
            match &c.outcome {
                CellOutcome::Done {
                    acc_pre,
                    val_acc_pre,
                    finetune_mean,
                    finetune_sd,
                } => {
                    let _ = writeln!(
                        s,
                        "{} {} {acc_pre:.4} {} {finetune_mean:.4} {finetune_sd:.4} -",
                        c.q,
                        c.p,
                        opt(*val_acc_pre)
                    );
                }
                CellOutcome::Skipped(note) => {
                    let _ = writeln!(s, "{} {} na na na na skipped: {note}", c.q, c.p);
                }
            }
        }
        s
    }
}

/// Pre-trains and fine-tunes every `(Q, P)` pair. Cells with `2Q` above the
/// subject count are kept in the grid and marked as skipped.
pub fn sweep_pq(
    corpus: &Corpus,
    model: &ModelConfig,
    base: &PretrainConfig,
    tune: &FinetuneConfig,
    qs: &[usize],
    ps: &[usize],
) -> Result<SweepGrid> {
    if qs.is_empty() || ps.is_empty() {
        return Err(Error::config("sweep needs nonempty P and Q lists"));
    }
    let mut cells = Vec::with_capacity(qs.len() * ps.len());
    for &q in qs {
        for &p in ps {
            let outcome = if 2 * q > corpus.n_subjects() {
                CellOutcome::Skipped(format!("2Q = {} exceeds {} subjects", 2 * q, corpus.n_subjects()))
            } else if p < 2 {
                CellOutcome::Skipped("P must be at least 2".into())
            } else {
                let mut config = base.clone();
                config.sampler.p = p;
                config.sampler.q = q;
                let (trained, log) = pretrain(corpus, &config, Model::new(model.clone(), base.seed)?)?;
                let report = finetune(&trained, corpus, tune)?;
                CellOutcome::Done {
                    acc_pre: log.final_acc_pre().unwrap_or(0.0),
                    val_acc_pre: log.last_val_acc_pre(),
                    finetune_mean: report.mean,
                    finetune_sd: report.sd,
                }
            };
            cells.push(SweepCell { q, p, outcome });
        }
    }
    Ok(SweepGrid { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::SamplerConfig;
    use crate::objective::LossConfig;

    fn base() -> PretrainConfig {
        PretrainConfig {
            epochs: 1,
            sampler: SamplerConfig::new(8, 3),
            augment: AugmentKind::Crossover,
            loss: LossConfig::default(),
            lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            eval_batches: 1,
        }
    }

    #[test]
    fn variants_configure_recipe() {
        let b = base();
        let ng = Variant::NonGroup.apply(&b);
        assert_eq!((ng.sampler.q, ng.augment, ng.sampler.consistent), (1, AugmentKind::Crossover, true));
        let co = Variant::ConsistentOnly.apply(&b);
        assert_eq!((co.sampler.q, co.augment, co.sampler.consistent), (1, AugmentKind::None, true));
        assert_eq!(Variant::Complete.apply(&b), b);
        assert!(!Variant::NonConsistent.apply(&b).sampler.consistent);
        assert_eq!(Variant::MixupAugment.apply(&b).augment, AugmentKind::Mixup);
        assert_eq!(Variant::NonAugment.apply(&b).augment, AugmentKind::None);
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("partial".parse::<Variant>(), Err(Error::Config(_))));
    }
}
