//! Group contrastive pre-training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::loss::{cross_retrieval_accuracy, retrieval_accuracy, LossConfig, NtXent};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::grouping::{
    meiosis_batch, sample_minibatch, AugmentKind, AugmentedBatch, EpochState, GroupBatch, SamplerConfig,
};
use crate::network::{encode, project_groups, samples_to_tensor, Checkpoint, Forward, Model, Trace};
use crate::numerics::{AdamConfig, AdamState, NodeId, Op, Scalar, Tensor};
use crate::rng::{RngState, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub sampler: SamplerConfig,
    #[serde(default = "crossover")]
    pub augment: AugmentKind,
    #[serde(default)]
    pub loss: LossConfig,
    pub lr: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Measure held-out stimulus retrieval every this many epochs (0: only
    /// after the last epoch).
    #[serde(default)]
    pub eval_every: usize,
    /// Random batches per stimulus-retrieval measurement.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn crossover() -> AugmentKind {
    AugmentKind::Crossover
}

fn default_eval_batches() -> usize {
    64
}

impl PretrainConfig {
    /// Checks that do not depend on the corpus.
    pub fn validate_standalone(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("pre-training needs at least one epoch"));
        }
        self.sampler.validate(usize::MAX)?;
        self.loss.validate()?;
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        self.validate_standalone()?;
        self.sampler.validate(corpus.n_subjects())?;
        if corpus.clips_in(Split::Train).is_empty() {
            return Err(Error::contract("corpus has no training clips"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub groups: usize,
    pub loss: f64,
    /// `None` for single-group batches, where retrieval is undefined.
    pub acc_pre: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Retrieval accuracy over the epoch's training batches, weighted by
    /// anchors.
    pub acc_pre: f64,
    /// Retrieval accuracy on validation batches, when measured.
    pub val_acc_pre: Option<f64>,
    /// [`stimulus_retrieval`] on the validation clips, when measured.
    pub val_stimulus: Option<f64>,
}

/// Per-iteration and per-epoch pre-training records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

impl RunLog {
    pub fn final_acc_pre(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.acc_pre)
    }

    pub fn last_val_acc_pre(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_acc_pre)
    }

    pub fn last_val_stimulus(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_stimulus)
    }

    /// Line-oriented text: one `iteration` line per step and one `epoch`
    /// line per epoch, in order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut it = self.iterations.iter().peekable();
        for e in &self.epochs {
            while let Some(r) = it.next_if(|r| r.epoch <= e.epoch) {
                let _ = writeln!(
                    s,
                    "iteration={} epoch={} groups={} loss={} acc_pre={}",
                    r.iteration,
                    r.epoch,
                    r.groups,
                    r.loss,
                    opt(r.acc_pre)
                );
            }
            let _ = writeln!(
                s,
                "epoch={} loss={} acc_pre={} val_acc_pre={} val_stimulus={}",
                e.epoch,
                e.loss,
                e.acc_pre,
                opt(e.val_acc_pre),
                opt(e.val_stimulus)
            );
        }
        s
    }
}

/// Builds the encoder input for an augmented batch: every A-side window,
/// then every B-side window.
fn augmented_input<T: Scalar>(aug: &AugmentedBatch) -> Result<(Tensor<T>, usize, usize)> {
    let p = aug.pairs.len();
    let q = aug.pairs.first().map_or(0, |(a, _)| a.len());
    Ok((samples_to_tensor(aug.samples_a_then_b())?, p, q))
}

/// Encoder, projector and group NT-Xent on an augmented batch. Returns the
/// trace, the `[2P, H]` group representations and the loss node.
pub fn contrastive_forward<T: Scalar>(
    model: &Model<T>,
    aug: &AugmentedBatch,
    loss: &LossConfig,
    train: bool,
    dropout_seed: u64,
) -> Result<(Trace<T>, NodeId, NodeId)> {
    let (x, _, q) = augmented_input(aug)?;
    let mut f = Forward::new(&model.store, train, dropout_seed);
    let xi = f.input(x);
    let h = encode(&mut f, &model.config.encoder, xi)?;
    let z = project_groups(&mut f, &model.config.projector, h, q)?;
    let op = NtXent {
        temperature: loss.temperature,
    };
    let l = f.apply(Op::Custom(Arc::new(op)), &[z])?;
    Ok((f.finish(), z, l))
}

/// Eval-mode group representations `[2P, H]` for an augmented batch.
pub fn group_representations(model: &Model, aug: &AugmentedBatch) -> Result<Tensor<f32>> {
    let (x, _, q) = augmented_input(aug)?;
    let mut f = Forward::new(&model.store, false, 0);
    let xi = f.input(x);
    let h = encode(&mut f, &model.config.encoder, xi)?;
    let z = project_groups(&mut f, &model.config.projector, h, q)?;
    Ok(f.value(z).clone())
}

/// [`retrieval_accuracy`] on random stimulus-consistent batches of `split`
/// clips, augmented with `augment` as in training. `P' = min(P, clips in
/// split)`.
pub fn heldout_acc_pre(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    sampler: &SamplerConfig,
    augment: AugmentKind,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    let clips = corpus.clips_in(split);
    let p = sampler.p.min(clips.len());
    if p < 2 {
        return Err(Error::contract(format!("held-out retrieval needs two {split} clips, found {}", clips.len())));
    }
    let config = SamplerConfig {
        p,
        consistent: true,
        ..sampler.clone()
    };
    let mut rng = SeededRng::new(seed).substream("heldout");
    let mut hits = 0.0;
    for _ in 0..batches.max(1) {
        let mut state = EpochState::new(&clips, &mut rng);
        let batch = sample_minibatch(corpus, &config, &mut state, &mut rng)?
            .ok_or_else(|| Error::contract("held-out batch came back empty"))?;
        let aug = meiosis_batch(&batch, augment, &mut rng)?;
        hits += retrieval_accuracy(&group_representations(model, &aug)?)?;
    }
    Ok(hits / batches.max(1) as f64)
}

/// Stimulus retrieval over clips of `split`: every trial takes `p` distinct
/// clips, or all of them when `p` is `None`, and draws `2Q` distinct
/// subjects. Every clip's A group holds the first `Q` subjects and its B
/// group the last `Q`, so subject identity is the same for all candidates
/// and only stimulus content can single out the partner. Scored with
/// [`cross_retrieval_accuracy`] in eval mode. Returns the mean accuracy and
/// the chance level `1 / P'` for `P'` clips per trial.
pub fn stimulus_retrieval(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    p: Option<usize>,
    q: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let clips = corpus.clips_in(split);
    let per_trial = p.map_or(clips.len(), |p| p.min(clips.len()));
    if per_trial < 2 {
        return Err(Error::contract(format!(
            "stimulus retrieval needs two {split} clips per trial, found {}",
            clips.len()
        )));
    }
    if q == 0 || 2 * q > corpus.n_subjects() {
        return Err(Error::config(format!("stimulus retrieval with Q={q} needs 2Q <= {} subjects", corpus.n_subjects())));
    }
    let mut rng = SeededRng::new(seed).substream("retrieval");
    let mut hits = 0.0;
    for _ in 0..trials.max(1) {
        let chosen: Vec<usize> = if per_trial == clips.len() {
            clips.clone()
        } else {
            rng.choose_distinct(clips.len(), per_trial).into_iter().map(|i| clips[i]).collect()
        };
        let subjects = rng.choose_distinct(corpus.n_subjects(), 2 * q);
        let (sa, sb) = subjects.split_at(q);
        let pairs = chosen
            .iter()
            .map(|&c| {
                (
                    sa.iter().map(|&s| corpus.sample(c, s)).collect(),
                    sb.iter().map(|&s| corpus.sample(c, s)).collect(),
                )
            })
            .collect();
        let aug = AugmentedBatch {
            pairs,
            split_position: 0,
        };
        hits += cross_retrieval_accuracy(&group_representations(model, &aug)?)?;
    }
    Ok((hits / trials.max(1) as f64, 1.0 / per_trial as f64))
}

/// Loop state. Checkpoints are taken at epoch boundaries, so the sampler
/// and augmenter stream positions plus the optimizer fully determine the
/// continuation.
pub struct Pretrainer<'c> {
    corpus: &'c Corpus,
    config: PretrainConfig,
    pub model: Model,
    adam: AdamState,
    sampler_rng: SeededRng,
    augment_rng: SeededRng,
    root: SeededRng,
    pub log: RunLog,
    epoch: usize,
    iteration: usize,
    train_clips: Vec<usize>,
}

fn parse_state<T: std::str::FromStr>(state: &BTreeMap<String, String>, key: &str) -> Result<T> {
    state
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(0, format!("checkpoint state lacks a valid {key:?}")))
}

fn rng_state_text(name: &str, s: RngState) -> String {
    format!("{name}.seed={}\n{name}.stream={}\n{name}.word_pos={}\n", s.seed, s.stream, s.word_pos)
}

fn rng_from_state(state: &BTreeMap<String, String>, name: &str) -> Result<SeededRng> {
    Ok(SeededRng::from_state(RngState {
        seed: parse_state(state, &format!("{name}.seed"))?,
        stream: parse_state(state, &format!("{name}.stream"))?,
        word_pos: parse_state(state, &format!("{name}.word_pos"))?,
    }))
}

impl<'c> Pretrainer<'c> {
    pub fn new(corpus: &'c Corpus, config: PretrainConfig, model: Model) -> Result<Self> {
        config.validate(corpus)?;
        let root = SeededRng::new(config.seed);
        Ok(Self {
            corpus,
            adam: AdamState::new(AdamConfig::with_lr(config.lr))?,
            sampler_rng: root.substream("sampler"),
            augment_rng: root.substream("augment"),
            root,
            model,
            log: RunLog::default(),
            epoch: 0,
            iteration: 0,
            train_clips: corpus.clips_in(Split::Train),
            config,
        })
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`].
    /// The log restarts empty; records continue the epoch and iteration
    /// numbering.
    pub fn resume(corpus: &'c Corpus, config: PretrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let (model, moments) = Model::from_checkpoint(ckpt)?;
        let state = ckpt.state();
        let seed: u64 = parse_state(&state, "seed")?;
        if seed != config.seed {
            return Err(Error::config(format!("checkpoint was written with seed {seed}, config has {}", config.seed)));
        }
        let mut t = Self::new(corpus, config, model)?;
        t.epoch = parse_state(&state, "epoch")?;
        t.iteration = parse_state(&state, "iteration")?;
        t.adam.t = parse_state(&state, "adam.t")?;
        for (name, mo) in moments {
            t.adam.insert_moments(name, mo);
        }
        t.sampler_rng = rng_from_state(&state, "sampler")?;
        t.augment_rng = rng_from_state(&state, "augment")?;
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = format!(
            "seed={}\nepoch={}\niteration={}\nadam.t={}\n",
            self.config.seed, self.epoch, self.iteration, self.adam.t
        );
        state.push_str(&rng_state_text("sampler", self.sampler_rng.state()));
        state.push_str(&rng_state_text("augment", self.augment_rng.state()));
        self.model.to_checkpoint(state, Some(self.adam.moments()))
    }

    /// One optimizer step on a sampled batch. Returns the iteration record.
    fn step(&mut self, batch: &GroupBatch) -> Result<IterationRecord> {
        let aug = meiosis_batch(batch, self.config.augment, &mut self.augment_rng)?;
        let p = aug.pairs.len();
        let dropout_seed = self.root.substream_indexed("dropout", self.iteration as u64).next_u64();
        let (trace, z, loss) = contrastive_forward(&self.model, &aug, &self.config.loss, true, dropout_seed)?;
        let value = f64::from(trace.graph.value(loss).item());
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                value,
            });
        }
        let acc_pre = if p >= 2 {
            Some(retrieval_accuracy(trace.graph.value(z))?)
        } else {
            None
        };
        let grads = trace.gradients(loss)?;
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                value: f64::NAN,
            });
        }
        self.model.store.adam_step(&mut self.adam, &grads)?;
        trace.update_running_stats(&mut self.model.store)?;
        let rec = IterationRecord {
            epoch: self.epoch,
            iteration: self.iteration,
            groups: p,
            loss: value,
            acc_pre,
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// Runs one epoch over the training clips.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut state = EpochState::new(&self.train_clips, &mut self.sampler_rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        let (mut hits, mut anchors) = (0.0, 0usize);
        while !state.is_exhausted() {
            let Some(batch) = sample_minibatch(self.corpus, &self.config.sampler, &mut state, &mut self.sampler_rng)?
            else {
                continue;
            };
            let rec = self.step(&batch)?;
            loss_sum += rec.loss;
            steps += 1;
            if let Some(a) = rec.acc_pre {
                hits += a * (2 * rec.groups) as f64;
                anchors += 2 * rec.groups;
            }
            self.log.iterations.push(rec);
        }
        if steps == 0 {
            return Err(Error::contract("an epoch produced no batches; need at least two training clips"));
        }
        self.epoch += 1;
        let last = self.epoch == self.config.epochs;
        let due = self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0;
        let (val_acc_pre, val_stimulus) = if (last || due) && self.corpus.clips_in(Split::Val).len() >= 2 {
            let seed = self.root.substream_indexed("eval", self.epoch as u64).next_u64();
            let sampler = &self.config.sampler;
            let acc = heldout_acc_pre(
                &self.model,
                self.corpus,
                Split::Val,
                sampler,
                self.config.augment,
                self.config.eval_batches,
                seed,
            )?;
            let (stim, _) = stimulus_retrieval(&self.model, self.corpus, Split::Val, None, sampler.q, self.config.eval_batches, seed)?;
            (Some(acc), Some(stim))
        } else {
            (None, None)
        };
        let rec = EpochRecord {
            epoch: self.epoch - 1,
            loss: loss_sum / steps as f64,
            acc_pre: if anchors == 0 { 0.0 } else { hits / anchors as f64 },
            val_acc_pre,
            val_stimulus,
        };
        self.log.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs, writing `checkpoint_epoch{N}.ckpt` files
    /// and `final.ckpt` into `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint().write(&dir.join(format!("checkpoint_epoch{}.ckpt", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().write(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Fresh pre-training run to completion.
pub fn pretrain(corpus: &Corpus, config: &PretrainConfig, model: Model) -> Result<(Model, RunLog)> {
    let mut t = Pretrainer::new(corpus, config.clone(), model)?;
    t.run(None)?;
    Ok((t.model, t.log))
}
