//! Supervised fine-tuning of the encoder with a fresh classifier.

use serde::{Deserialize, Serialize};

use super::metrics::{mean_sd, ConfusionMatrix};
use crate::corpus::{Corpus, EegSample, Split};
use crate::error::{Error, Result};
use crate::network::{classify, encode, samples_to_tensor, ClassifierConfig, Forward, Model};
use crate::numerics::{AdamConfig, AdamState, Op};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Labelled training windows kept per class; all when unset.
    #[serde(default)]
    pub labels_per_class: Option<usize>,
    #[serde(default = "five")]
    pub n_runs: usize,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "half")]
    pub dropout: f64,
}

fn five() -> usize {
    5
}

fn default_hidden() -> Vec<usize> {
    vec![512, 256, 128]
}

fn half() -> f64 {
    0.5
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_runs == 0 {
            return Err(Error::config("fine-tuning epochs, batch_size and n_runs must be positive"));
        }
        if self.labels_per_class == Some(0) {
            return Err(Error::config("labels_per_class must be at least 1"));
        }
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn classifier(&self, n_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            hidden: self.classifier_hidden.clone(),
            n_classes,
            dropout: self.dropout,
        }
    }

    /// Seed of run `r`.
    pub fn run_seed(&self, run: usize) -> u64 {
        SeededRng::new(self.seed).substream_indexed("finetune.run", run as u64).next_u64()
    }
}

/// Every (clip, subject) window of the clips in `split`, with its label.
pub fn labelled_windows(corpus: &Corpus, split: Split) -> Result<(Vec<EegSample>, Vec<usize>)> {
    let labels = corpus
        .labels()
        .ok_or_else(|| Error::contract("corpus has no labels"))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for clip in corpus.clips_in(split) {
        for s in 0..corpus.n_subjects() {
            xs.push(corpus.sample(clip, s));
            ys.push(labels[clip] as usize);
        }
    }
    Ok((xs, ys))
}

/// Exactly `per_class` window indices of every class, drawn without
/// replacement.
pub fn subsample_per_class(labels: &[usize], n_classes: usize, per_class: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let mut keep = Vec::with_capacity(per_class * n_classes);
    for class in 0..n_classes {
        let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if pool.len() < per_class {
            return Err(Error::contract(format!(
                "class {class} has {} training windows, fewer than the {per_class} requested",
                pool.len()
            )));
        }
        keep.extend(rng.choose_distinct(pool.len(), per_class).into_iter().map(|i| pool[i]));
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Eval-mode classification of every window in `split`.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split) -> Result<Evaluation> {
    let (xs, ys) = labelled_windows(corpus, split)?;
    if xs.is_empty() {
        return Err(Error::contract(format!("{split} split is empty")));
    }
    let k = model
        .config
        .classifier
        .as_ref()
        .ok_or_else(|| Error::contract("model has no classifier"))?
        .n_classes;
    let predicted = model.predict(&xs)?;
    let confusion = ConfusionMatrix::from_predictions(k, &ys, &predicted)?;
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub train_windows: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub runs: Vec<RunResult>,
    /// Mean and spread of test accuracy.
    pub mean: f64,
    pub sd: f64,
    /// Mean validation accuracy, when the corpus has a validation split.
    pub val_mean: Option<f64>,
    /// Index of the run with the highest validation accuracy (first on
    /// ties, run 0 without a validation split).
    pub best_run: usize,
}

impl FinetuneReport {
    pub fn best(&self) -> &RunResult {
        &self.runs[self.best_run]
    }
}

/// Trains a copy of `base` plus a fresh classifier on the labelled
/// training windows. Returns the tuned model and its run record.
pub fn finetune_once(base: &Model, corpus: &Corpus, config: &FinetuneConfig, run: usize) -> Result<(Model, RunResult)> {
    config.validate()?;
    let n_classes = corpus.n_classes();
    let (xs, ys) = labelled_windows(corpus, Split::Train)?;
    for class in 0..n_classes {
        if !ys.contains(&class) {
            return Err(Error::contract(format!("class {class} is absent from the training labels")));
        }
    }
    let seed = config.run_seed(run);
    let root = SeededRng::new(seed);
    let keep: Vec<usize> = match config.labels_per_class {
        Some(n) => subsample_per_class(&ys, n_classes, n, &mut root.substream("subsample"))?,
        None => (0..xs.len()).collect(),
    };
    let mut model = base.clone();
    model.attach_classifier(config.classifier(n_classes), seed)?;
    let cc = model.config.classifier.clone().expect("classifier attached");
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr))?;
    let mut order_rng = root.substream("order");
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for _ in 0..config.epochs {
        let mut order = keep.clone();
        order_rng.shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            // A single row has no batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let x = samples_to_tensor(chunk.iter().map(|&i| &xs[i]))?;
            let targets: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let dropout_seed = root.substream_indexed("dropout", step).next_u64();
            step += 1;
            let mut f = Forward::new(&model.store, true, dropout_seed);
            let xi = f.input(x);
            let h = encode(&mut f, &model.config.encoder, xi)?;
            let logits = classify(&mut f, &cc, h)?;
            let loss = f.apply(Op::SoftmaxCrossEntropy { targets }, &[logits])?;
            let trace = f.finish();
            let value = f64::from(trace.graph.value(loss).item());
            if !value.is_finite() {
                return Err(Error::Divergence {
                    iteration: step as usize - 1,
                    value,
                });
            }
            let grads = trace.gradients(loss)?;
            model.store.adam_step(&mut adam, &grads)?;
            trace.update_running_stats(&mut model.store)?;
            sum += value;
            batches += 1;
        }
        losses.push(if batches == 0 { f64::NAN } else { sum / batches as f64 });
    }
    let val_accuracy = if corpus.clips_in(Split::Val).is_empty() {
        None
    } else {
        Some(evaluate(&model, corpus, Split::Val)?.accuracy)
    };
    let test = evaluate(&model, corpus, Split::Test)?;
    Ok((
        model,
        RunResult {
            seed,
            train_windows: keep.len(),
            losses,
            val_accuracy,
            test,
        },
    ))
}

/// `n_runs` independent fine-tuning runs from the same starting encoder.
pub fn finetune(base: &Model, corpus: &Corpus, config: &FinetuneConfig) -> Result<FinetuneReport> {
    Ok(finetune_keep_best(base, corpus, config)?.0)
}

/// [`finetune`] that also returns the model of the best run.
pub fn finetune_keep_best(base: &Model, corpus: &Corpus, config: &FinetuneConfig) -> Result<(FinetuneReport, Model)> {
    config.validate()?;
    let score = |r: &RunResult| r.val_accuracy.unwrap_or(f64::NEG_INFINITY);
    let mut runs = Vec::with_capacity(config.n_runs);
    let mut best: Option<Model> = None;
    for r in 0..config.n_runs {
        let (model, run) = finetune_once(base, corpus, config, r)?;
        if runs.iter().all(|b: &RunResult| score(&run) > score(b)) {
            best = Some(model);
        }
        runs.push(run);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let (mean, sd) = mean_sd(&accs);
    let vals: Option<Vec<f64>> = runs.iter().map(|r| r.val_accuracy).collect();
    let val_mean = vals.map(|v| mean_sd(&v).0);
    let best_run = (1..runs.len()).fold(0, |b, i| if score(&runs[i]) > score(&runs[b]) { i } else { b });
    let report = FinetuneReport {
        runs,
        mean,
        sd,
        val_mean,
        best_run,
    };
    Ok((report, best.expect("at least one run")))
}

/// Mean fine-tune accuracies of one candidate pre-training checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScore {
    pub name: String,
    pub val_mean: f64,
    pub test_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSelection {
    pub scores: Vec<CandidateScore>,
    /// Index of the candidate with the best mean validation accuracy (first
    /// on ties).
    pub best: usize,
}

impl CheckpointSelection {
    pub fn to_text(&self) -> String {
        let mut s = format!("selected={}\n", self.scores[self.best].name);
        for c in &self.scores {
            s += &format!("candidate={} val_mean={} test_mean={}\n", c.name, c.val_mean, c.test_mean);
        }
        s
    }
}

/// Fine-tunes every candidate encoder and picks the one with the best mean
/// validation accuracy.
pub fn select_checkpoint(corpus: &Corpus, candidates: &[(String, Model)], config: &FinetuneConfig) -> Result<CheckpointSelection> {
    if candidates.is_empty() {
        return Err(Error::contract("checkpoint selection needs at least one candidate"));
    }
    if corpus.clips_in(Split::Val).is_empty() {
        return Err(Error::contract("checkpoint selection needs a validation split"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (name, model) in candidates {
        let report = finetune(model, corpus, config)?;
        scores.push(CandidateScore {
            name: name.clone(),
            val_mean: report.val_mean.unwrap_or(f64::NAN),
            test_mean: report.mean,
        });
    }
    let best = (1..scores.len()).fold(0, |b, i| if scores[i].val_mean > scores[b].val_mean { i } else { b });
    Ok(CheckpointSelection { scores, best })
}

impl FinetuneReport {
    /// Mean, spread, per-run accuracies and the best run's confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mean={} sd={} val_mean={} best_run={}\n",
            self.mean,
            self.sd,
            self.val_mean.map_or_else(|| "na".to_string(), |v| v.to_string()),
            self.best_run
        );
        for (i, r) in self.runs.iter().enumerate() {
            s += &format!(
                "run={i} seed={} train_windows={} test_accuracy={} val_accuracy={}\n",
                r.seed,
                r.train_windows,
                r.test.accuracy,
                r.val_accuracy.map_or_else(|| "na".to_string(), |v| v.to_string())
            );
        }
        s += "confusion\n";
        s += &self.best().test.confusion.to_text();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_takes_exact_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let keep = subsample_per_class(&labels, 3, 7, &mut SeededRng::new(1)).unwrap();
        for c in 0..3 {
            assert_eq!(keep.iter().filter(|&&i| labels[i] == c).count(), 7);
        }
        let again = subsample_per_class(&labels, 3, 7, &mut SeededRng::new(1)).unwrap();
        assert_eq!(keep, again);
        assert!(subsample_per_class(&labels, 3, 40, &mut SeededRng::new(1)).is_err());
    }
}
