//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 gradient-check failure, 2 configuration or
//! contract error, 3 numerical divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{write_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, Model};
use crate::numerics::{grad_check_suite, GradCheckOptions, PrimitiveKind};
use crate::objective::{
    evaluate, finetune_keep_best, model_grad_check, run_ablation, select_checkpoint, sweep_pq, Pretrainer, Variant,
};

#[derive(Debug, Parser)]
#[command(name = "sgmc", version, about = "Group contrastive pre-training for stimulus-aligned multichannel time series")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Built-in profile: desk, deap-like or seed-like. Used when no
    /// --config is given; defaults to desk.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Corpus file; overrides `[data].path`.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its metadata sidecar.
    GenData,
    /// Pre-train encoder and projector.
    Pretrain {
        /// Ablation variant recipe to pre-train with.
        #[arg(long)]
        variant: Option<String>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune every pre-training checkpoint in OUT and keep the one with
    /// the best mean validation accuracy as OUT/selected.ckpt.
    Select {
        /// Overrides the fine-tuning labels per class.
        #[arg(long)]
        labels_per_class: Option<usize>,
    },
    /// Fine-tune a pre-trained encoder with a fresh classifier.
    Finetune {
        /// Pre-training checkpoint; defaults to OUT/selected.ckpt when it
        /// exists, else OUT/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the fine-tuning labels per class.
        #[arg(long)]
        labels_per_class: Option<usize>,
        /// Start from freshly initialized weights with the same budget.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a fine-tuned checkpoint on one split.
    Eval {
        /// Fine-tuned checkpoint; defaults to OUT/finetune.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Pre-train and fine-tune every ablation variant.
    Ablate {
        /// Restrict to these variants; repeatable.
        #[arg(long)]
        variant: Vec<String>,
        /// Overrides the fine-tuning labels per class.
        #[arg(long)]
        labels_per_class: Option<usize>,
    },
    /// Pre-train and fine-tune over the configured P and Q grid.
    Sweep {
        /// Overrides the fine-tuning labels per class.
        #[arg(long)]
        labels_per_class: Option<usize>,
    },
    /// Finite-difference check of every primitive plus the composed loss.
    Gradcheck {
        /// Random shapes per primitive.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Deliberately corrupt one primitive's backward rule.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match (&cli.config, &cli.profile) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(name)) => RunConfig::profile(name)?,
        (None, None) => RunConfig::profile("desk")?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(path) = &cli.corpus {
        config.data.path = Some(path.clone());
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Wall-clock goes to its own file so the other artifacts stay identical
/// across repeated runs.
fn write_timing(out: &Path, command: &str, start: Instant) -> Result<()> {
    write_text(
        &out.join(format!("{command}.timing")),
        &format!("command={command} seconds={:.3}\n", start.elapsed().as_secs_f64()),
    )
}

fn corpus_summary(corpus: &Corpus) -> String {
    let count = |s| corpus.clips_in(s).len();
    format!(
        "clips={} subjects={} channels={} times={} classes={} train={} val={} test={}",
        corpus.n_clips(),
        corpus.n_subjects(),
        corpus.n_channels(),
        corpus.n_times(),
        corpus.n_classes(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    )
}

/// `checkpoint_epoch{N}.ckpt` files in epoch order, then `final.ckpt`.
fn pretrain_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint_epoch")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            numbered.push((epoch, path));
        }
    }
    numbered.sort();
    let mut paths: Vec<PathBuf> = numbered.into_iter().map(|(_, p)| p).collect();
    let last = dir.join("final.ckpt");
    if last.exists() {
        paths.push(last);
    }
    Ok(paths)
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Command::Gradcheck { cases, corrupt } = &cli.command {
        let seed = cli.seed.unwrap_or(0);
        let corrupt = corrupt
            .as_deref()
            .map(|name| {
                PrimitiveKind::from_name(name).ok_or_else(|| Error::config(format!("unknown primitive {name:?}")))
            })
            .transpose()?;
        let (report, ok) = gradcheck_report(*cases, seed, corrupt)?;
        print!("{report}");
        return Ok(if ok { 0 } else { 1 });
    }

    let config = load_config(cli)?;
    let out = &cli.out;
    create_dir(out)?;
    let start = Instant::now();
    match &cli.command {
        Command::GenData => {
            let corpus = config.generate_corpus()?;
            let path = config.data.path.clone().unwrap_or_else(|| out.join("corpus.sgmc"));
            write_corpus(&corpus, &path)?;
            println!("wrote {} ({})", path.display(), corpus_summary(&corpus));
            write_timing(out, "gen-data", start)?;
        }
        Command::Pretrain { variant, resume } => {
            let corpus = config.load_corpus()?;
            let mut pc = config.pretrain_config();
            if let Some(v) = variant {
                pc = v.parse::<Variant>()?.apply(&pc);
            }
            pc.validate(&corpus)?;
            let mut trainer = match resume {
                Some(path) => Pretrainer::resume(&corpus, pc.clone(), &Checkpoint::read(path)?)?,
                None => Pretrainer::new(&corpus, pc.clone(), Model::new(config.model_config()?, config.seed)?)?,
            };
            write_text(&out.join("config.toml"), &config.to_text())?;
            trainer.run(Some(out))?;
            write_text(&out.join("pretrain_log.txt"), &trainer.log.to_text())?;
            let last = trainer.log.epochs.last().cloned();
            let chance = 1.0 / (2 * pc.sampler.p.min(corpus.clips_in(Split::Train).len()) - 1) as f64;
            let mut summary = format!(
                "epochs={} final_acc_pre={} chance={chance}\n",
                trainer.epochs_done(),
                last.as_ref().map_or(0.0, |e| e.acc_pre)
            );
            if let Some(v) = trainer.log.last_val_acc_pre() {
                let _ = writeln!(summary, "val_acc_pre={v}");
            }
            if let Some(v) = trainer.log.last_val_stimulus() {
                let _ = writeln!(summary, "val_stimulus={v} stimulus_chance={}", 1.0 / corpus.clips_in(Split::Val).len() as f64);
            }
            write_text(&out.join("pretrain_summary.txt"), &summary)?;
            print!("{summary}");
            write_timing(out, "pretrain", start)?;
        }
        Command::Select { labels_per_class } => {
            let corpus = config.load_corpus()?;
            let mut fc = config.finetune_config();
            if labels_per_class.is_some() {
                fc.labels_per_class = *labels_per_class;
            }
            let paths = pretrain_checkpoints(out)?;
            if paths.is_empty() {
                return Err(Error::config(format!("no pre-training checkpoints in {}", out.display())));
            }
            let mut candidates = Vec::with_capacity(paths.len());
            for path in &paths {
                let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                candidates.push((name, Model::from_checkpoint(&Checkpoint::read(path)?)?.0));
            }
            let selection = select_checkpoint(&corpus, &candidates, &fc)?;
            write_text(&out.join("selection.txt"), &selection.to_text())?;
            let chosen = &paths[selection.best];
            fs::copy(chosen, out.join("selected.ckpt")).map_err(|e| Error::io(chosen, e))?;
            print!("{}", selection.to_text());
            write_timing(out, "select", start)?;
        }
        Command::Finetune {
            checkpoint,
            labels_per_class,
            from_scratch,
        } => {
            let corpus = config.load_corpus()?;
            let mut fc = config.finetune_config();
            if labels_per_class.is_some() {
                fc.labels_per_class = *labels_per_class;
            }
            let base = if *from_scratch {
                let seed = crate::rng::SeededRng::new(config.seed).substream("scratch").next_u64();
                Model::new(config.model_config()?, seed)?
            } else {
                let path = checkpoint.clone().unwrap_or_else(|| {
                    let selected = out.join("selected.ckpt");
                    if selected.exists() {
                        selected
                    } else {
                        out.join("final.ckpt")
                    }
                });
                Model::from_checkpoint(&Checkpoint::read(&path)?)?.0
            };
            let (report, best) = finetune_keep_best(&base, &corpus, &fc)?;
            let tag = if *from_scratch { "scratch" } else { "finetune" };
            write_text(&out.join(format!("{tag}_summary.txt")), &report.to_text())?;
            best.to_checkpoint(format!("kind={tag}\n"), None)
                .write(&out.join(format!("{tag}.ckpt")))?;
            println!("test accuracy {:.4} +- {:.4} over {} runs", report.mean, report.sd, report.runs.len());
            print!("{}", report.best().test.confusion.to_text());
            write_timing(out, tag, start)?;
        }
        Command::Eval { checkpoint, split } => {
            let corpus = config.load_corpus()?;
            let split: Split = split.parse()?;
            let path = checkpoint.clone().unwrap_or_else(|| out.join("finetune.ckpt"));
            let (model, _) = Model::from_checkpoint(&Checkpoint::read(&path)?)?;
            let ev = evaluate(&model, &corpus, split)?;
            let text = format!("split={split} accuracy={}\n{}", ev.accuracy, ev.confusion.to_text());
            write_text(&out.join(format!("eval_{split}.txt")), &text)?;
            print!("{text}");
        }
        Command::Ablate {
            variant,
            labels_per_class,
        } => {
            let corpus = config.load_corpus()?;
            let names = if variant.is_empty() { &config.ablation.variants } else { variant };
            let variants = names.iter().map(|n| n.parse()).collect::<Result<Vec<Variant>>>()?;
            let mut fc = config.finetune_config();
            if labels_per_class.is_some() {
                fc.labels_per_class = *labels_per_class;
            }
            let pc = config.pretrain_config();
            pc.validate(&corpus)?;
            let table = run_ablation(
                &corpus,
                &config.model_config()?,
                &pc,
                &fc,
                &variants,
                config.ablation.probe_trials,
            )?;
            write_text(&out.join("ablation.txt"), &table.to_text())?;
            print!("{}", table.to_text());
            write_timing(out, "ablate", start)?;
        }
        Command::Sweep { labels_per_class } => {
            let corpus = config.load_corpus()?;
            let mut fc = config.finetune_config();
            if labels_per_class.is_some() {
                fc.labels_per_class = *labels_per_class;
            }
            let grid = sweep_pq(
                &corpus,
                &config.model_config()?,
                &config.pretrain_config(),
                &fc,
                &config.sweep.q,
                &config.sweep.p,
            )?;
            write_text(&out.join("sweep.txt"), &grid.to_text())?;
            print!("{}", grid.to_text());
            write_timing(out, "sweep", start)?;
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

/// Text report of the primitive suite and the composed-loss check, and
/// whether everything passed.
pub fn gradcheck_report(cases: usize, seed: u64, corrupt: Option<PrimitiveKind>) -> Result<(String, bool)> {
    let rows = grad_check_suite(&PrimitiveKind::ALL, cases, seed, GradCheckOptions { corrupt })?;
    let mut s = String::new();
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        let _ = writeln!(
            s,
            "primitive={} cases={} failed={} max_abs_err={:.3e} max_rel_err={:.3e} {}",
            r.kind.name(),
            r.cases,
            r.failed_cases,
            r.max_abs_err,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let m = model_grad_check(seed, 3)?;
    ok &= m.passed();
    let _ = writeln!(
        s,
        "model checked={} failed={} max_abs_err={:.3e} max_rel_err={:.3e} worst={} {}",
        m.checked,
        m.failures,
        m.max_abs_err,
        m.max_rel_err,
        m.worst,
        if m.passed() { "pass" } else { "FAIL" }
    );
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.kind.name()).collect();
    if !failed.is_empty() {
        let _ = writeln!(s, "failed primitives: {}", failed.join(", "));
    }
    Ok((s, ok))
}
