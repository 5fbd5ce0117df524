use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sgmc::config::RunConfig;

fn sgmc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgmc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run sgmc")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// The desk profile cut down to a few quick epochs.
fn quick_config(dir: &Path) -> String {
    let mut run = RunConfig::profile("desk").unwrap();
    run.pretrain.epochs = 4;
    run.pretrain.checkpoint_every = 2;
    run.pretrain.eval_every = 2;
    run.finetune.epochs = 2;
    run.finetune.n_runs = 2;
    let path = dir.join("quick.toml");
    fs::write(&path, run.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = sgmc(&["gen-data"], d);
        assert!(o.status.success(), "{}", text(&o));
        assert!(text(&o).contains("clips=32 subjects=8"), "{}", text(&o));
    }
    for f in ["corpus.sgmc", "corpus.meta"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = sgmc(&["gen-data", "--seed", "2"], &b);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("corpus.sgmc")).unwrap(), fs::read(b.join("corpus.sgmc")).unwrap());
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunConfig::profile("desk").unwrap();
    run.synthetic.n_clips = 0;
    let path = dir.path().join("bad.toml");
    fs::write(&path, run.to_text()).unwrap();
    let o = sgmc(&["gen-data", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    fs::write(&path, "seed = 1\n[pretrain]\nwarmup = 3\n").unwrap();
    let o = sgmc(&["pretrain", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let o = sgmc(&["pretrain", "--variant", "partial"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let o = sgmc(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_names_a_corrupted_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgmc(&["gradcheck", "--cases", "10"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(!text(&o).contains("failed primitives"), "{}", text(&o));

    let o = sgmc(&["gradcheck", "--cases", "10", "--corrupt", "linear"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("primitive=linear") && out.contains("FAIL"), "{out}");
    assert!(out.contains("failed primitives: linear"), "{out}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let (full, resumed) = (dir.path().join("full"), dir.path().join("resumed"));
    let o = sgmc(&["gen-data", "--config", &config], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let corpus = dir.path().join("corpus.sgmc");
    let corpus = corpus.to_str().unwrap();

    let o = sgmc(&["pretrain", "--config", &config, "--corpus", corpus], &full);
    assert!(o.status.success(), "{}", text(&o));
    let mid = full.join("checkpoint_epoch2.ckpt");
    assert!(mid.exists());

    let o = sgmc(
        &["pretrain", "--config", &config, "--corpus", corpus, "--resume", mid.to_str().unwrap()],
        &resumed,
    );
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
    let log_full = fs::read_to_string(full.join("pretrain_log.txt")).unwrap();
    let log_resumed = fs::read_to_string(resumed.join("pretrain_log.txt")).unwrap();
    let tail = |s: &str| s.lines().filter(|l| l.starts_with("epoch=3 ")).map(String::from).collect::<Vec<_>>();
    assert!(!tail(&log_full).is_empty(), "{log_full}");
    assert_eq!(tail(&log_full), tail(&log_resumed));

    let o = sgmc(&["select", "--config", &config, "--corpus", corpus], &full);
    assert!(o.status.success(), "{}", text(&o));
    let selection = fs::read_to_string(full.join("selection.txt")).unwrap();
    assert!(selection.starts_with("selected="), "{selection}");
    assert_eq!(selection.lines().filter(|l| l.starts_with("candidate=")).count(), 3, "{selection}");
    assert!(full.join("selected.ckpt").exists());

    let o = sgmc(&["finetune", "--config", &config, "--corpus", corpus], &full);
    assert!(o.status.success(), "{}", text(&o));
    let summary = fs::read_to_string(full.join("finetune_summary.txt")).unwrap();
    assert!(summary.starts_with("mean="), "{summary}");
    let o = sgmc(&["eval", "--config", &config, "--corpus", corpus, "--split", "val"], &full);
    assert!(o.status.success(), "{}", text(&o));
    assert!(full.join("eval_val.txt").exists());
}
