//! End-to-end runs of the `vidclip` binary on a small corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
corpus.pretrain_per_shape = 8
corpus.train_per_class = 4
corpus.test_per_class = 4
corpus.heldout_test_per_class = 4
pretrain.epochs = 2
finetune.epochs = 2
";

fn vidclip(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidclip")).args(args.iter().map(|a| a.as_ref())).output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("small.cfg"), SMALL).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn inspect_means(path: &Path) -> Vec<(String, f64)> {
    ok(vidclip(&[&"inspect-ckpt", &path]))
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn full_pipeline_is_reproducible() {
    let w = Work::new();
    let cfg = w.p("small.cfg");
    let corpus = w.p("corpus");
    ok(vidclip(&[&"--config", &cfg, &"gen-corpus", &"-o", &corpus]));
    assert!(corpus.join("manifest.tsv").exists());

    ok(vidclip(&[&"--config", &cfg, &"pretrain", &"--corpus", &corpus, &"-o", &w.p("a.ovck")]));
    ok(vidclip(&[&"--config", &cfg, &"caption", &"--corpus", &corpus, &"-o", &w.p("caps.tsv")]));
    let caps = std::fs::read_to_string(w.p("caps.tsv")).unwrap();
    assert!(caps.lines().all(|l| l.split('\t').nth(1).is_some_and(|c| c.starts_with("The video shows"))));

    ok(vidclip(&[
        &"--config", &cfg, &"finetune", &"--corpus", &corpus, &"--init", &w.p("a.ovck"), &"--captions", &w.p("caps.tsv"),
        &"--iwr", &"--gamma", &"4", &"-o", &w.p("b.ovck"), &"--log", &w.p("log.csv"),
    ]));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.p("b.ovck.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["iwr.R"], "0.6");
    assert_eq!(manifest["config"]["iwr.C"], "0.5");
    assert_eq!(manifest["config"]["iwr.gamma"], "4");
    assert_eq!(manifest["config"]["finetune.swa"], "true");
    assert!(manifest["inputs"].as_object().unwrap().len() >= 4);
    assert!(std::fs::read_to_string(w.p("log.csv")).unwrap().starts_with("step,epoch,lr,alpha,loss"));

    // Sweeps are byte-identical across reruns.
    let sweep = |out: &str| {
        ok(vidclip(&[
            &"--config", &cfg, &"sweep", &"--corpus", &corpus, &"--theta-a", &w.p("a.ovck"), &"--tuned", &w.p("b.ovck"),
            &"--lambda-grid", &"0:1:0.1", &"-o", &w.p(out),
        ]));
        std::fs::read(w.p(out)).unwrap()
    };
    let first = sweep("s1.csv");
    assert_eq!(first, sweep("s2.csv"));
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 12, "header plus 11 grid points");

    // Interpolation at one half averages the per-tensor means.
    ok(vidclip(&[&"interp", &w.p("a.ovck"), &w.p("b.ovck"), &"--lambda", &"0.5", &"-o", &w.p("m.ovck")]));
    let (ma, mb, mm) = (inspect_means(&w.p("a.ovck")), inspect_means(&w.p("b.ovck")), inspect_means(&w.p("m.ovck")));
    for ((a, b), m) in ma.iter().zip(&mb).zip(&mm) {
        assert_eq!(a.0, m.0);
        assert!((0.5 * (a.1 + b.1) - m.1).abs() <= 1e-6, "{}: {} vs {}", a.0, 0.5 * (a.1 + b.1), m.1);
    }

    let eval = ok(vidclip(&[&"--config", &cfg, &"eval", &w.p("b.ovck"), &"--corpus", &corpus, &"--split", &"zeroshot", &"--protocol", &"ep1,ep2"]));
    assert!(eval.lines().count() >= 3, "{eval}");
    let retrieval = ok(vidclip(&[
        &"--config", &cfg, &"eval", &w.p("b.ovck"), &"--corpus", &corpus, &"--split", &"retrieval", &"--captions", &w.p("caps.tsv"),
        &"--ks", &"1,2",
    ]));
    assert!(retrieval.contains("t2v"), "{retrieval}");
}

#[test]
fn exit_codes_follow_error_kind() {
    let w = Work::new();
    let code = |out: Output| out.status.code().unwrap();
    assert_eq!(code(vidclip(&[&"--bogus"])), 2);
    assert_eq!(code(vidclip(&[&"inspect-ckpt", &w.p("missing.ovck")])), 4);

    std::fs::write(w.p("bad.cfg"), "iwr.C = half\n").unwrap();
    std::fs::write(w.p("unknown.cfg"), "iwr.nope = 1\n").unwrap();
    let corpus = w.p("corpus");
    ok(vidclip(&[&"--config", &w.p("small.cfg"), &"gen-corpus", &"-o", &corpus]));
    ok(vidclip(&[&"--config", &w.p("small.cfg"), &"pretrain", &"--corpus", &corpus, &"-o", &w.p("a.ovck")]));
    let init = w.p("a.ovck");
    let out = w.p("b.ovck");
    let run = |pre: &[&dyn AsRef<std::ffi::OsStr>], post: &[&dyn AsRef<std::ffi::OsStr>]| {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = pre.to_vec();
        args.extend_from_slice(&[&"finetune", &"--corpus", &corpus, &"--init", &init, &"-o", &out]);
        args.extend_from_slice(post);
        code(vidclip(&args))
    };
    assert_eq!(run(&[&"--config", &w.p("bad.cfg")], &[]), 2, "unparsable value");
    assert_eq!(run(&[&"--config", &w.p("unknown.cfg")], &[]), 2, "unknown key");
    assert_eq!(run(&[], &[&"--iwr-R", &"2"]), 2, "R outside [0, 1)");
    assert_eq!(run(&[], &[&"--gamma", &"4"]), 2, "caption term without captions");

    // A tampered corpus manifest is an input error.
    std::fs::write(corpus.join("manifest.tsv"), "tampered\n").unwrap();
    assert_eq!(run(&[], &[]), 4);
}
