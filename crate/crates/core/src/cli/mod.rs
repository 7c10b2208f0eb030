//! Command-line front end. Each phase is its own subcommand writing its own
//! artifact plus a `<output>.manifest.json` describing how it was produced.

mod settings;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::captionkit::{CaptionBackend, CaptionOptions, CaptionStore, StubBackend};
use crate::datagen::{build_corpus, Dataset};
use crate::evalkit::{
    clip_scores, image_task_eval, protocol_csv, protocol_on_scores, retrieval_csv, sweep_csv, tradeoff_sweep, Protocol,
    ProtocolMetrics,
};
use crate::model::ModelConfig;
use crate::pipeline::{
    caption_corpus, closeset_split, finetune, grouped_retrieval, heldout_retrieval_groups, image_probe, parse_grid,
    pretrain, zeroshot_split, FinetuneConfig, PretrainConfig,
};
use crate::weightspace::format::write_atomic;
use crate::weightspace::{hex, interpolate, load_checkpoint, IwrConfig};
use crate::Checkpoint;

pub use settings::{Settings, UsageError};

const CORPUS_CONFIG: &str = "corpus.cfg";
const CORPUS_MANIFEST: &str = "manifest.tsv";

#[derive(Parser, Debug)]
#[command(name = "vidclip", version, about = "Video-text dual encoder: corpus, training, patching and zero-shot evaluation")]
struct Cli {
    /// Line-based `key = value` settings; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every stochastic choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus description into a directory.
    GenCorpus(GenCorpusArgs),
    /// Train both towers from scratch on the image-caption split.
    Pretrain(PretrainArgs),
    /// Caption every video of the corpus.
    Caption(CaptionArgs),
    /// Fine-tune a pretrained checkpoint on the seen video classes.
    Finetune(FinetuneArgs),
    /// Zero-shot classification or retrieval metrics for one checkpoint.
    Eval(EvalArgs),
    /// Close-set versus zero-shot accuracy along the interpolation path.
    Sweep(SweepArgs),
    /// Interpolate two checkpoints: lambda * A + (1 - lambda) * B.
    Interp(InterpArgs),
    /// Print per-tensor statistics and metadata.
    InspectCkpt(InspectArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    pretrain_per_shape: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    heldout_test_per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// `stub` or `service`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Frames sampled per video; 0 uses all of them.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Pretrained checkpoint; also the interpolation anchor.
    #[arg(long)]
    init: PathBuf,
    /// Caption store, required when gamma > 0.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Tuned weights: the running average when averaging is on, else the last iterate.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the last iterate here when averaging is on.
    #[arg(long)]
    last_out: Option<PathBuf>,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Regularized fine-tuning preset: R = 0.6, C = 0.5, averaging on.
    #[arg(long)]
    iwr: bool,
    /// Upper end of the interpolation ratio draw, alpha ~ U[0, R].
    #[arg(long = "iwr-R")]
    iwr_r: Option<f64>,
    /// Weight of the loss at the interpolated point.
    #[arg(long = "iwr-C")]
    iwr_c: Option<f64>,
    /// Weight of the caption contrastive term.
    #[arg(long)]
    gamma: Option<f64>,
    /// Penalty mu on the squared distance to the pretrained weights.
    #[arg(long, value_name = "MU")]
    l2_anchor: Option<f64>,
    /// Evaluate the interpolated caption term at the current weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    iwr_caption_at_theta: Option<bool>,
    /// Keep a running weight average and write it as the output.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    swa: Option<bool>,
    /// Update the text tower too (frozen by default).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    train_text: Option<bool>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// `zeroshot`, `closeset`, `image` or `retrieval`.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated subset of ep1, ep2, ep3, k600.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// Caption store for retrieval.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Comma-separated K values for retrieval.
    #[arg(long)]
    ks: Option<String>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long)]
    theta_a: PathBuf,
    #[arg(long)]
    tuned: PathBuf,
    /// `lo:hi:step`, inclusive.
    #[arg(long)]
    lambda_grid: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InterpArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

/// Entry point of the `vidclip` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for usage and configuration errors, 3 for numeric failures, 4 for I/O
/// and file-format failures, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    use crate::Error as E;
    fn lib(e: &E) -> u8 {
        match e {
            E::InvalidArgument(_) | E::InvalidConfig(_) => 2,
            E::Numeric(_) | E::Diverged { .. } => 3,
            E::Io { .. } | E::Format(_) => 4,
            E::CaptionFailed { source, .. } => lib(source),
            E::BackendUnavailable { .. } | E::EmptyCompletion => 1,
        }
    }
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return lib(err);
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut s = Settings::defaults();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        s.apply_file(&text).with_context(|| format!("config file {}", path.display()))?;
    }
    s.set("seed", opt(&cli.seed));
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(s, a),
        Command::Pretrain(a) => cmd_pretrain(s, a),
        Command::Caption(a) => cmd_caption(s, a),
        Command::Finetune(a) => cmd_finetune(s, a),
        Command::Eval(a) => cmd_eval(s, a),
        Command::Sweep(a) => cmd_sweep(s, a),
        Command::Interp(a) => cmd_interp(s, a),
        Command::InspectCkpt(a) => cmd_inspect(a),
    }
}

/// sha256 over the git blob framing `blob <len>\0<content>`.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn read_bytes(path: &Path) -> anyhow::Result<Vec<u8>> {
    Ok(std::fs::read(path).map_err(|e| crate::Error::io(path, e))?)
}

/// Provenance written next to every output.
struct Run<'a> {
    command: &'static str,
    settings: &'a Settings,
    prefixes: &'static [&'static str],
    inputs: Vec<(String, String)>,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, settings: &'a Settings, prefixes: &'static [&'static str]) -> Self {
        Self { command, settings, prefixes, inputs: Vec::new() }
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.push((path.display().to_string(), content_digest(&bytes)));
        Ok(bytes)
    }

    fn config_digest(&self) -> String {
        self.settings.digest(self.prefixes)
    }

    fn checkpoint_input(&mut self, path: &Path) -> anyhow::Result<Checkpoint> {
        let bytes = self.input(path)?;
        crate::weightspace::decode(&bytes).with_context(|| format!("reading checkpoint {}", path.display()))
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(path, bytes)?;
        let inputs: BTreeMap<_, _> = self.inputs.iter().cloned().collect();
        let manifest = json!({
            "command": self.command,
            "seed": self.settings.get::<u64>("seed")?,
            "config": self.settings.subset(self.prefixes),
            "config_digest": self.config_digest(),
            "inputs": inputs,
            "output": {"path": path.display().to_string(), "digest": content_digest(bytes)},
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let mut mpath = path.as_os_str().to_owned();
        mpath.push(".manifest.json");
        write_atomic(Path::new(&mpath), text.as_bytes())?;
        Ok(())
    }

    fn write_checkpoint(&self, path: &Path, ckpt: &Checkpoint) -> anyhow::Result<()> {
        let mut c = ckpt.clone();
        c.set_meta("run.command", self.command);
        c.set_meta("run.config_digest", self.config_digest());
        self.write(path, &crate::weightspace::encode(&c)?)
    }
}

fn corpus_from_settings(s: &Settings) -> anyhow::Result<(crate::datagen::CorpusConfig, u64)> {
    Ok((s.corpus_config()?, s.get("seed")?))
}

/// Rebuilds the dataset described by a corpus directory and checks it
/// against the stored sample manifest.
fn load_corpus(run: &mut Run, dir: &Path) -> anyhow::Result<Dataset> {
    let cfg_path = dir.join(CORPUS_CONFIG);
    let text = String::from_utf8(run.input(&cfg_path)?).context("corpus config is not UTF-8")?;
    let mut s = Settings::defaults();
    s.apply_file(&text).with_context(|| format!("corpus config {}", cfg_path.display()))?;
    let (cfg, seed) = corpus_from_settings(&s)?;
    let ds = build_corpus(&cfg, seed)?;
    let stored = run.input(&dir.join(CORPUS_MANIFEST))?;
    if stored != ds.manifest_tsv().as_bytes() {
        return Err(crate::Error::io(
            dir.join(CORPUS_MANIFEST),
            std::io::Error::new(std::io::ErrorKind::InvalidData, "sample manifest does not match the corpus config"),
        )
        .into());
    }
    Ok(ds)
}

fn gen_corpus(mut s: Settings, a: GenCorpusArgs) -> anyhow::Result<()> {
    s.set("corpus.pretrain_per_shape", opt(&a.pretrain_per_shape));
    s.set("corpus.train_per_class", opt(&a.train_per_class));
    s.set("corpus.test_per_class", opt(&a.test_per_class));
    s.set("corpus.heldout_test_per_class", opt(&a.heldout_test_per_class));
    s.set("corpus.noise", opt(&a.noise));
    let (cfg, seed) = corpus_from_settings(&s)?;
    let ds = build_corpus(&cfg, seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| crate::Error::io(&a.out, e))?;
    let run = Run::new("gen-corpus", &s, &["seed", "corpus."]);
    run.write(&a.out.join(CORPUS_CONFIG), s.render(&["seed", "corpus."]).as_bytes())?;
    run.write(&a.out.join(CORPUS_MANIFEST), ds.manifest_tsv().as_bytes())?;
    println!(
        "corpus: {} pretrain images, {} training videos, {} seen and {} held-out test videos",
        ds.pretrain.len(),
        ds.train.len(),
        ds.test_seen.len(),
        ds.test_heldout.len()
    );
    Ok(())
}

fn train_config(s: &Settings, prefix: &str, base: &IwrConfig) -> anyhow::Result<IwrConfig> {
    let k = |name: &str| format!("{prefix}.{name}");
    Ok(IwrConfig {
        lr: s.get(&k("lr"))?,
        lr_floor: s.get(&k("lr_floor"))?,
        warmup_epochs: s.get(&k("warmup_epochs"))?,
        epochs: s.get(&k("epochs"))?,
        batch_size: s.get(&k("batch_size"))?,
        momentum: s.get(&k("momentum"))?,
        grad_clip: s.get(&k("grad_clip"))?,
        seed: s.get("seed")?,
        ..base.clone()
    })
}

fn cmd_pretrain(mut s: Settings, a: PretrainArgs) -> anyhow::Result<()> {
    s.set("pretrain.epochs", opt(&a.epochs));
    s.set("pretrain.lr", opt(&a.lr));
    s.set("pretrain.batch_size", opt(&a.batch_size));
    let mut run = Run::new("pretrain", &s, &["seed", "model.", "pretrain."]);
    let ds = load_corpus(&mut run, &a.corpus)?;
    let defaults = PretrainConfig::default();
    let model = ModelConfig {
        dim: s.get("model.dim")?,
        heads: s.get("model.heads")?,
        layers: s.get("model.layers")?,
        mlp_hidden: s.get("model.mlp_hidden")?,
        embed_dim: s.get("model.embed_dim")?,
        vocab_size: ds.vocab.len(),
        ..defaults.model.clone()
    };
    let cfg = PretrainConfig { model, train: train_config(&s, "pretrain", &defaults.train)? };
    let theta = pretrain(&ds, &cfg, s.get("seed")?)?;
    run.write_checkpoint(&a.out, &theta)?;
    let (images, labels, texts) = image_probe(&ds)?;
    let m = image_task_eval(&theta, &images, &labels, &texts)?;
    println!("pretrained {} parameters; held-out image top-1 {:.4}", theta.num_params(), m.top1);
    Ok(())
}

fn backend_from(s: &Settings) -> anyhow::Result<Box<dyn CaptionBackend>> {
    match s.get::<String>("caption.backend")?.as_str() {
        "stub" => Ok(Box::new(StubBackend)),
        "service" => service_backend(s),
        other => Err(UsageError(format!("caption.backend: expected stub or service, got {other:?}")).into()),
    }
}

#[cfg(feature = "service")]
fn service_backend(s: &Settings) -> anyhow::Result<Box<dyn CaptionBackend>> {
    let endpoint: String = s.get("caption.endpoint")?;
    if endpoint.is_empty() {
        return Err(UsageError("caption.endpoint must be set for the service backend".into()).into());
    }
    let token_env: String = s.get("caption.token_env")?;
    let token = if token_env.is_empty() { None } else { std::env::var(&token_env).ok() };
    let backend = crate::captionkit::ServiceBackend::new(endpoint, s.get::<String>("caption.model")?)
        .with_token(token)
        .with_retry(s.get("caption.attempts")?, Duration::from_millis(s.get("caption.backoff_ms")?));
    Ok(Box::new(backend))
}

#[cfg(not(feature = "service"))]
fn service_backend(_: &Settings) -> anyhow::Result<Box<dyn CaptionBackend>> {
    Err(UsageError("built without the service backend".into()).into())
}

fn cmd_caption(mut s: Settings, a: CaptionArgs) -> anyhow::Result<()> {
    s.set("caption.backend", a.backend.clone());
    s.set("caption.endpoint", a.endpoint.clone());
    s.set("caption.model", a.model.clone());
    s.set("caption.frames", opt(&a.frames));
    s.set("caption.max_in_flight", opt(&a.max_in_flight));
    let mut run = Run::new("caption", &s, &["caption."]);
    let ds = load_corpus(&mut run, &a.corpus)?;
    let backend = backend_from(&s)?;
    let opts = CaptionOptions { frames: s.get("caption.frames")?, max_in_flight: s.get("caption.max_in_flight")? };
    let store = caption_corpus(&ds, backend.as_ref(), None, opts)?;
    run.write(&a.out, store.serialize().as_bytes())?;
    println!("captioned {} videos with the {} backend", store.len(), backend.tag().name());
    Ok(())
}

fn cmd_finetune(mut s: Settings, a: FinetuneArgs) -> anyhow::Result<()> {
    if a.iwr {
        s.set("iwr.R", Some("0.6".into()));
        s.set("iwr.C", Some("0.5".into()));
        s.set("finetune.swa", Some("true".into()));
    }
    s.set("iwr.R", opt(&a.iwr_r));
    s.set("iwr.C", opt(&a.iwr_c));
    s.set("iwr.gamma", opt(&a.gamma));
    s.set("iwr.l2_anchor", opt(&a.l2_anchor));
    s.set("iwr.caption_at_theta", opt(&a.iwr_caption_at_theta));
    s.set("finetune.swa", opt(&a.swa));
    s.set("finetune.train_text", opt(&a.train_text));
    s.set("finetune.window", opt(&a.window));
    s.set("finetune.epochs", opt(&a.epochs));
    s.set("finetune.lr", opt(&a.lr));
    s.set("finetune.batch_size", opt(&a.batch_size));

    let mut run = Run::new("finetune", &s, &["seed", "finetune.", "iwr."]);
    let ds = load_corpus(&mut run, &a.corpus)?;
    let theta_a = run.checkpoint_input(&a.init)?;
    let captions = match &a.captions {
        Some(p) => Some(CaptionStore::parse(std::str::from_utf8(&run.input(p)?).context("caption store is not UTF-8")?)?),
        None => None,
    };
    let defaults = FinetuneConfig::default();
    let iwr = IwrConfig {
        r: s.get("iwr.R")?,
        c: s.get("iwr.C")?,
        gamma: s.get("iwr.gamma")?,
        l2_anchor: s.get("iwr.l2_anchor")?,
        caption_at_theta: s.get_bool("iwr.caption_at_theta")?,
        ..train_config(&s, "finetune", &defaults.iwr)?
    };
    let cfg = FinetuneConfig {
        iwr,
        window: s.get("finetune.window")?,
        swa: s.get_bool("finetune.swa")?,
        swa_start: s.get_auto("finetune.swa_start")?,
        swa_cycle: s.get_auto("finetune.swa_cycle")?,
        train_text: s.get_bool("finetune.train_text")?,
    };
    let out = finetune(&ds, &theta_a, captions.as_ref(), &cfg)?;
    run.write_checkpoint(&a.out, out.tuned())?;
    if let Some(p) = &a.last_out {
        run.write_checkpoint(p, &out.theta_b)?;
    }
    if let Some(p) = &a.log {
        let mut csv = String::from("step,epoch,lr,alpha,loss,swa_absorbed\n");
        for r in &out.records {
            let _ = writeln!(csv, "{},{},{:.6},{:.6},{:.6},{}", r.step, r.epoch, r.lr, r.alpha, r.loss, r.swa_absorbed);
        }
        run.write(p, csv.as_bytes())?;
    }
    let last = out.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("fine-tuned for {} steps; final batch loss {last:.4}", out.records.len());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| UsageError(format!("{key}: cannot parse {p:?}")).into()))
        .collect()
}

fn cmd_eval(mut s: Settings, a: EvalArgs) -> anyhow::Result<()> {
    s.set("eval.split", a.split.clone());
    s.set("eval.protocol", a.protocol.clone());
    s.set("eval.repeats", opt(&a.repeats));
    s.set("eval.window", opt(&a.window));
    s.set("eval.views", opt(&a.views));
    s.set("eval.ks", a.ks.clone());
    let mut run = Run::new("eval", &s, &["seed", "eval."]);
    let ds = load_corpus(&mut run, &a.corpus)?;
    let theta = run.checkpoint_input(&a.checkpoint)?;
    let window: usize = s.get("eval.window")?;
    let csv = match s.get::<String>("eval.split")?.as_str() {
        split @ ("zeroshot" | "closeset") => {
            let data = if split == "zeroshot" { zeroshot_split(&ds)? } else { closeset_split(&ds)? };
            let scores = clip_scores(&theta, &data, window, s.get("eval.views")?)?;
            let protocols: Vec<String> = parse_list("eval.protocol", &s.get::<String>("eval.protocol")?)?;
            let repeats = s.get_auto("eval.repeats")?;
            let results = protocols
                .iter()
                .map(|p| Ok(protocol_on_scores(Protocol::parse(p)?, &scores, &data.labels, repeats, s.get("seed")?)?))
                .collect::<anyhow::Result<Vec<ProtocolMetrics>>>()?;
            protocol_csv(&results)
        }
        "image" => {
            let (images, labels, texts) = image_probe(&ds)?;
            let m = image_task_eval(&theta, &images, &labels, &texts)?;
            format!("metric,mean,std\nimage_top1,{:.6},{:.6}\nimage_top5,{:.6},{:.6}\n", m.top1, 0.0, m.top5, 0.0)
        }
        "retrieval" => {
            let path = a.captions.as_ref().ok_or_else(|| UsageError("retrieval needs --captions".into()))?;
            let store = CaptionStore::parse(std::str::from_utf8(&run.input(path)?).context("caption store is not UTF-8")?)?;
            let groups = heldout_retrieval_groups(&ds, &store)?;
            let ks: Vec<usize> = parse_list("eval.ks", &s.get::<String>("eval.ks")?)?;
            retrieval_csv(&grouped_retrieval(&theta, &groups, &ks, window)?)
        }
        other => bail!(UsageError(format!("eval.split: expected zeroshot, closeset, image or retrieval, got {other:?}"))),
    };
    print!("{csv}");
    if let Some(p) = &a.out {
        run.write(p, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(mut s: Settings, a: SweepArgs) -> anyhow::Result<()> {
    s.set("sweep.lambda_grid", a.lambda_grid.clone());
    s.set("eval.window", opt(&a.window));
    let mut run = Run::new("sweep", &s, &["sweep.", "eval.window"]);
    let ds = load_corpus(&mut run, &a.corpus)?;
    let theta_a = run.checkpoint_input(&a.theta_a)?;
    let tuned = run.checkpoint_input(&a.tuned)?;
    let grid = parse_grid(&s.get::<String>("sweep.lambda_grid")?).map_err(|e| UsageError(format!("sweep.lambda_grid: {e}")))?;
    let rows = tradeoff_sweep(&theta_a, &tuned, &grid, &closeset_split(&ds)?, &zeroshot_split(&ds)?, s.get("eval.window")?)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    run.write(&a.out, csv.as_bytes())
}

fn cmd_interp(mut s: Settings, a: InterpArgs) -> anyhow::Result<()> {
    s.set("interp.lambda", opt(&a.lambda));
    let mut run = Run::new("interp", &s, &["interp."]);
    let ca = run.checkpoint_input(&a.a)?;
    let cb = run.checkpoint_input(&a.b)?;
    let mixed = interpolate(&ca, &cb, s.get("interp.lambda")?)?;
    run.write_checkpoint(&a.out, &mixed)
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    println!("name\tshape\tmean\tstd");
    for (name, t) in ckpt.iter() {
        let v: Vec<f64> = t.data().iter().map(|&x: &f32| x as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(1) as f64;
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        println!("{name}\t{}\t{mean:.9}\t{:.9}", shape.join("x"), var.sqrt());
    }
    for (k, v) in ckpt.meta() {
        println!("# {k} = {v}");
    }
    println!("# digest = {}", ckpt.digest());
    Ok(())
}
