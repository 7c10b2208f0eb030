//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! straight to stderr so the verdicts show up even when output is captured.
//!
//! The training-based criteria (9-11) share trained checkpoints per seed;
//! every criterion reports thread CPU time, so budgets hold when tests run
//! side by side.

use std::io::Write as _;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidclip::captionkit::{build_prompts, CaptionOptions, CaptionStore, FrameCaptionSet, StubBackend};
use vidclip::datagen::{build_corpus, make_static_video, CorpusConfig, Dataset};
use vidclip::evalkit::{classify_zero_shot, retrieval_eval, tradeoff_sweep, SweepRow};
use vidclip::model::{encode_texts, encode_videos, init_params, Embedding, ModelConfig, TextSequence, VideoClip};
use vidclip::objectives::{BatchObjective, PairedData, TermWeights, VideoTextObjective};
use vidclip::pipeline::{
    caption_corpus, closeset_split, confusable_splits, finetune, finetune_pairs, grouped_retrieval, heldout_retrieval_groups,
    parse_grid, pretrain, zeroshot_split, FinetuneConfig, FinetuneOutput, PretrainConfig,
};
use vidclip::weightspace::{
    decode, encode, interpolate, iwr_gradient, load_checkpoint, save_checkpoint, train, BatchSchedule, IwrConfig, SwaState,
};
use vidclip::{Checkpoint, FormatError, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[criterion {id:>2}] {verdict} {title}: {detail}");
}

fn thread_cpu_secs() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "thread CPU clock unavailable");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

struct Timed<T> {
    value: T,
    cpu: f64,
}

fn timed<T>(f: impl FnOnce() -> T) -> Timed<T> {
    let t0 = thread_cpu_secs();
    let value = f();
    Timed { value, cpu: thread_cpu_secs() - t0 }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn max_coord_gap(a: &[Embedding], b: &[Embedding]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::new(vec![size, size], (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_clip(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> VideoClip {
    let data = (0..frames * size * size).map(|_| rng.random::<f32>()).collect();
    VideoClip::new(Tensor::new(vec![frames, size, size], data).unwrap()).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TextSequence {
    let len = rng.random_range(2..=cfg.max_text_len);
    let ids = (0..len).map(|_| rng.random_range(2..cfg.vocab_size)).collect();
    TextSequence::new(ids, cfg.max_text_len, cfg.vocab_size).unwrap()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_static_clip_window_equivalence() {
    let start = thread_cpu_secs();
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let clips: Vec<VideoClip> =
        (0..100).map(|_| make_static_video(&random_frame(&mut rng, cfg.frame_size), 4).unwrap()).collect();
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let mut worst = 0.0f64;
    for draw in 0..10 {
        let params = init_params(&cfg, 1000 + draw).unwrap();
        let w1 = encode_videos(&params, &refs, 1).unwrap();
        let w3 = encode_videos(&params, &refs, 3).unwrap();
        worst = worst.max(max_coord_gap(&w1, &w3));
    }
    let secs = thread_cpu_secs() - start;
    let pass = worst <= 1e-5 && secs < 10.0;
    report(1, "static clips embed the same under window 3 and window 1", pass, &format!("max gap {worst:.2e} over 100 clips x 10 draws, {secs:.1}s CPU"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn criterion_02_order_invariances() {
    let start = thread_cpu_secs();
    let cfg = ModelConfig::default();
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let clips: Vec<VideoClip> = (0..50).map(|_| random_clip(&mut rng, 4, cfg.frame_size)).collect();
    let params = init_params(&cfg, 7).unwrap();
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let base1 = encode_videos(&params, &refs, 1).unwrap();
    let base3 = encode_videos(&params, &refs, 3).unwrap();
    let mut perm_gap = 0.0f64;
    for p in &perms {
        let moved: Vec<VideoClip> = clips.iter().map(|c| c.permuted(p).unwrap()).collect();
        let e = encode_videos(&params, &moved.iter().collect::<Vec<_>>(), 1).unwrap();
        perm_gap = perm_gap.max(max_coord_gap(&base1, &e));
    }
    let reversed: Vec<VideoClip> = clips.iter().map(|c| c.reversed()).collect();
    let rev = encode_videos(&params, &reversed.iter().collect::<Vec<_>>(), 3).unwrap();
    let rev_gap = max_coord_gap(&base3, &rev);
    let secs = thread_cpu_secs() - start;
    let pass = perm_gap <= 1e-5 && rev_gap <= 1e-5 && secs < 30.0;
    report(
        2,
        "window 1 ignores frame order, window 3 ignores reversal",
        pass,
        &format!("24-permutation gap {perm_gap:.2e}, reversal gap {rev_gap:.2e}, 50 clips, {secs:.1}s CPU"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

/// Fourth-order central difference of the batch loss in 64-bit.
fn fd_coord(obj: &VideoTextObjective<f64>, theta: &Checkpoint<f64>, batch: &[usize], name: &str, i: usize, h: f64) -> f64 {
    let at = |delta: f64| {
        let mut t = theta.tensor(name).unwrap().clone();
        let mut data = t.data().to_vec();
        data[i] += delta;
        t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let mut p = theta.clone();
        p.replace(name, t).unwrap();
        obj.loss(&p, batch, TermWeights::LABEL_ONLY).unwrap()
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Coordinate-wise relative error; the denominator never drops below 1e-3
/// of the tensor's largest reference gradient.
fn coord_rel_err(got: f64, want: f64, tensor_scale: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-3 * tensor_scale).max(1e-300)
}

fn gradcheck_batch(cfg: &ModelConfig, seed: u64) -> (VideoTextObjective<f64>, VideoTextObjective<f32>, Checkpoint<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<VideoClip> = (0..3).map(|_| random_clip(&mut rng, 4, cfg.frame_size)).collect();
    let texts: Vec<TextSequence> = (0..3).map(|_| random_text(&mut rng, cfg)).collect();
    let data = PairedData { clips, texts, labels: vec![0, 1, 2], captions: None };
    let obj64 = VideoTextObjective::<f64>::new(cfg.clone(), data.clone(), 3, true).unwrap();
    let obj32 = VideoTextObjective::<f32>::new(cfg.clone(), data, 3, true).unwrap();
    let theta = init_params(cfg, seed).unwrap().cast::<f64>();
    (obj64, obj32, theta)
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let start = thread_cpu_secs();
    let batch = [0usize, 1, 2];
    let (mut err64, mut err32) = (0.0f64, 0.0f64);
    let mut tensors = 0;
    let mut coords = 0;
    // Every coordinate of every tensor on the small configuration.
    for seed in [11u64, 12, 13] {
        let cfg = ModelConfig::tiny();
        let (obj64, obj32, theta) = gradcheck_batch(&cfg, seed);
        let (_, g64) = obj64.loss_and_grad(&theta, &batch, TermWeights::LABEL_ONLY).unwrap();
        let (_, g32) = obj32.loss_and_grad(&theta.cast::<f32>(), &batch, TermWeights::LABEL_ONLY).unwrap();
        assert_eq!(g64.len(), theta.len(), "gradient must cover every tensor");
        for (name, t) in theta.iter() {
            let fd: Vec<f64> = (0..t.len()).map(|i| fd_coord(&obj64, &theta, &batch, name, i, 1e-3)).collect();
            let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let a64 = g64.tensor(name).unwrap().data();
            let a32 = g32.tensor(name).unwrap().data();
            for i in 0..fd.len() {
                err64 = err64.max(coord_rel_err(a64[i], fd[i], scale));
                err32 = err32.max(coord_rel_err(a32[i] as f64, fd[i], scale));
            }
            tensors += 1;
            coords += fd.len();
        }
    }
    // Sampled coordinates on the full-size configuration.
    for seed in [21u64, 22, 23] {
        let cfg = ModelConfig::default();
        let (obj64, obj32, theta) = gradcheck_batch(&cfg, seed);
        let (_, g64) = obj64.loss_and_grad(&theta, &batch, TermWeights::LABEL_ONLY).unwrap();
        let (_, g32) = obj32.loss_and_grad(&theta.cast::<f32>(), &batch, TermWeights::LABEL_ONLY).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _) in theta.iter() {
            let a64 = g64.tensor(name).unwrap().data();
            let a32 = g32.tensor(name).unwrap().data();
            let scale = a64.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            // Two random coordinates plus the one with the largest gradient.
            let top = (0..a64.len()).max_by(|&i, &j| a64[i].abs().total_cmp(&a64[j].abs())).unwrap();
            for i in [rng.random_range(0..a64.len()), rng.random_range(0..a64.len()), top] {
                let fd = fd_coord(&obj64, &theta, &batch, name, i, 1e-3);
                err64 = err64.max(coord_rel_err(a64[i], fd, scale));
                err32 = err32.max(coord_rel_err(a32[i] as f64, fd, scale));
                coords += 1;
            }
            tensors += 1;
        }
    }
    let secs = thread_cpu_secs() - start;
    let pass = err64 <= 1e-6 && err32 <= 1e-3 && secs < 120.0;
    report(
        3,
        "backward matches central finite differences",
        pass,
        &format!("max rel err 64-bit {err64:.2e}, 32-bit {err32:.2e} over {tensors} tensors / {coords} coordinates, 6 seeds, {secs:.1}s CPU"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_interpolated_gradient_identity() {
    let start = thread_cpu_secs();
    // Closed form: L = θ², θ_A = 0, θ = 1, α = 0.5, C = 0.5.
    let one = |v: f64| Checkpoint::<f64>::from_tensors([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())]).unwrap();
    let quad = |p: &Checkpoint<f64>| {
        let x = p.tensor("w").unwrap().data()[0];
        Ok((x * x, one(2.0 * x)))
    };
    let g = iwr_gradient(&one(1.0), &one(0.0), 0.5, 0.5, quad).unwrap();
    let scalar = g.tensor("w").unwrap().data()[0];

    // Two independent backward passes on the real objective.
    let cfg = ModelConfig::tiny();
    let mut worst = 0.0f64;
    for seed in [31u64, 32, 33] {
        let (obj, _, theta) = gradcheck_batch(&cfg, seed);
        let theta_a = init_params(&cfg, seed + 100).unwrap().cast::<f64>();
        let batch = [0usize, 1, 2];
        let (alpha, c) = (0.37, 0.5);
        let loss_fn = |p: &Checkpoint<f64>| obj.loss_and_grad(p, &batch, TermWeights::LABEL_ONLY);
        let got = iwr_gradient(&theta, &theta_a, alpha, c, loss_fn).unwrap();
        let mut tilde = theta.clone();
        for (name, t) in theta.iter() {
            let a = theta_a.tensor(name).unwrap().data();
            let mixed: Vec<f64> = t.data().iter().zip(a).map(|(&x, &y)| alpha * y + (1.0 - alpha) * x).collect();
            tilde.replace(name, Tensor::new(t.shape().to_vec(), mixed).unwrap()).unwrap();
        }
        let (_, g_theta) = obj.loss_and_grad(&theta, &batch, TermWeights::LABEL_ONLY).unwrap();
        let (_, g_tilde) = obj.loss_and_grad(&tilde, &batch, TermWeights::LABEL_ONLY).unwrap();
        for (name, t) in got.iter() {
            let a = g_theta.tensor(name).unwrap().data();
            let b = g_tilde.tensor(name).unwrap().data();
            for (i, &v) in t.data().iter().enumerate() {
                worst = worst.max((v - (a[i] + c * b[i])).abs());
            }
        }
    }
    let secs = thread_cpu_secs() - start;
    let pass = scalar == 2.5 && worst <= 1e-6 && secs < 30.0;
    report(4, "interpolated gradient equals g(θ) + C·g(θ̃)", pass, &format!("quadratic case {scalar}, max gap {worst:.2e} over 3 seeds, {secs:.1}s CPU"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_averaging_commutes_with_interpolation() {
    let start = thread_cpu_secs();
    let cfg = ModelConfig::default();
    let anchor = init_params(&cfg, 500).unwrap().cast::<f64>();
    let members: Vec<Checkpoint<f64>> = (0..10).map(|i| init_params(&cfg, 501 + i).unwrap().cast::<f64>()).collect();
    let mut swa = SwaState::new(0, 1);
    for m in &members {
        swa.absorb(m).unwrap();
    }
    let mean = swa.average::<f64>().unwrap();
    let mut worst = 0.0f64;
    for k in 1..=9 {
        let lam = k as f64 / 10.0;
        let patched_mean = interpolate(&anchor, &mean, lam).unwrap();
        // Mean of the interpolations, accumulated by hand.
        for (name, t) in patched_mean.iter() {
            let a = anchor.tensor(name).unwrap().data();
            for (i, &v) in t.data().iter().enumerate() {
                let avg = members.iter().map(|m| lam * a[i] + (1.0 - lam) * m.tensor(name).unwrap().data()[i]).sum::<f64>() / 10.0;
                worst = worst.max((v - avg).abs());
            }
        }
    }
    let secs = thread_cpu_secs() - start;
    let pass = worst <= 1e-6 && secs < 10.0;
    report(5, "mean of interpolations equals interpolation of the mean", pass, &format!("max gap {worst:.2e}, 10 checkpoints x 9 lambdas, {secs:.1}s CPU"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_checkpoint_format() {
    let start = thread_cpu_secs();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.ovck");
    let ckpt = init_params(&ModelConfig::default(), 6).unwrap();
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back: Checkpoint = load_checkpoint(&path).unwrap();
    let round_trip = back.digest() == ckpt.digest() && encode(&back).unwrap() == bytes && back == ckpt;

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x01;
    let corrupt = decode::<f32>(&flipped).unwrap_err();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let wrong_magic = decode::<f32>(&magic).unwrap_err();
    let errors_ok = matches!(corrupt, FormatError::ChecksumMismatch { .. }) && wrong_magic == FormatError::BadMagic && corrupt != wrong_magic;
    let secs = thread_cpu_secs() - start;
    let pass = round_trip && errors_ok && secs < 5.0;
    report(6, "checkpoint round-trip and corruption detection", pass, &format!("round-trip identical: {round_trip}; flipped byte -> {corrupt:?}; wrong magic -> {wrong_magic:?}; {secs:.2}s CPU"));
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// Recall@K from a full sort of each row, ties ordered by index.
fn sort_oracle(sim: &[Vec<f64>], k: usize) -> f64 {
    let hits = sim
        .iter()
        .enumerate()
        .filter(|(q, row)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.iter().position(|&j| j == *q).unwrap() < k
        })
        .count();
    hits as f64 / sim.len() as f64
}

#[test]
fn criterion_07_retrieval_matches_sort_oracle() {
    let start = thread_cpu_secs();
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut pairs: Vec<(VideoClip, TextSequence)> = Vec::new();
    while pairs.len() < 32 {
        let t = random_text(&mut rng, &cfg);
        if pairs.iter().all(|(_, u)| u.tokens() != t.tokens()) {
            pairs.push((random_clip(&mut rng, 4, cfg.frame_size), t));
        }
    }
    let mut all_ok = true;
    let mut detail = Vec::new();
    for seed in [70u64, 71] {
        let params = init_params(&cfg, seed).unwrap();
        let ks = [1usize, 5, 10];
        let got = retrieval_eval(&params, &pairs, &ks, 3).unwrap();
        let v = encode_videos(&params, &pairs.iter().map(|p| &p.0).collect::<Vec<_>>(), 3).unwrap();
        let t = encode_texts(&params, &pairs.iter().map(|p| &p.1).collect::<Vec<_>>()).unwrap();
        let dot = |a: &Embedding, b: &Embedding| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>();
        let t2v: Vec<Vec<f64>> = t.iter().map(|ti| v.iter().map(|vj| dot(vj, ti)).collect()).collect();
        let v2t: Vec<Vec<f64>> = v.iter().map(|vi| t.iter().map(|tj| dot(vi, tj)).collect()).collect();
        for &k in &ks {
            let (want_t2v, want_v2t) = (sort_oracle(&t2v, k), sort_oracle(&v2t, k));
            let ok = got.t2v(k) == Some(want_t2v) && got.v2t(k) == Some(want_v2t);
            all_ok &= ok;
            detail.push(format!("R@{k} {want_t2v:.3}/{want_v2t:.3}"));
        }
    }
    let secs = thread_cpu_secs() - start;
    let pass = all_ok && secs < 10.0;
    report(7, "Recall@K equals a brute-force sort oracle", pass, &format!("32 pairs, 2 models, t2v/v2t {}; {secs:.1}s CPU", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_prompt_strings() {
    let frames = FrameCaptionSet::new(vec![(0, "a ring at row 0 column 1".into()), (1, "a ring at row 1 column 1".into())]).unwrap();
    let (system, user) = build_prompts(&frames).unwrap();
    let want_user = "Input: These are captions of the frames in a sequential order within the same video: \
a ring at row 0 column 1, a ring at row 1 column 1. \
Please summarize the whole video according to the frame captions in short. Output: The video shows";
    let pass = system == "Always answer in one sentence."
        && user == want_user
        && user.contains("Please summarize the whole video according to the frame captions in short.");
    report(8, "summarization prompts are byte-exact", pass, &format!("system {system:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- shared training runs

struct SeedRun {
    seed: u64,
    ds: Dataset,
    captions: CaptionStore,
    theta_a: OnceLock<Timed<Checkpoint>>,
    plain: OnceLock<Timed<FinetuneOutput>>,
    frame_local: OnceLock<Timed<FinetuneOutput>>,
    regularized: OnceLock<Timed<FinetuneOutput>>,
    captioned: OnceLock<Timed<FinetuneOutput>>,
}

impl SeedRun {
    fn new(seed: u64) -> Self {
        let ds = build_corpus(&CorpusConfig::default(), seed).unwrap();
        let captions = caption_corpus(&ds, &StubBackend, None, CaptionOptions::default()).unwrap();
        Self {
            seed,
            ds,
            captions,
            theta_a: OnceLock::new(),
            plain: OnceLock::new(),
            frame_local: OnceLock::new(),
            regularized: OnceLock::new(),
            captioned: OnceLock::new(),
        }
    }

    fn theta_a(&self) -> &Timed<Checkpoint> {
        self.theta_a.get_or_init(|| timed(|| pretrain(&self.ds, &PretrainConfig::default(), self.seed).unwrap()))
    }

    fn tune(&self, cell: &'static str, edit: impl FnOnce(&mut FinetuneConfig)) -> Timed<FinetuneOutput> {
        let theta_a = &self.theta_a().value;
        let mut cfg = FinetuneConfig::default();
        cfg.iwr.seed = self.seed;
        edit(&mut cfg);
        timed(|| finetune(&self.ds, theta_a, Some(&self.captions), &cfg).unwrap_or_else(|e| panic!("{cell}: {e}")))
    }

    fn plain(&self) -> &Timed<FinetuneOutput> {
        self.plain.get_or_init(|| self.tune("plain", |_| {}))
    }

    fn frame_local(&self) -> &Timed<FinetuneOutput> {
        self.frame_local.get_or_init(|| self.tune("frame-local", |c| c.window = 1))
    }

    fn regularized(&self) -> &Timed<FinetuneOutput> {
        self.regularized.get_or_init(|| {
            self.tune("regularized", |c| {
                c.iwr.r = 0.6;
                c.iwr.c = 0.5;
                c.swa = true;
            })
        })
    }

    fn captioned(&self) -> &Timed<FinetuneOutput> {
        self.captioned.get_or_init(|| self.tune("captioned", |c| c.iwr.gamma = 4.0))
    }
}

fn runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| SeedRun::new(s)).collect())
}

fn confusable_top1(run: &SeedRun, theta: &Checkpoint, window: usize) -> f64 {
    let splits = confusable_splits(&run.ds).unwrap();
    assert!(!splits.is_empty());
    let total: usize = splits.iter().map(|s| s.clips.len()).sum();
    let correct: f64 = splits.iter().map(|s| classify_zero_shot(theta, s, window, 1).unwrap().top1 * s.clips.len() as f64).sum();
    correct / total as f64
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_temporal_separation() {
    let mut wide = Vec::new();
    let mut local = Vec::new();
    let mut cpu = 0.0;
    for run in runs() {
        let (a, p, f) = (run.theta_a(), run.plain(), run.frame_local());
        let t = timed(|| (confusable_top1(run, &p.value.theta_b, 3), confusable_top1(run, &f.value.theta_b, 1)));
        wide.push(t.value.0);
        local.push(t.value.1);
        cpu += a.cpu + p.cpu + f.cpu + t.cpu;
    }
    let (w3, w1) = (median(wide.clone()), median(local.clone()));
    let pass = w3 >= 0.90 && w1 <= 0.60 && cpu < 600.0;
    report(
        9,
        "window 3 separates same-multiset classes, window 1 cannot",
        pass,
        &format!("median top-1 window 3 {w3:.3} (seeds {wide:.3?}), window 1 {w1:.3} (seeds {local:.3?}), {cpu:.0}s CPU"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

/// For each point of `ours`, the baseline point with the nearest close-set
/// accuracy (ties to the higher zero-shot); counts points where ours is at
/// least as good on zero-shot.
fn dominance(ours: &[SweepRow], base: &[SweepRow]) -> f64 {
    let wins = ours
        .iter()
        .filter(|p| {
            let mut best: Option<&SweepRow> = None;
            for b in base {
                let d = (b.closeset_top1 - p.closeset_top1).abs();
                best = match best {
                    Some(c) if (c.closeset_top1 - p.closeset_top1).abs() < d => Some(c),
                    Some(c) if (c.closeset_top1 - p.closeset_top1).abs() == d && c.zeroshot_top1 >= b.zeroshot_top1 => Some(c),
                    _ => Some(b),
                };
            }
            p.zeroshot_top1 >= best.unwrap().zeroshot_top1
        })
        .count();
    wins as f64 / ours.len() as f64
}

#[test]
fn criterion_10_regularized_tradeoff_dominance() {
    let grid = parse_grid("0:1:0.1").unwrap();
    assert_eq!(grid.len(), 11);
    let mut fractions = Vec::new();
    let mut zs_gap = Vec::new();
    let mut cpu = 0.0;
    for run in runs() {
        let (a, p, r) = (run.theta_a(), run.plain(), run.regularized());
        let t = timed(|| {
            let cs = closeset_split(&run.ds).unwrap();
            let zs = zeroshot_split(&run.ds).unwrap();
            let plain = tradeoff_sweep(&a.value, &p.value.theta_b, &grid, &cs, &zs, 3).unwrap();
            let ours = tradeoff_sweep(&a.value, r.value.tuned(), &grid, &cs, &zs, 3).unwrap();
            assert_eq!(dominance(&ours, &plain), vidclip::evalkit::dominance_fraction(&ours, &plain).unwrap());
            (dominance(&ours, &plain), ours[0].zeroshot_top1 - plain[0].zeroshot_top1)
        });
        fractions.push(t.value.0);
        zs_gap.push(t.value.1);
        cpu += a.cpu + p.cpu + r.cpu + t.cpu;
    }
    let med = median(fractions.clone());
    let pass = med >= 0.70 && cpu < 900.0;
    report(
        10,
        "regularized + averaged curve dominates plain fine-tuning",
        pass,
        &format!("median dominated fraction {med:.3} (seeds {fractions:.3?}); zero-shot gain at lambda 0 {zs_gap:.3?}; {cpu:.0}s CPU"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_caption_augmentation() {
    let mut base = Vec::new();
    let mut aug = Vec::new();
    let mut cpu = 0.0;
    for run in runs() {
        let (a, p, c) = (run.theta_a(), run.plain(), run.captioned());
        let t = timed(|| {
            let groups = heldout_retrieval_groups(&run.ds, &run.captions).unwrap();
            let r = |th: &Checkpoint| grouped_retrieval(th, &groups, &[1], 3).unwrap().t2v(1).unwrap();
            (r(&p.value.theta_b), r(&c.value.theta_b))
        });
        base.push(t.value.0);
        aug.push(t.value.1);
        cpu += a.cpu + p.cpu + c.cpu + t.cpu;
    }
    let no_worse = base.iter().zip(&aug).all(|(b, a)| a >= b);
    let improved = base.iter().zip(&aug).filter(|(b, a)| a > b).count();
    let pass = no_worse && improved >= 2 && cpu < 900.0;
    report(
        11,
        "caption term improves held-out text-to-video Recall@1",
        pass,
        &format!("gamma 0 {base:.3?} vs gamma 4 {aug:.3?}; improved in {improved}/3 seeds; {cpu:.0}s CPU"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 12

/// Steps the reference optimizer by hand: optional norm clipping, optional
/// heavy-ball momentum, then a descent step, all in 32-bit like the driver.
fn reference_trajectory(obj: &VideoTextObjective<f32>, init: &Checkpoint, cfg: &IwrConfig, n: usize) -> Vec<String> {
    let schedule = BatchSchedule::new(n, cfg.batch_size, cfg.seed);
    let mut theta = init.clone();
    let mut velocity: Option<Vec<Vec<f32>>> = (cfg.momentum > 0.0).then(|| theta.iter().map(|(_, t)| vec![0.0; t.len()]).collect());
    let mut digests = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in schedule.epoch(epoch) {
            step += 1;
            let (_, grad) = obj.loss_and_grad(&theta, &batch, TermWeights::LABEL_ONLY).unwrap();
            let mut g: Vec<Vec<f32>> = grad.iter().map(|(_, t)| t.data().to_vec()).collect();
            if cfg.grad_clip > 0.0 {
                let norm = g.iter().map(|t| t.iter().map(|&x| x as f64 * x as f64).sum::<f64>()).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = (cfg.grad_clip / norm) as f32;
                    g.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            let lr = -(cfg.lr_at(step, n) as f32);
            let names: Vec<String> = theta.names().map(str::to_string).collect();
            for (k, name) in names.iter().enumerate() {
                let t = theta.tensor(name).unwrap();
                let dir: Vec<f32> = match &mut velocity {
                    Some(v) => {
                        let m = cfg.momentum as f32;
                        v[k].iter_mut().zip(&g[k]).for_each(|(vi, &gi)| *vi = *vi * m + gi);
                        v[k].clone()
                    }
                    None => g[k].clone(),
                };
                let next: Vec<f32> = t.data().iter().zip(&dir).map(|(&w, &d)| w + lr * d).collect();
                let shape = t.shape().to_vec();
                theta.replace(name, Tensor::new(shape, next).unwrap()).unwrap();
            }
            digests.push(theta.digest());
        }
    }
    digests
}

#[test]
fn criterion_12_unregularized_matches_reference_sgd() {
    let start = thread_cpu_secs();
    let ds = build_corpus(&CorpusConfig::default(), 12).unwrap();
    let init = init_params(&ModelConfig::default(), 12).unwrap();
    let pairs = finetune_pairs(&ds, None).unwrap();
    let n = pairs.clips.len();
    let obj = VideoTextObjective::<f32>::new(ModelConfig::default(), pairs, 3, false).unwrap();
    let mut verdicts = Vec::new();
    let mut all_ok = true;
    for (label, momentum, clip) in [("plain SGD", 0.0, 0.0), ("default optimizer", 0.9, 1.0)] {
        let cfg = FinetuneConfig::default();
        let iwr = IwrConfig { epochs: 5, batch_size: 24, momentum, grad_clip: clip, r: 0.0, c: 0.0, gamma: 0.0, seed: 12, ..cfg.iwr };
        assert_eq!(iwr.total_steps(n), 100);
        let want = reference_trajectory(&obj, &init, &iwr, n);
        let mut got = Vec::new();
        let (last, _) = train(&init, &init, &obj, &iwr, SwaState::disabled(), &mut |_, theta| got.push(theta.digest())).unwrap();
        let tuned = finetune(&ds, &init, None, &FinetuneConfig { iwr, swa: false, ..cfg }).unwrap();
        let steps_equal = got.len() == 100 && got == want;
        let entry_equal = tuned.theta_b.digest() == want[99] && last.digest() == want[99];
        all_ok &= steps_equal && entry_equal;
        verdicts.push(format!("{label}: {} of 100 step digests equal, fine-tune entry point final digest equal: {entry_equal}", got.iter().zip(&want).filter(|(a, b)| a == b).count()));
    }
    let secs = thread_cpu_secs() - start;
    report(12, "unregularized fine-tuning is the reference SGD loop", all_ok, &format!("{}; {secs:.1}s CPU", verdicts.join("; ")));
    assert!(all_ok);
}
