//! Zero-shot evaluation: classification against label prompts (with the
//! class-subset protocols), cross-modal Recall@K, interpolation sweeps and
//! the single-frame image probe.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{make_static_video, mix_seed};
use crate::model::{encode_texts, encode_videos, Embedding, TextSequence, VideoClip};
use crate::numkit::{Scalar, Tensor};
use crate::weightspace::final_patch;
use crate::{Checkpoint, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub top1: f64,
    pub top5: f64,
}

/// A classification metric aggregated over protocol repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMetrics {
    pub protocol: Protocol,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
    /// Per-repeat results in repeat order.
    pub runs: Vec<ClassMetrics>,
}

/// Recall@K per direction, in the order the Ks were requested.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub text_to_video: Vec<(usize, f64)>,
    pub video_to_text: Vec<(usize, f64)>,
}

impl RetrievalMetrics {
    pub fn t2v(&self, k: usize) -> Option<f64> {
        self.text_to_video.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn v2t(&self, k: usize) -> Option<f64> {
        self.video_to_text.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub closeset_top1: f64,
    pub zeroshot_top1: f64,
}

/// Clips with class labels indexing into `class_texts`.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub clips: Vec<VideoClip>,
    pub labels: Vec<usize>,
    pub class_texts: Vec<TextSequence>,
}

impl EvalSplit {
    pub fn validate(&self) -> Result<()> {
        if self.class_texts.is_empty() {
            return Err(Error::invalid("no classes to score against"));
        }
        if self.clips.len() != self.labels.len() {
            return Err(Error::invalid("one label per clip required"));
        }
        if self.labels.iter().any(|&l| l >= self.class_texts.len()) {
            return Err(Error::invalid("label outside the class list"));
        }
        Ok(())
    }
}

/// Row-major `clips × classes` similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid("score matrix size mismatch"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn from_embeddings(a: &[Embedding], b: &[Embedding]) -> Self {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for x in a {
            for y in b {
                data.push(x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum());
            }
        }
        Self { rows: a.len(), cols: b.len(), data }
    }
}

/// Position of `target` when `scores` are sorted descending with ties broken
/// by lower index first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = j;
        }
    }
    best
}

/// Top-1/top-5 over the columns `classes` for the rows whose label is in
/// `classes`. `rows` restricts the candidate rows further.
fn accuracy_on(scores: &ScoreMatrix, labels: &[usize], classes: &[usize], rows: Option<&[usize]>) -> Result<ClassMetrics> {
    if classes.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    let all: Vec<usize> = (0..scores.rows).collect();
    let rows = rows.unwrap_or(&all);
    let (mut hit1, mut hit5, mut n) = (0usize, 0usize, 0usize);
    let mut sub = Vec::with_capacity(classes.len());
    for &r in rows {
        let Some(target) = classes.iter().position(|&c| c == labels[r]) else { continue };
        sub.clear();
        sub.extend(classes.iter().map(|&c| scores.row(r)[c]));
        let rank = rank_of(&sub, target);
        n += 1;
        hit1 += (rank < 1) as usize;
        hit5 += (rank < 5) as usize;
    }
    if n == 0 {
        return Err(Error::invalid("no clips belong to the selected classes"));
    }
    Ok(ClassMetrics { top1: hit1 as f64 / n as f64, top5: hit5 as f64 / n as f64 })
}

pub fn accuracy(scores: &ScoreMatrix, labels: &[usize]) -> Result<ClassMetrics> {
    let classes: Vec<usize> = (0..scores.cols).collect();
    accuracy_on(scores, labels, &classes, None)
}

/// `views` contiguous sub-clips of length `T − views + 1` at offsets `0..views`.
pub fn temporal_views(clip: &VideoClip, views: usize) -> Result<Vec<VideoClip>> {
    if views == 0 || views > clip.frames() {
        return Err(Error::invalid(format!("views must be in 1..={}, got {views}", clip.frames())));
    }
    if views == 1 {
        return Ok(vec![clip.clone()]);
    }
    let len = clip.frames() - views + 1;
    (0..views).map(|o| clip.window(o, len)).collect()
}

/// Scores with explicit views per clip; a clip's logits are the mean over
/// its views.
pub fn view_scores<S: Scalar>(
    theta: &Checkpoint<S>,
    views: &[Vec<VideoClip>],
    class_texts: &[TextSequence],
    window: usize,
) -> Result<ScoreMatrix> {
    if class_texts.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    if views.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every clip needs at least one view"));
    }
    let texts = encode_texts(theta, &class_texts.iter().collect::<Vec<_>>())?;
    let flat: Vec<&VideoClip> = views.iter().flatten().collect();
    let emb = encode_videos(theta, &flat, window)?;
    let per_view = ScoreMatrix::from_embeddings(&emb, &texts);
    let c = texts.len();
    let mut data = Vec::with_capacity(views.len() * c);
    let mut offset = 0;
    for v in views {
        let mut acc = vec![0.0; c];
        for k in 0..v.len() {
            acc.iter_mut().zip(per_view.row(offset + k)).for_each(|(a, s)| *a += s);
        }
        data.extend(acc.into_iter().map(|a| a / v.len() as f64));
        offset += v.len();
    }
    ScoreMatrix::new(views.len(), c, data)
}

pub fn clip_scores<S: Scalar>(theta: &Checkpoint<S>, split: &EvalSplit, window: usize, views: usize) -> Result<ScoreMatrix> {
    split.validate()?;
    let v = split.clips.iter().map(|c| temporal_views(c, views)).collect::<Result<Vec<_>>>()?;
    view_scores(theta, &v, &split.class_texts, window)
}

/// Zero-shot classification of every clip against all class prompts.
pub fn classify_zero_shot<S: Scalar>(theta: &Checkpoint<S>, split: &EvalSplit, window: usize, views: usize) -> Result<ClassMetrics> {
    accuracy(&clip_scores(theta, split, window, views)?, &split.labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Random half of the classes, repeated (default 10).
    Ep1,
    /// The complete class set.
    Ep2,
    /// Fixed seeded sample splits (default 3).
    Ep3,
    /// Fixed seeded class subsets of 160/220 of the classes (default 3).
    K600Split,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ep1 => "ep1",
            Protocol::Ep2 => "ep2",
            Protocol::Ep3 => "ep3",
            Protocol::K600Split => "k600split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ep1" => Ok(Protocol::Ep1),
            "ep2" => Ok(Protocol::Ep2),
            "ep3" => Ok(Protocol::Ep3),
            "k600split" | "k600" => Ok(Protocol::K600Split),
            _ => Err(Error::invalid(format!("unknown protocol {s:?}"))),
        }
    }

    pub fn default_repeats(self) -> usize {
        match self {
            Protocol::Ep1 => 10,
            Protocol::Ep2 => 1,
            Protocol::Ep3 | Protocol::K600Split => 3,
        }
    }
}

fn seeded_rng(seed: u64, tag: u64, repeat: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag, repeat as u64]))
}

/// Sorted random class subsets of size `size`, one per repeat.
pub fn class_subsets(n_classes: usize, size: usize, repeats: usize, seed: u64, tag: u64) -> Vec<Vec<usize>> {
    (0..repeats)
        .map(|r| {
            let mut idx: Vec<usize> = (0..n_classes).collect();
            idx.shuffle(&mut seeded_rng(seed, tag, r));
            let mut s = idx[..size].to_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// The half-class subsets used by [`Protocol::Ep1`].
pub fn ep1_subsets(n_classes: usize, repeats: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_classes < 2 {
        return Err(Error::invalid(format!("halving needs at least 2 classes, got {n_classes}")));
    }
    Ok(class_subsets(n_classes, n_classes / 2, repeats, seed, 1))
}

/// Held-out class subset size for the K600-style protocol.
pub fn k600_subset_size(n_classes: usize) -> usize {
    ((n_classes as f64 * 160.0 / 220.0).round() as usize).clamp(1, n_classes)
}

fn summarize(protocol: Protocol, runs: Vec<ClassMetrics>) -> ProtocolMetrics {
    let stats = |f: fn(&ClassMetrics) -> f64| {
        let n = runs.len() as f64;
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = runs.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (top1_mean, top1_std) = stats(|m| m.top1);
    let (top5_mean, top5_std) = stats(|m| m.top5);
    ProtocolMetrics { protocol, top1_mean, top1_std, top5_mean, top5_std, runs }
}

/// Applies a protocol to precomputed scores.
pub fn protocol_on_scores(
    protocol: Protocol,
    scores: &ScoreMatrix,
    labels: &[usize],
    repeats: Option<usize>,
    seed: u64,
) -> Result<ProtocolMetrics> {
    let repeats = repeats.unwrap_or(protocol.default_repeats());
    if repeats == 0 {
        return Err(Error::invalid("protocol needs at least one repeat"));
    }
    let n = scores.cols;
    let all: Vec<usize> = (0..n).collect();
    let runs = match protocol {
        Protocol::Ep2 => vec![accuracy_on(scores, labels, &all, None)?],
        Protocol::Ep1 => ep1_subsets(n, repeats, seed)?
            .iter()
            .map(|s| accuracy_on(scores, labels, s, None))
            .collect::<Result<_>>()?,
        Protocol::K600Split => class_subsets(n, k600_subset_size(n), repeats, seed, 2)
            .iter()
            .map(|s| accuracy_on(scores, labels, s, None))
            .collect::<Result<_>>()?,
        Protocol::Ep3 => (0..repeats)
            .map(|r| {
                let mut rng = seeded_rng(seed, 3, r);
                let mut rows = Vec::new();
                for c in 0..n {
                    let mut members: Vec<usize> = (0..scores.rows).filter(|&i| labels[i] == c).collect();
                    members.shuffle(&mut rng);
                    let keep = members.len().div_ceil(2);
                    rows.extend_from_slice(&members[..keep]);
                }
                rows.sort_unstable();
                accuracy_on(scores, labels, &all, Some(&rows))
            })
            .collect::<Result<_>>()?,
    };
    Ok(summarize(protocol, runs))
}

pub fn run_protocol<S: Scalar>(
    protocol: Protocol,
    theta: &Checkpoint<S>,
    split: &EvalSplit,
    repeats: Option<usize>,
    seed: u64,
    window: usize,
) -> Result<ProtocolMetrics> {
    let scores = clip_scores(theta, split, window, 1)?;
    protocol_on_scores(protocol, &scores, &split.labels, repeats, seed)
}

/// Recall@K in both directions from a `videos × texts` similarity matrix
/// whose diagonal holds the true pairs.
pub fn recall_at_k(sim: &ScoreMatrix, ks: &[usize]) -> Result<RetrievalMetrics> {
    let n = sim.rows;
    if n == 0 || sim.cols != n {
        return Err(Error::invalid("retrieval needs a non-empty square similarity matrix"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::invalid(format!("K = {k} outside 1..={n}")));
    }
    let v2t_ranks: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), i)).collect();
    let mut col = vec![0.0; n];
    let t2v_ranks: Vec<usize> = (0..n)
        .map(|j| {
            col.iter_mut().enumerate().for_each(|(i, c)| *c = sim.data[i * n + j]);
            rank_of(&col, j)
        })
        .collect();
    let recall = |ranks: &[usize]| ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)).collect();
    Ok(RetrievalMetrics { text_to_video: recall(&t2v_ranks), video_to_text: recall(&v2t_ranks) })
}

pub fn retrieval_eval<S: Scalar>(
    theta: &Checkpoint<S>,
    pairs: &[(VideoClip, TextSequence)],
    ks: &[usize],
    window: usize,
) -> Result<RetrievalMetrics> {
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            if pairs[i].1.tokens() == pairs[j].1.tokens() {
                return Err(Error::invalid(format!("captions {i} and {j} are identical")));
            }
        }
    }
    let clips: Vec<&VideoClip> = pairs.iter().map(|p| &p.0).collect();
    let texts: Vec<&TextSequence> = pairs.iter().map(|p| &p.1).collect();
    let v = encode_videos(theta, &clips, window)?;
    let t = encode_texts(theta, &texts)?;
    recall_at_k(&ScoreMatrix::from_embeddings(&v, &t), ks)
}

/// One row per λ: patch, then top-1 on the close-set and zero-shot splits.
pub fn tradeoff_sweep<S: Scalar>(
    theta_a: &Checkpoint<S>,
    theta_tuned: &Checkpoint<S>,
    grid: &[f64],
    closeset: &EvalSplit,
    zeroshot: &EvalSplit,
    window: usize,
) -> Result<Vec<SweepRow>> {
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("lambda {l} outside [0, 1]")));
    }
    grid.iter()
        .map(|&lambda| {
            let theta = final_patch(theta_a, theta_tuned, lambda)?;
            Ok(SweepRow {
                lambda,
                closeset_top1: classify_zero_shot(&theta, closeset, window, 1)?.top1,
                zeroshot_top1: classify_zero_shot(&theta, zeroshot, window, 1)?.top1,
            })
        })
        .collect()
}

/// Single images as one-frame clips, classified with frame-local attention.
pub fn image_task_eval<S: Scalar>(
    theta: &Checkpoint<S>,
    images: &[Tensor],
    labels: &[usize],
    class_texts: &[TextSequence],
) -> Result<ClassMetrics> {
    let clips = images.iter().map(|f| make_static_video(f, 1)).collect::<Result<Vec<_>>>()?;
    classify_zero_shot(theta, &EvalSplit { clips, labels: labels.to_vec(), class_texts: class_texts.to_vec() }, 1, 1)
}

/// Fraction of rows of `ours` whose zero-shot accuracy is at least that of
/// the `baseline` row with the nearest close-set accuracy. Among equally
/// near baseline rows the one with the best zero-shot accuracy is used.
pub fn dominance_fraction(ours: &[SweepRow], baseline: &[SweepRow]) -> Result<f64> {
    if ours.is_empty() || baseline.is_empty() {
        return Err(Error::invalid("dominance needs two non-empty curves"));
    }
    let wins = ours
        .iter()
        .filter(|p| {
            let dist = |b: &SweepRow| (b.closeset_top1 - p.closeset_top1).abs();
            let best = baseline.iter().map(dist).fold(f64::INFINITY, f64::min);
            let rival = baseline
                .iter()
                .filter(|b| dist(b) <= best + 1e-12)
                .map(|b| b.zeroshot_top1)
                .fold(f64::NEG_INFINITY, f64::max);
            p.zeroshot_top1 >= rival
        })
        .count();
    Ok(wins as f64 / ours.len() as f64)
}

/// `lambda,closeset_top1,zeroshot_top1` with six decimals.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,closeset_top1,zeroshot_top1\n");
    for r in rows {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", r.lambda, r.closeset_top1, r.zeroshot_top1);
    }
    out
}

/// `metric,mean,std` rows for top-1 and top-5 of each protocol.
pub fn protocol_csv(results: &[ProtocolMetrics]) -> String {
    let mut out = String::from("metric,mean,std\n");
    for m in results {
        let p = m.protocol.name();
        let _ = writeln!(out, "{p}_top1,{:.6},{:.6}", m.top1_mean, m.top1_std);
        let _ = writeln!(out, "{p}_top5,{:.6},{:.6}", m.top5_mean, m.top5_std);
    }
    out
}

/// `metric,mean,std` rows for Recall@K (std is 0 for a single run).
pub fn retrieval_csv(m: &RetrievalMetrics) -> String {
    let mut out = String::from("metric,mean,std\n");
    for (dir, rows) in [("t2v", &m.text_to_video), ("v2t", &m.video_to_text)] {
        for (k, r) in rows {
            let _ = writeln!(out, "{dir}_r{k},{r:.6},{:.6}", 0.0);
        }
    }
    out
}
