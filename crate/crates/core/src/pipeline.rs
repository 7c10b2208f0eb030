//! The end-to-end phases on a generated corpus: image-caption pretraining,
//! video fine-tuning, and the evaluation splits derived from the corpus.

use std::collections::BTreeMap;

use std::path::Path;

use crate::captionkit::{caption_dataset, CaptionBackend, CaptionOptions, CaptionStore};
use crate::datagen::{label_prompt, ClassSpec, Dataset, Shape};
use crate::evalkit::{retrieval_eval, EvalSplit, RetrievalMetrics};
use crate::model::{init_params, ModelConfig, TextSequence, VideoClip};
use crate::objectives::{PairedData, VideoTextObjective};
use crate::weightspace::{train, IwrConfig, StepRecord, SwaState};
use crate::{Checkpoint, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: IwrConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: IwrConfig {
                lr: 0.05,
                lr_floor: 0.005,
                warmup_epochs: 1,
                epochs: 30,
                batch_size: 32,
                momentum: 0.9,
                grad_clip: 1.0,
                ..IwrConfig::default()
            },
        }
    }
}

/// Interns texts, returning their index.
#[derive(Default)]
struct TextTable {
    texts: Vec<TextSequence>,
    index: BTreeMap<Vec<usize>, usize>,
}

impl TextTable {
    fn add(&mut self, t: TextSequence) -> usize {
        let key = t.tokens().to_vec();
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.texts.push(t);
        self.index.insert(key, self.texts.len() - 1);
        self.texts.len() - 1
    }
}

/// Every (image, caption template) combination as one training pair.
pub fn pretrain_pairs(ds: &Dataset) -> Result<PairedData> {
    let mut table = TextTable::default();
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    for s in &ds.pretrain {
        for cap in &s.captions {
            clips.push(s.image.clone());
            labels.push(table.add(ds.vocab.encode(cap)?));
        }
    }
    Ok(PairedData { clips, texts: table.texts, labels, captions: None })
}

/// Trains both towers from scratch on image-caption pairs, with
/// frame-local attention.
pub fn pretrain(ds: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<Checkpoint> {
    let init = init_params(&cfg.model, seed)?;
    let objective = VideoTextObjective::new(cfg.model.clone(), pretrain_pairs(ds)?, 1, true)?;
    let train_cfg = IwrConfig { r: 0.0, c: 0.0, gamma: 0.0, l2_anchor: 0.0, seed, ..cfg.train.clone() };
    let (mut theta, _) = train(&init, &init, &objective, &train_cfg, SwaState::disabled(), &mut |_, _| {})?;
    theta.set_meta("phase", "pretrain");
    theta.set_meta("seed", seed.to_string());
    Ok(theta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub iwr: IwrConfig,
    pub window: usize,
    pub swa: bool,
    /// Defaults to the warmup length in steps.
    pub swa_start: Option<usize>,
    /// Defaults to one epoch in steps.
    pub swa_cycle: Option<usize>,
    pub train_text: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iwr: IwrConfig {
                lr: 0.1,
                lr_floor: 0.01,
                warmup_epochs: 1,
                epochs: 40,
                batch_size: 32,
                momentum: 0.9,
                grad_clip: 1.0,
                ..IwrConfig::default()
            },
            window: 3,
            swa: false,
            swa_start: None,
            swa_cycle: None,
            train_text: false,
        }
    }
}

pub struct FinetuneOutput {
    /// Weights at the end of training.
    pub theta_b: Checkpoint,
    /// Running average, when enabled.
    pub swa: Option<Checkpoint>,
    pub records: Vec<StepRecord>,
}

impl FinetuneOutput {
    /// The averaged weights when available, otherwise the final weights.
    pub fn tuned(&self) -> &Checkpoint {
        self.swa.as_ref().unwrap_or(&self.theta_b)
    }
}

/// Label prompts of the seen classes, in `ds.seen` order.
pub fn seen_prompts(ds: &Dataset) -> Result<Vec<TextSequence>> {
    ds.seen.iter().map(|c| label_prompt(&ds.vocab, &c.label())).collect()
}

/// Fine-tuning pairs: each training clip with its class prompt and, when a
/// caption store is given, its generated caption.
pub fn finetune_pairs(ds: &Dataset, captions: Option<&CaptionStore>) -> Result<PairedData> {
    let mut table = TextTable::default();
    let class_idx: Vec<usize> = seen_prompts(ds)?.into_iter().map(|t| table.add(t)).collect();
    let lookup = captions.map(CaptionStore::to_map);
    let mut clips = Vec::with_capacity(ds.train.len());
    let mut labels = Vec::with_capacity(ds.train.len());
    let mut caps = Vec::new();
    for s in &ds.train {
        let c = ds.seen.iter().position(|&c| c == s.class).ok_or_else(|| Error::invalid("training clip of an unseen class"))?;
        clips.push(s.clip.clone());
        labels.push(class_idx[c]);
        if let Some(map) = &lookup {
            let text = map.get(s.id.as_str()).ok_or_else(|| Error::invalid(format!("no caption for video {}", s.id)))?;
            caps.push(table.add(ds.vocab.encode_lossy(text)?));
        }
    }
    Ok(PairedData { clips, texts: table.texts, labels, captions: lookup.map(|_| caps) })
}

/// Fine-tunes `theta_a` on the seen video classes.
pub fn finetune(ds: &Dataset, theta_a: &Checkpoint, captions: Option<&CaptionStore>, cfg: &FinetuneConfig) -> Result<FinetuneOutput> {
    let model = ModelConfig::infer(theta_a)?;
    if cfg.iwr.gamma > 0.0 && captions.is_none() {
        return Err(Error::InvalidConfig("gamma > 0 needs a caption store".into()));
    }
    let pairs = finetune_pairs(ds, if cfg.iwr.gamma > 0.0 { captions } else { None })?;
    let n = pairs.clips.len();
    let objective = VideoTextObjective::new(model, pairs, cfg.window, cfg.train_text)?;
    let swa = if cfg.swa {
        SwaState::new(
            cfg.swa_start.unwrap_or(cfg.iwr.warmup_steps(n)),
            cfg.swa_cycle.unwrap_or(cfg.iwr.steps_per_epoch(n)).max(1),
        )
    } else {
        SwaState::disabled()
    };
    let mut records = Vec::new();
    let (mut theta_b, swa) = train(theta_a, theta_a, &objective, &cfg.iwr, swa, &mut |r, _| records.push(r.clone()))?;
    theta_b.set_meta("phase", "finetune");
    let swa = swa.average::<f32>().map(|c| c.with_meta("phase", "swa"));
    Ok(FinetuneOutput { theta_b, swa, records })
}

fn split_for(ds: &Dataset, classes: &[ClassSpec], clips: &[crate::datagen::VideoSample]) -> Result<EvalSplit> {
    let class_texts = classes.iter().map(|c| label_prompt(&ds.vocab, &c.label())).collect::<Result<Vec<_>>>()?;
    let mut out_clips = Vec::with_capacity(clips.len());
    let mut labels = Vec::with_capacity(clips.len());
    for s in clips {
        if let Some(i) = classes.iter().position(|&c| c == s.class) {
            out_clips.push(s.clip.clone());
            labels.push(i);
        }
    }
    Ok(EvalSplit { clips: out_clips, labels, class_texts })
}

/// Seen-class test clips against the seen class prompts.
pub fn closeset_split(ds: &Dataset) -> Result<EvalSplit> {
    split_for(ds, &ds.seen, &ds.test_seen)
}

/// Held-out test clips against the held-out class prompts.
pub fn zeroshot_split(ds: &Dataset) -> Result<EvalSplit> {
    split_for(ds, &ds.heldout, &ds.test_heldout)
}

/// One two-way split per seen pair that shares a frame multiset.
pub fn confusable_splits(ds: &Dataset) -> Result<Vec<EvalSplit>> {
    ds.confusable_seen_pairs().into_iter().map(|(a, b)| split_for(ds, &[a, b], &ds.test_seen)).collect()
}

/// Pretraining test images against `a video of <shape>` prompts.
pub fn image_probe(ds: &Dataset) -> Result<(Vec<crate::Tensor>, Vec<usize>, Vec<TextSequence>)> {
    let texts = Shape::ALL.iter().map(|s| label_prompt(&ds.vocab, s.word())).collect::<Result<Vec<_>>>()?;
    let images = ds
        .pretrain_test
        .iter()
        .map(|s| s.image.tensor().clone().reshape(vec![s.image.height(), s.image.width()]))
        .collect::<Result<Vec<_>>>()?;
    let labels = ds.pretrain_test.iter().map(|s| s.shape.index()).collect();
    Ok((images, labels, texts))
}

/// Groups of held-out test clips, one clip per held-out class, each paired
/// with its caption. Captions within a group are distinct.
pub fn heldout_retrieval_groups(ds: &Dataset, captions: &CaptionStore) -> Result<Vec<Vec<(VideoClip, TextSequence)>>> {
    let map = captions.to_map();
    let per_class: Vec<Vec<&crate::datagen::VideoSample>> =
        ds.heldout.iter().map(|&c| ds.test_heldout.iter().filter(|s| s.class == c).collect()).collect();
    let groups = per_class.iter().map(Vec::len).min().unwrap_or(0);
    (0..groups)
        .map(|g| {
            per_class
                .iter()
                .map(|members| {
                    let s = members[g];
                    let text = map.get(s.id.as_str()).ok_or_else(|| Error::invalid(format!("no caption for video {}", s.id)))?;
                    Ok((s.clip.clone(), ds.vocab.encode_lossy(text)?))
                })
                .collect()
        })
        .collect()
}

/// Recall@K averaged over retrieval groups.
pub fn grouped_retrieval<S: crate::Scalar>(
    theta: &Checkpoint<S>,
    groups: &[Vec<(VideoClip, TextSequence)>],
    ks: &[usize],
    window: usize,
) -> Result<RetrievalMetrics> {
    if groups.is_empty() {
        return Err(Error::invalid("no retrieval groups"));
    }
    let per: Vec<RetrievalMetrics> = groups.iter().map(|g| retrieval_eval(theta, g, ks, window)).collect::<Result<_>>()?;
    let mean = |pick: fn(&RetrievalMetrics) -> &Vec<(usize, f64)>| -> Vec<(usize, f64)> {
        ks.iter()
            .enumerate()
            .map(|(i, &k)| (k, per.iter().map(|m| pick(m)[i].1).sum::<f64>() / per.len() as f64))
            .collect()
    };
    Ok(RetrievalMetrics { text_to_video: mean(|m| &m.text_to_video), video_to_text: mean(|m| &m.video_to_text) })
}

/// Captions every video of the corpus.
pub fn caption_corpus(ds: &Dataset, backend: &dyn CaptionBackend, out: Option<&Path>, opts: CaptionOptions) -> Result<CaptionStore> {
    let videos: Vec<(String, Vec<crate::datagen::FrameMeta>)> = ds.videos().map(|s| (s.id.clone(), s.frames.clone())).collect();
    caption_dataset(&videos, backend, out, opts)
}

/// `lo:hi:step` expanded inclusively, e.g. `0:1:0.1` gives 11 values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(Error::invalid(format!("grid {spec:?} is not lo:hi:step")));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("grid {spec:?}: {s:?} is not a number")));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(step > 0.0) || hi < lo {
        return Err(Error::invalid(format!("grid {spec:?} needs step > 0 and lo <= hi")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    // Values are rounded to 12 decimals so 0.1 steps print cleanly.
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12).collect())
}
