//! Contrastive objectives: the symmetric video-text loss, its caption-augmented
//! combination, the ℓ2 weight anchor, and the minibatch objective that the
//! training loop differentiates.

use std::cell::RefCell;

use crate::model::{self, Binder, Embedding, ModelConfig, TextSequence, VideoClip};
use crate::numkit::{Scalar, Tape, Tensor};
use crate::{Checkpoint, Error, Result};

/// Index-aligned video and text embeddings; pair `i` is the positive.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    video: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

impl BatchEmbeddings {
    pub fn new(video: Vec<Vec<f64>>, text: Vec<Vec<f64>>) -> Result<Self> {
        if video.is_empty() || video.len() != text.len() {
            return Err(Error::invalid(format!("need n >= 1 aligned pairs, got {} and {}", video.len(), text.len())));
        }
        let d = video[0].len();
        for row in video.iter().chain(&text) {
            if row.len() != d {
                return Err(Error::invalid("embedding dimensions differ"));
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("embedding norm {norm} is not 1")));
            }
        }
        Ok(Self { video, text })
    }

    pub fn from_embeddings(video: &[Embedding], text: &[Embedding]) -> Result<Self> {
        Self::new(
            video.iter().map(|e| e.as_slice().to_vec()).collect(),
            text.iter().map(|e| e.as_slice().to_vec()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// Mean of the video→text and text→video cross-entropies over logits
/// `inv_temp · ⟨v_i, t_j⟩`.
pub fn contrastive_loss(batch: &BatchEmbeddings, inv_temp: f64) -> Result<f64> {
    if !(inv_temp > 0.0) || !inv_temp.is_finite() {
        return Err(Error::invalid(format!("inverse temperature must be positive, got {inv_temp}")));
    }
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(matrix(&batch.video)?);
    let t = tape.constant(matrix(&batch.text)?);
    let s = tape.constant(Tensor::scalar(inv_temp));
    let l = tape.clip_loss(v, t, s)?;
    Ok(tape.value(l).item())
}

/// `loss_label + gamma · loss_caption`.
pub fn combined_caption_loss(loss_label: f64, loss_caption: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("caption weight must be nonnegative, got {gamma}")));
    }
    if !loss_label.is_finite() || !loss_caption.is_finite() {
        return Err(Error::numeric("caption loss inputs must be finite"));
    }
    Ok(loss_label + gamma * loss_caption)
}

/// `mu · Σ‖θ_k − anchor_k‖²`.
pub fn l2_anchor_loss<S: Scalar>(theta: &Checkpoint<S>, anchor: &Checkpoint<S>, mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("anchor weight must be nonnegative, got {mu}")));
    }
    theta.check_compatible(anchor)?;
    if mu == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for ((_, a), (_, b)) in theta.iter().zip(anchor.iter()) {
        total += a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>();
    }
    Ok(mu * total)
}

/// Gradient of [`l2_anchor_loss`]: `2·mu·(θ − anchor)`.
pub fn l2_anchor_grad<S: Scalar>(theta: &Checkpoint<S>, anchor: &Checkpoint<S>, mu: f64) -> Result<Checkpoint<S>> {
    let c = S::from_f64(2.0 * mu);
    theta.zip_with(anchor, |a, b| c * (a - b))
}

/// Weights of the label and caption terms in one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub label: f64,
    pub caption: f64,
}

impl TermWeights {
    pub const LABEL_ONLY: TermWeights = TermWeights { label: 1.0, caption: 0.0 };

    pub fn with_caption(gamma: f64) -> Self {
        Self { label: 1.0, caption: gamma }
    }
}

/// A loss over minibatches of sample indices that can be evaluated and
/// differentiated at any compatible checkpoint.
pub trait BatchObjective<S: Scalar> {
    fn num_samples(&self) -> usize;

    fn loss_and_grad(&self, params: &Checkpoint<S>, batch: &[usize], w: TermWeights) -> Result<(f64, Checkpoint<S>)>;

    fn loss(&self, params: &Checkpoint<S>, batch: &[usize], w: TermWeights) -> Result<f64> {
        Ok(self.loss_and_grad(params, batch, w)?.0)
    }
}

/// Training pairs: clip `i` matches text `labels[i]` and, when present,
/// caption text `captions[i]`.
#[derive(Clone, Debug)]
pub struct PairedData {
    pub clips: Vec<VideoClip>,
    pub texts: Vec<TextSequence>,
    pub labels: Vec<usize>,
    pub captions: Option<Vec<usize>>,
}

impl PairedData {
    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() || self.clips.len() != self.labels.len() {
            return Err(Error::invalid("paired data needs one label per clip"));
        }
        let n = self.texts.len();
        if self.labels.iter().any(|&l| l >= n) {
            return Err(Error::invalid("label index out of range"));
        }
        if let Some(c) = &self.captions {
            if c.len() != self.clips.len() || c.iter().any(|&i| i >= n) {
                return Err(Error::invalid("caption indices must align with clips"));
            }
        }
        Ok(())
    }
}

/// Symmetric contrastive loss between clips and their texts, optionally
/// with a second contrastive term against generated captions.
pub struct VideoTextObjective<S: Scalar> {
    cfg: ModelConfig,
    data: PairedData,
    window: usize,
    trainable: fn(&str) -> bool,
    text_cache: RefCell<Option<(String, Tensor<S>)>>,
}

fn all_params(_: &str) -> bool {
    true
}

impl<S: Scalar> VideoTextObjective<S> {
    /// `train_text = false` freezes the text tower; its embeddings are then
    /// computed once per distinct text-tower state and reused.
    pub fn new(cfg: ModelConfig, data: PairedData, window: usize, train_text: bool) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if window.is_multiple_of(2) {
            return Err(Error::invalid(format!("attention window must be odd, got {window}")));
        }
        let trainable = if train_text { all_params } else { model::is_video_trainable };
        Ok(Self { cfg, data, window, trainable, text_cache: RefCell::new(None) })
    }

    pub fn data(&self) -> &PairedData {
        &self.data
    }

    pub fn trainable(&self) -> fn(&str) -> bool {
        self.trainable
    }

    fn frozen_text_rows(&self, params: &Checkpoint<S>) -> Result<Tensor<S>> {
        let key = params.filter(model::is_text_param).digest();
        if let Some((k, t)) = self.text_cache.borrow().as_ref() {
            if *k == key {
                return Ok(t.clone());
            }
        }
        let refs: Vec<&TextSequence> = self.data.texts.iter().collect();
        let mut rows = Vec::new();
        for chunk in refs.chunks(64) {
            let mut tape = Tape::new();
            let never = |_: &str| false;
            let mut b = Binder::new(params, &never);
            let t = model::text_tower(&mut tape, &mut b, &self.cfg, chunk)?;
            rows.extend_from_slice(tape.value(t).data());
        }
        let t = Tensor::new(vec![refs.len(), self.cfg.embed_dim], rows)?;
        *self.text_cache.borrow_mut() = Some((key, t.clone()));
        Ok(t)
    }
}

impl<S: Scalar> BatchObjective<S> for VideoTextObjective<S> {
    fn num_samples(&self) -> usize {
        self.data.clips.len()
    }

    fn loss_and_grad(&self, params: &Checkpoint<S>, batch: &[usize], w: TermWeights) -> Result<(f64, Checkpoint<S>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.num_samples()) {
            return Err(Error::invalid(format!("sample index {bad} out of range")));
        }
        if w.caption != 0.0 && self.data.captions.is_none() {
            return Err(Error::invalid("caption term requested but no captions are loaded"));
        }
        if w.label == 0.0 && w.caption == 0.0 {
            return Ok((0.0, params.zeros_like()));
        }
        let trainable = self.trainable;
        let mut tape = Tape::new();
        let mut b = Binder::new(params, &trainable);
        let clips: Vec<&VideoClip> = batch.iter().map(|&i| &self.data.clips[i]).collect();
        let v = model::video_tower(&mut tape, &mut b, &self.cfg, &clips, self.window)?;
        let scale = model::inv_temp_var(&mut tape, &mut b)?;
        let frozen = if trainable("text.token_embed") { None } else { Some(self.frozen_text_rows(params)?) };
        let mut terms = Vec::new();
        let caption_ids = self.data.captions.as_deref().unwrap_or(&[]);
        for (weight, ids) in [(w.label, &self.data.labels[..]), (w.caption, caption_ids)] {
            if weight == 0.0 {
                continue;
            }
            let idx: Vec<usize> = batch.iter().map(|&i| ids[i]).collect();
            let t = match &frozen {
                Some(rows) => {
                    let d = rows.last_dim();
                    let mut data = Vec::with_capacity(idx.len() * d);
                    for &i in &idx {
                        data.extend_from_slice(rows.row(i));
                    }
                    tape.constant(Tensor::new(vec![idx.len(), d], data)?)
                }
                None => {
                    let texts: Vec<&TextSequence> = idx.iter().map(|&i| &self.data.texts[i]).collect();
                    model::text_tower(&mut tape, &mut b, &self.cfg, &texts)?
                }
            };
            let l = tape.clip_loss(v, t, scale)?;
            terms.push(tape.scale(l, S::from_f64(weight)));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::numeric("minibatch loss is not finite"));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, b.gradients(&mut grads)?))
    }
}
