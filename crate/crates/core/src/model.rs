//! Dual encoder: a patch transformer over video frames whose attention can
//! reach neighbouring frames, and a word-level text transformer. Both towers
//! mean-pool, project and ℓ2-normalize into a shared embedding space.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numkit::{AttnLayout, Gradients, Scalar, Tape, Tensor, Var};
use crate::{Checkpoint, Error, Result};

/// `T × H × W` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::invalid(format!("clip must be T x H x W, got {:?}", frames.shape())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("clip value {v} outside [0, 1]")));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Frames reordered so that output frame `i` is input frame `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.frames()];
        for &o in order {
            if o >= self.frames() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::invalid(format!("{order:?} is not a permutation of the frames")));
            }
        }
        if order.len() != self.frames() {
            return Err(Error::invalid(format!("{order:?} is not a permutation of the frames")));
        }
        self.select(order)
    }

    pub fn reversed(&self) -> Self {
        let order: Vec<usize> = (0..self.frames()).rev().collect();
        self.select(&order).expect("reversal is a valid selection")
    }

    /// Contiguous frames `start .. start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::invalid(format!("frames {start}..{} out of range", start + len)));
        }
        self.select(&(start..start + len).collect::<Vec<_>>())
    }

    fn select(&self, order: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(order.len() * self.height() * self.width());
        for &t in order {
            data.extend_from_slice(self.frame(t));
        }
        Ok(Self { frames: Tensor::new(vec![order.len(), self.height(), self.width()], data)? })
    }
}

/// Token ids with a non-pad prefix of length `len` followed by pad (id 0).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextSequence {
    ids: Vec<usize>,
    len: usize,
}

pub const PAD_ID: usize = 0;

impl TextSequence {
    /// Pads `tokens` to `padded_len`. Tokens must be non-pad ids below `vocab_size`.
    pub fn new(tokens: Vec<usize>, padded_len: usize, vocab_size: usize) -> Result<Self> {
        if tokens.len() > padded_len {
            return Err(Error::invalid(format!("{} tokens exceed the maximum of {padded_len}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t == PAD_ID || t >= vocab_size) {
            return Err(Error::invalid(format!("token id {bad} invalid for vocabulary of {vocab_size}")));
        }
        let len = tokens.len();
        let mut ids = tokens;
        ids.resize(padded_len, PAD_ID);
        Ok(Self { ids, len })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.len]
    }

    pub fn padded(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    /// Same tokens with a different amount of trailing padding.
    pub fn repadded(&self, padded_len: usize) -> Result<Self> {
        if padded_len < self.len {
            return Err(Error::invalid("cannot repad below the token count"));
        }
        let mut ids = self.tokens().to_vec();
        ids.resize(padded_len, PAD_ID);
        Ok(Self { ids, len: self.len })
    }
}

/// Unit-norm vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("embedding must be a non-zero finite vector"));
        }
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two embeddings.
pub fn similarity(v: &Embedding, t: &Embedding) -> Result<f64> {
    cosine(v.as_slice(), t.as_slice())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub init_inv_temp: f64,
}

pub const INV_TEMP_MIN: f64 = 1.0;
pub const INV_TEMP_MAX: f64 = 100.0;
pub const LOGIT_SCALE: &str = "logit_scale";

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_size: 16,
            patch: 4,
            dim: 32,
            heads: 2,
            layers: 2,
            mlp_hidden: 64,
            embed_dim: 16,
            vocab_size: crate::datagen::Vocab::default().len(),
            max_text_len: crate::datagen::MAX_TEXT_LEN,
            init_inv_temp: 14.0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self { frame_size: 8, patch: 4, dim: 8, heads: 2, layers: 1, mlp_hidden: 8, embed_dim: 4, max_text_len: 6, ..Self::default() }
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.frame_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.patch == 0 || !self.frame_size.is_multiple_of(self.patch) {
            return fail(format!("patch {} must divide frame size {}", self.patch, self.frame_size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if [self.dim, self.layers, self.mlp_hidden, self.embed_dim, self.max_text_len].contains(&0) {
            return fail("model sizes must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary needs a pad token and at least one word".into());
        }
        if !(INV_TEMP_MIN..=INV_TEMP_MAX).contains(&self.init_inv_temp) {
            return fail(format!("inverse temperature {} outside [1, 100]", self.init_inv_temp));
        }
        Ok(())
    }

    /// Recovers the configuration from parameter shapes. The head count is
    /// not visible in shapes and is read from the `model.heads` metadata key
    /// (default 2).
    pub fn infer<S: Scalar>(params: &Checkpoint<S>) -> Result<Self> {
        let shape = |n: &str| params.tensor(n).map(|t| t.shape().to_vec());
        let pe = shape("video.patch_embed")?;
        let pos = shape("video.pos_embed")?;
        let proj = shape("video.proj")?;
        let tok = shape("text.token_embed")?;
        let tpos = shape("text.pos_embed")?;
        let fc1 = shape("video.blocks.0.fc1.weight")?;
        let layers = (0..).take_while(|i| params.get(&format!("video.blocks.{i}.qkv.weight")).is_some()).count();
        let patch = (pe[0] as f64).sqrt().round() as usize;
        let grid = (pos[0] as f64).sqrt().round() as usize;
        let heads = match params.meta().get("model.heads") {
            Some(h) => h.parse().map_err(|_| Error::InvalidConfig(format!("bad model.heads {h:?}")))?,
            None => 2,
        };
        let cfg = Self {
            frame_size: patch * grid,
            patch,
            dim: pe[1],
            heads,
            layers,
            mlp_hidden: fc1[1],
            embed_dim: proj[1],
            vocab_size: tok[0],
            max_text_len: tpos[0],
            init_inv_temp: 14.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut out = vec![
            ("video.patch_embed".to_string(), vec![self.patch_dim(), d]),
            ("video.patch_bias".to_string(), vec![d]),
            ("video.pos_embed".to_string(), vec![self.tokens_per_frame(), d]),
            ("text.token_embed".to_string(), vec![self.vocab_size, d]),
            ("text.pos_embed".to_string(), vec![self.max_text_len, d]),
        ];
        for tower in ["video", "text"] {
            for l in 0..self.layers {
                let p = format!("{tower}.blocks.{l}");
                out.extend([
                    (format!("{p}.ln1.gamma"), vec![d]),
                    (format!("{p}.ln1.beta"), vec![d]),
                    (format!("{p}.qkv.weight"), vec![d, 3 * d]),
                    (format!("{p}.qkv.bias"), vec![3 * d]),
                    (format!("{p}.attn_out.weight"), vec![d, d]),
                    (format!("{p}.attn_out.bias"), vec![d]),
                    (format!("{p}.ln2.gamma"), vec![d]),
                    (format!("{p}.ln2.beta"), vec![d]),
                    (format!("{p}.fc1.weight"), vec![d, self.mlp_hidden]),
                    (format!("{p}.fc1.bias"), vec![self.mlp_hidden]),
                    (format!("{p}.fc2.weight"), vec![self.mlp_hidden, d]),
                    (format!("{p}.fc2.bias"), vec![d]),
                ]);
            }
            out.push((format!("{tower}.ln_post.gamma"), vec![d]));
            out.push((format!("{tower}.ln_post.beta"), vec![d]));
            out.push((format!("{tower}.proj"), vec![d, self.embed_dim]));
        }
        out.push((LOGIT_SCALE.to_string(), vec![1]));
        out
    }
}

/// Random initialization, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = Checkpoint::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or("");
        let data: Vec<f32> = if name == LOGIT_SCALE {
            vec![cfg.init_inv_temp as f32]
        } else if leaf == "gamma" {
            vec![1.0; n]
        } else if leaf == "beta" || leaf == "bias" || name.ends_with("patch_bias") {
            vec![0.0; n]
        } else {
            let std = match leaf {
                "pos_embed" => 0.5,
                "token_embed" => 1.0,
                _ => {
                    let fan_in = shape[0] as f64;
                    let damp = if name.contains("attn_out") || name.contains("fc2") { 0.5 } else { 1.0 };
                    damp / fan_in.sqrt()
                }
            };
            let dist = Normal::new(0.0, std).map_err(|e| Error::numeric(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        };
        ckpt.insert(name, Tensor::new(shape, data)?)?;
    }
    ckpt.set_meta("model.heads", cfg.heads.to_string());
    Ok(ckpt)
}

pub fn is_text_param(name: &str) -> bool {
    name.starts_with("text.")
}

/// Parameters updated during video fine-tuning with a frozen text tower.
pub fn is_video_trainable(name: &str) -> bool {
    name.starts_with("video.") || name == LOGIT_SCALE
}

/// Lazily places parameters on a tape, as differentiable leaves when
/// `trainable` says so and as constants otherwise.
pub struct Binder<'a, S: Scalar> {
    params: &'a Checkpoint<S>,
    trainable: &'a dyn Fn(&str) -> bool,
    vars: BTreeMap<String, Var>,
}

impl<'a, S: Scalar> Binder<'a, S> {
    pub fn new(params: &'a Checkpoint<S>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { params, trainable, vars: BTreeMap::new() }
    }

    pub fn var(&mut self, tape: &mut Tape<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.tensor(name)?.clone();
        let v = if (self.trainable)(name) { tape.param(t) } else { tape.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Full-shape gradient checkpoint; untouched or frozen tensors get zeros.
    pub fn gradients(&self, grads: &mut Gradients<S>) -> Result<Checkpoint<S>> {
        let mut out = Checkpoint::new();
        for (name, t) in self.params.iter() {
            let g = match self.vars.get(name) {
                Some(&v) if (self.trainable)(name) => grads.take(v),
                _ => Tensor::zeros(t.shape()),
            };
            out.insert(name, g)?;
        }
        Ok(out)
    }
}

fn linear<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<S>, x: Var, prefix: &str) -> Result<Var> {
    let w = b.var(tape, &format!("{prefix}.weight"))?;
    let bias = b.var(tape, &format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, bias)
}

fn layer_norm<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<S>, x: Var, prefix: &str) -> Result<Var> {
    let g = b.var(tape, &format!("{prefix}.gamma"))?;
    let beta = b.var(tape, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, beta)
}

fn block<S: Scalar>(
    tape: &mut Tape<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    x: Var,
    prefix: &str,
    layout: &Arc<AttnLayout>,
) -> Result<Var> {
    let h = layer_norm(tape, b, x, &format!("{prefix}.ln1"))?;
    let qkv = linear(tape, b, h, &format!("{prefix}.qkv"))?;
    let a = tape.attention(qkv, cfg.heads, layout.clone())?;
    let o = linear(tape, b, a, &format!("{prefix}.attn_out"))?;
    let x = tape.add(x, o)?;
    let h = layer_norm(tape, b, x, &format!("{prefix}.ln2"))?;
    let h = linear(tape, b, h, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h);
    let h = linear(tape, b, h, &format!("{prefix}.fc2"))?;
    tape.add(x, h)
}

fn head<S: Scalar>(
    tape: &mut Tape<S>,
    b: &mut Binder<S>,
    x: Var,
    tower: &str,
    seqs: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let x = layer_norm(tape, b, x, &format!("{tower}.ln_post"))?;
    let pooled = tape.masked_mean(x, seqs, mask)?;
    let proj = b.var(tape, &format!("{tower}.proj"))?;
    let e = tape.matmul(pooled, proj)?;
    tape.l2_normalize(e)
}

/// Rows are `(clip, frame, patch)`, columns the patch pixels in raster order.
fn patchify<S: Scalar>(cfg: &ModelConfig, clips: &[&VideoClip]) -> Result<Tensor<S>> {
    let t = clips[0].frames();
    let (fs, p) = (cfg.frame_size, cfg.patch);
    let g = fs / p;
    let mut out = Vec::with_capacity(clips.len() * t * fs * fs);
    for clip in clips {
        if clip.frames() != t || clip.height() != fs || clip.width() != fs {
            return Err(Error::invalid(format!(
                "clip shape {:?} does not match batch ({t} x {fs} x {fs})",
                clip.tensor().shape()
            )));
        }
        for f in 0..t {
            let frame = clip.frame(f);
            for pr in 0..g {
                for pc in 0..g {
                    for i in 0..p {
                        let row = (pr * p + i) * fs + pc * p;
                        out.extend(frame[row..row + p].iter().map(|&v| S::from_f64(v as f64)));
                    }
                }
            }
        }
    }
    Tensor::new(vec![clips.len() * t * g * g, p * p], out)
}

/// Records the video tower for a batch of equal-length clips. Returns the
/// `batch × embed_dim` matrix of unit-norm embeddings.
pub fn video_tower<S: Scalar>(
    tape: &mut Tape<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    clips: &[&VideoClip],
    window: usize,
) -> Result<Var> {
    if window.is_multiple_of(2) {
        return Err(Error::invalid(format!("attention window must be odd, got {window}")));
    }
    if clips.is_empty() {
        return Err(Error::invalid("empty clip batch"));
    }
    let pixels = tape.constant(patchify(cfg, clips)?);
    let we = b.var(tape, "video.patch_embed")?;
    let be = b.var(tape, "video.patch_bias")?;
    let pos = b.var(tape, "video.pos_embed")?;
    let x = tape.matmul(pixels, we)?;
    let x = tape.add_bias(x, be)?;
    let mut x = tape.add_tiled(x, pos)?;
    let layout = Arc::new(AttnLayout {
        seqs: clips.len(),
        frames: clips[0].frames(),
        tokens: cfg.tokens_per_frame(),
        window,
        key_mask: None,
    });
    for l in 0..cfg.layers {
        x = block(tape, b, cfg, x, &format!("video.blocks.{l}"), &layout)?;
    }
    head(tape, b, x, "video", clips.len(), None)
}

/// Records the text tower. Pad tokens are masked out of attention and pooling.
pub fn text_tower<S: Scalar>(
    tape: &mut Tape<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    texts: &[&TextSequence],
) -> Result<Var> {
    if texts.is_empty() {
        return Err(Error::invalid("empty text batch"));
    }
    // Padding beyond the longest sequence is masked anyway, so it is dropped.
    let len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
    if len > cfg.max_text_len {
        return Err(Error::invalid(format!("text length {len} exceeds {}", cfg.max_text_len)));
    }
    let mut ids = Vec::with_capacity(texts.len() * len);
    let mut mask = Vec::with_capacity(texts.len() * len);
    for t in texts {
        if t.is_empty() {
            return Err(Error::invalid("cannot encode an all-pad text sequence"));
        }
        if let Some(&bad) = t.tokens().iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        for i in 0..len {
            ids.push(t.padded().get(i).copied().unwrap_or(PAD_ID));
            mask.push(i < t.len());
        }
    }
    let table = b.var(tape, "text.token_embed")?;
    let pos_table = b.var(tape, "text.pos_embed")?;
    let x = tape.gather(table, &ids)?;
    let pos = tape.gather(pos_table, &(0..len).collect::<Vec<_>>())?;
    let mut x = tape.add_tiled(x, pos)?;
    let layout = Arc::new(AttnLayout { seqs: texts.len(), frames: 1, tokens: len, window: 1, key_mask: Some(mask.clone()) });
    for l in 0..cfg.layers {
        x = block(tape, b, cfg, x, &format!("text.blocks.{l}"), &layout)?;
    }
    head(tape, b, x, "text", texts.len(), Some(Arc::new(mask)))
}

/// `clamp(logit_scale, 1, 100)` as a tape scalar.
pub fn inv_temp_var<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<S>) -> Result<Var> {
    let s = b.var(tape, LOGIT_SCALE)?;
    Ok(tape.clamp(s, S::from_f64(INV_TEMP_MIN), S::from_f64(INV_TEMP_MAX)))
}

pub fn inv_temp<S: Scalar>(params: &Checkpoint<S>) -> Result<f64> {
    Ok(params.tensor(LOGIT_SCALE)?.data()[0].to_f64().clamp(INV_TEMP_MIN, INV_TEMP_MAX))
}

const ENCODE_CHUNK: usize = 64;

fn rows_to_embeddings<S: Scalar>(t: &Tensor<S>) -> Result<Vec<Embedding>> {
    (0..t.rows()).map(|r| Embedding::new(t.row(r).iter().map(|v| v.to_f64()).collect())).collect()
}

fn no_grad(_: &str) -> bool {
    false
}

/// Embeds a list of clips (processed in chunks of equal-length clips).
pub fn encode_videos<S: Scalar>(params: &Checkpoint<S>, clips: &[&VideoClip], window: usize) -> Result<Vec<Embedding>> {
    let cfg = ModelConfig::infer(params)?;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let mut b = Binder::new(params, &no_grad);
        let v = video_tower(&mut tape, &mut b, &cfg, chunk, window)?;
        out.extend(rows_to_embeddings(tape.value(v))?);
    }
    Ok(out)
}

pub fn encode_video<S: Scalar>(params: &Checkpoint<S>, clip: &VideoClip, window: usize) -> Result<Embedding> {
    Ok(encode_videos(params, &[clip], window)?.remove(0))
}

pub fn encode_texts<S: Scalar>(params: &Checkpoint<S>, texts: &[&TextSequence]) -> Result<Vec<Embedding>> {
    let cfg = ModelConfig::infer(params)?;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let mut b = Binder::new(params, &no_grad);
        let t = text_tower(&mut tape, &mut b, &cfg, chunk)?;
        out.extend(rows_to_embeddings(tape.value(t))?);
    }
    Ok(out)
}

pub fn encode_text<S: Scalar>(params: &Checkpoint<S>, text: &TextSequence) -> Result<Embedding> {
    Ok(encode_texts(params, &[text])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_static_video, render_frame, Cell, Shape, Vocab};
    use rand::Rng;

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, size: usize) -> VideoClip {
        let data = (0..t * size * size).map(|_| rng.random::<f32>()).collect();
        VideoClip::new(Tensor::new(vec![t, size, size], data).unwrap()).unwrap()
    }

    fn max_diff(a: &Embedding, b: &Embedding) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn param_names_have_no_temporal_embedding() {
        let p = init_params(&ModelConfig::default(), 0).unwrap();
        assert!(p.names().all(|n| !n.contains("temporal") && !n.contains("time")));
        assert_eq!(ModelConfig::infer(&p).unwrap(), ModelConfig::default());
    }

    #[test]
    fn static_clip_window_equivalence() {
        let p = init_params(&ModelConfig::default(), 3).unwrap();
        let f = render_frame(Shape::Triangle, Cell { row: 1, col: 3 }, 2, 0.05).unwrap();
        let clip = make_static_video(&f, 4).unwrap();
        let a = encode_video(&p, &clip, 1).unwrap();
        let b = encode_video(&p, &clip, 3).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn window_one_is_permutation_invariant() {
        let p = init_params(&ModelConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = random_clip(&mut rng, 4, 16);
        let base = encode_video(&p, &clip, 1).unwrap();
        let perm = clip.permuted(&[2, 0, 3, 1]).unwrap();
        assert!(max_diff(&base, &encode_video(&p, &perm, 1).unwrap()) <= 1e-5);
    }

    #[test]
    fn window_three_is_reversal_invariant_but_order_sensitive() {
        let p = init_params(&ModelConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = random_clip(&mut rng, 4, 16);
        let base = encode_video(&p, &clip, 3).unwrap();
        assert!(max_diff(&base, &encode_video(&p, &clip.reversed(), 3).unwrap()) <= 1e-5);
        let swapped = clip.permuted(&[0, 2, 1, 3]).unwrap();
        assert!(max_diff(&base, &encode_video(&p, &swapped, 3).unwrap()) > 1e-4);
    }

    #[test]
    fn even_window_rejected() {
        let p = init_params(&ModelConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = random_clip(&mut rng, 4, 16);
        assert!(matches!(encode_video(&p, &clip, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn text_padding_is_masked() {
        let p = init_params(&ModelConfig::default(), 6).unwrap();
        let v = Vocab::default();
        let t = v.encode("a video of ring zigzag").unwrap();
        let short = t.repadded(7).unwrap();
        let a = encode_text(&p, &t).unwrap();
        let b = encode_text(&p, &short).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5);
        assert_eq!(a, encode_text(&p, &t).unwrap());
        let norm: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn batched_texts_of_mixed_length_match_single() {
        let p = init_params(&ModelConfig::default(), 8).unwrap();
        let v = Vocab::default();
        let long = v.encode("the image shows a cross in the grid").unwrap();
        let short = v.encode("a video of cross").unwrap();
        let both = encode_texts(&p, &[&long, &short]).unwrap();
        assert!(max_diff(&both[1], &encode_text(&p, &short).unwrap()) <= 1e-5);
        assert!(max_diff(&both[0], &encode_text(&p, &long).unwrap()) <= 1e-5);
    }

    #[test]
    fn all_pad_text_rejected() {
        let p = init_params(&ModelConfig::default(), 6).unwrap();
        let empty = TextSequence::new(vec![], 24, 28).unwrap();
        assert!(matches!(encode_text(&p, &empty), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn similarity_examples() {
        let e = |v: Vec<f64>| Embedding::new(v).unwrap();
        let a = e(vec![1.0, 0.0]);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &e(vec![0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(similarity(&a, &e(vec![-1.0, 0.0])).unwrap(), -1.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn clip_value_range_checked() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.5, 0.0, 0.0]).unwrap();
        assert!(VideoClip::new(t).is_err());
    }
}
