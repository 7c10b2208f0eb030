//! Checkpoint algebra and the optimization loop: interpolation between
//! checkpoints, the interpolated-weight regularized gradient, running weight
//! averages, and the minibatch SGD driver.

mod checkpoint;
pub mod format;

pub use checkpoint::Checkpoint;
pub use format::{decode, encode, load_checkpoint, save_checkpoint};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::mix_seed;
use crate::numkit::Scalar;
use crate::objectives::{l2_anchor_grad, l2_anchor_loss, BatchObjective, TermWeights};
use crate::{Error, Result};

#[cfg_attr(not(feature = "cli"), allow(unused_imports))]
pub(crate) use checkpoint::hex;

/// Metadata keys copied onto derived checkpoints so they stay self-describing.
const CARRIED_META: &[&str] = &["model.heads"];

fn carry_meta<A: Scalar, B: Scalar>(from: &Checkpoint<A>, to: &mut Checkpoint<B>) {
    for k in CARRIED_META {
        if let Some(v) = from.meta().get(*k) {
            to.set_meta(*k, v.clone());
        }
    }
}

/// `lam·a + (1 − lam)·b` without metadata; the endpoints are returned as
/// exact copies.
pub(crate) fn mix<S: Scalar>(a: &Checkpoint<S>, b: &Checkpoint<S>, lam: f64) -> Result<Checkpoint<S>> {
    a.check_compatible(b)?;
    let mut out = if lam == 1.0 {
        let mut c = a.clone();
        c.clear_meta();
        c
    } else if lam == 0.0 {
        let mut c = b.clone();
        c.clear_meta();
        c
    } else {
        let (la, lb) = (S::from_f64(lam), S::from_f64(1.0 - lam));
        a.zip_with(b, |x, y| la * x + lb * y)?
    };
    carry_meta(a, &mut out);
    Ok(out)
}

/// Model patching: `lam·a + (1 − lam)·b`. Metadata records both parents'
/// digests and `lam`.
pub fn interpolate<S: Scalar>(a: &Checkpoint<S>, b: &Checkpoint<S>, lam: f64) -> Result<Checkpoint<S>> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("interpolation ratio {lam} outside [0, 1]")));
    }
    let mut out = mix(a, b, lam)?;
    out.set_meta("parent.a", a.digest());
    out.set_meta("parent.b", b.digest());
    out.set_meta("lambda", format!("{lam}"));
    Ok(out)
}

/// Final inference weights `lam·θ_pretrained + (1 − lam)·θ_averaged`.
pub fn final_patch<S: Scalar>(pretrained: &Checkpoint<S>, averaged: &Checkpoint<S>, lam: f64) -> Result<Checkpoint<S>> {
    interpolate(pretrained, averaged, lam)
}

/// Hyperparameters of the regularized fine-tuning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct IwrConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate during warmup and at the end of the cosine decay.
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Upper bound of the interpolation coefficient distribution.
    pub r: f64,
    /// Weight of the interpolated term.
    pub c: f64,
    /// Weight of the caption term.
    pub gamma: f64,
    /// Weight of the ℓ2 pull towards the anchor checkpoint.
    pub l2_anchor: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Rescale the gradient to this global ℓ2 norm when it is larger; 0 disables.
    pub grad_clip: f64,
    /// Evaluate the caption part of the interpolated term at θ instead of θ̃.
    pub caption_at_theta: bool,
    pub seed: u64,
}

pub const MAX_R: f64 = 0.95;

impl Default for IwrConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lr_floor: 0.005,
            warmup_epochs: 1,
            epochs: 10,
            batch_size: 32,
            r: 0.0,
            c: 0.0,
            gamma: 0.0,
            l2_anchor: 0.0,
            momentum: 0.0,
            grad_clip: 0.0,
            caption_at_theta: false,
            seed: 0,
        }
    }
}

impl IwrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=MAX_R).contains(&self.r) {
            return bad(format!("R = {} must lie in [0, {MAX_R}]", self.r));
        }
        for (name, v) in [("C", self.c), ("gamma", self.gamma), ("l2 anchor", self.l2_anchor), ("grad clip", self.grad_clip)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be a finite nonnegative number"));
            }
        }
        if !(self.lr > 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.lr {
            return bad(format!("learning rates must satisfy 0 <= floor <= lr, got {} and {}", self.lr_floor, self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup ({}) must be shorter than training ({})", self.warmup_epochs, self.epochs));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        (samples / self.batch_size.min(samples.max(1))).max(1)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }

    pub fn warmup_steps(&self, samples: usize) -> usize {
        self.warmup_epochs * self.steps_per_epoch(samples)
    }

    /// Learning rate at 1-based `step`: the floor during warmup, then a
    /// cosine decay from `lr` down to the floor.
    pub fn lr_at(&self, step: usize, samples: usize) -> f64 {
        let warm = self.warmup_steps(samples);
        let total = self.total_steps(samples);
        if step <= warm {
            return self.lr_floor;
        }
        let span = (total - warm).saturating_sub(1).max(1) as f64;
        let p = ((step - warm - 1) as f64 / span).min(1.0);
        self.lr_floor + 0.5 * (self.lr - self.lr_floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Draws α uniformly from `[0, R)`.
pub fn sample_alpha(cfg: &IwrConfig, rng: &mut impl Rng) -> f64 {
    if cfg.r <= 0.0 {
        return 0.0;
    }
    rng.random::<f64>() * cfg.r
}

/// Interpolated-weight regularized gradient `g(θ) + C·g(θ̃)` with
/// `θ̃ = α·θ_A + (1 − α)·θ`. `loss_fn` returns a loss and its gradient.
pub fn iwr_gradient<S, F>(theta: &Checkpoint<S>, theta_a: &Checkpoint<S>, alpha: f64, c: f64, loss_fn: F) -> Result<Checkpoint<S>>
where
    S: Scalar,
    F: Fn(&Checkpoint<S>) -> Result<(f64, Checkpoint<S>)>,
{
    Ok(iwr_terms(theta, theta_a, alpha, c, &loss_fn)?.1)
}

/// Returns `(L(θ) + β·L(θ̃), g(θ) + C·g(θ̃))`.
fn iwr_terms<S, F>(theta: &Checkpoint<S>, theta_a: &Checkpoint<S>, alpha: f64, c: f64, loss_fn: &F) -> Result<(f64, Checkpoint<S>)>
where
    S: Scalar,
    F: Fn(&Checkpoint<S>) -> Result<(f64, Checkpoint<S>)>,
{
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1)")));
    }
    theta.check_compatible(theta_a)?;
    let (loss, mut grad) = loss_fn(theta)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss at theta is not finite ({loss})")));
    }
    if c == 0.0 {
        return Ok((loss, grad));
    }
    let tilde = mix(theta_a, theta, alpha)?;
    let (loss_t, grad_t) = loss_fn(&tilde)?;
    if !loss_t.is_finite() {
        return Err(Error::numeric(format!("loss at the interpolated point (alpha = {alpha}) is not finite ({loss_t})")));
    }
    grad.axpy(S::from_f64(c), &grad_t)?;
    Ok((loss + c / (1.0 - alpha) * loss_t, grad))
}

/// Running arithmetic mean of checkpoints, accumulated in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct SwaState {
    mean: Option<Checkpoint<f64>>,
    count: usize,
    /// Absorb only after this many steps.
    pub start: usize,
    /// Absorb every `cycle` steps after `start`; 0 disables averaging.
    pub cycle: usize,
}

impl SwaState {
    pub fn new(start: usize, cycle: usize) -> Self {
        Self { mean: None, count: 0, start, cycle }
    }

    pub fn disabled() -> Self {
        Self::new(0, 0)
    }

    pub fn enabled(&self) -> bool {
        self.cycle > 0
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Whether training absorbs the weights after 1-based `step`.
    pub fn due(&self, step: usize) -> bool {
        self.enabled() && step > self.start && (step - self.start).is_multiple_of(self.cycle)
    }

    pub fn mean_f64(&self) -> Option<&Checkpoint<f64>> {
        self.mean.as_ref()
    }

    pub fn average<S: Scalar>(&self) -> Option<Checkpoint<S>> {
        self.mean.as_ref().map(|m| {
            let mut c = m.cast::<S>();
            c.clear_meta();
            carry_meta(m, &mut c);
            c.set_meta("swa.count", self.count.to_string());
            c
        })
    }

    pub fn absorb<S: Scalar>(&mut self, theta: &Checkpoint<S>) -> Result<()> {
        let x = theta.cast::<f64>();
        match &mut self.mean {
            None => {
                let mut m = x;
                m.clear_meta();
                carry_meta(theta, &mut m);
                self.mean = Some(m);
            }
            Some(mean) => {
                mean.check_compatible(&x)?;
                let l = self.count as f64;
                let updated = mean.zip_with(&x, |m, t| (m * l + t) / (l + 1.0))?;
                let mut updated = updated;
                carry_meta(theta, &mut updated);
                *mean = updated;
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// `θ_SWA ← (θ_SWA·l + θ)/(l + 1)`, `l ← l + 1`.
pub fn swa_update<S: Scalar>(mut state: SwaState, theta: &Checkpoint<S>) -> Result<SwaState> {
    state.absorb(theta)?;
    Ok(state)
}

/// Seeded per-epoch shuffles cut into equal minibatches (a short tail is
/// dropped).
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    samples: usize,
    batch: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(samples: usize, batch: usize, seed: u64) -> Self {
        Self { samples, batch: batch.min(samples).max(1), seed }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0x6261_7463_68, epoch as u64]));
        order.shuffle(&mut rng);
        order.chunks_exact(self.batch).map(<[usize]>::to_vec).collect()
    }
}

/// What happened at one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss: f64,
    pub swa_absorbed: bool,
}

/// The α stream is separate from the batch stream so that disabling the
/// regularizer leaves the batch order untouched.
fn alpha_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x616c_7068_61]))
}

/// Minibatch SGD from `theta_init`, regularized towards `theta_a`.
///
/// Per step: the combined label/caption loss at θ; when `C > 0`, the same
/// batch at `θ̃ = α·θ_A + (1 − α)·θ` weighted so the gradient is
/// `g(θ) + C·g(θ̃)`; optionally the ℓ2 anchor. After each step past
/// `swa.start` that is a multiple of `swa.cycle` away from it, θ is absorbed
/// into the running average. `on_step` sees every step and the new weights.
pub fn train<S, O>(
    theta_init: &Checkpoint<S>,
    theta_a: &Checkpoint<S>,
    objective: &O,
    cfg: &IwrConfig,
    swa: SwaState,
    on_step: &mut dyn FnMut(&StepRecord, &Checkpoint<S>),
) -> Result<(Checkpoint<S>, SwaState)>
where
    S: Scalar,
    O: BatchObjective<S>,
{
    cfg.validate()?;
    theta_init.check_compatible(theta_a)?;
    let n = objective.num_samples();
    let schedule = BatchSchedule::new(n, cfg.batch_size, cfg.seed);
    let mut alphas = alpha_rng(cfg.seed);
    let mut theta = theta_init.clone();
    let mut velocity = if cfg.momentum > 0.0 { Some(theta.zeros_like()) } else { None };
    let mut swa = swa;
    let weights = TermWeights::with_caption(cfg.gamma);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in schedule.epoch(epoch) {
            step += 1;
            let alpha = if cfg.c > 0.0 { sample_alpha(cfg, &mut alphas) } else { 0.0 };
            let diverged = |e: Error| match e {
                Error::Numeric(detail) => Error::Diverged { step, alpha, detail },
                other => other,
            };
            let (mut loss, mut grad) = regularized_step(objective, &theta, theta_a, &batch, cfg, weights, alpha).map_err(diverged)?;
            if cfg.l2_anchor > 0.0 {
                loss += l2_anchor_loss(&theta, theta_a, cfg.l2_anchor)?;
                grad.axpy(S::ONE, &l2_anchor_grad(&theta, theta_a, cfg.l2_anchor)?)?;
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad.sum_sq().sqrt();
                if norm > cfg.grad_clip {
                    grad = grad.scale(S::from_f64(cfg.grad_clip / norm))?;
                }
            }
            let lr = cfg.lr_at(step, n);
            match &mut velocity {
                Some(v) => {
                    *v = v.scale(S::from_f64(cfg.momentum))?;
                    v.axpy(S::ONE, &grad)?;
                    theta.axpy(S::from_f64(-lr), v)?;
                }
                None => theta.axpy(S::from_f64(-lr), &grad)?,
            }
            if !loss.is_finite() || !theta.all_finite() {
                return Err(Error::Diverged { step, alpha, detail: format!("loss {loss}, weights finite: {}", theta.all_finite()) });
            }
            let absorb = swa.due(step);
            if absorb {
                swa.absorb(&theta)?;
            }
            on_step(&StepRecord { step, epoch, lr, alpha, loss, swa_absorbed: absorb }, &theta);
        }
    }
    carry_meta(theta_init, &mut theta);
    theta.set_meta("train.steps", step.to_string());
    theta.set_meta("train.seed", cfg.seed.to_string());
    Ok((theta, swa))
}

fn regularized_step<S: Scalar, O: BatchObjective<S>>(
    objective: &O,
    theta: &Checkpoint<S>,
    theta_a: &Checkpoint<S>,
    batch: &[usize],
    cfg: &IwrConfig,
    weights: TermWeights,
    alpha: f64,
) -> Result<(f64, Checkpoint<S>)> {
    if cfg.c == 0.0 {
        return objective.loss_and_grad(theta, batch, weights);
    }
    if !cfg.caption_at_theta || cfg.gamma == 0.0 {
        return iwr_terms(theta, theta_a, alpha, cfg.c, &|p: &Checkpoint<S>| objective.loss_and_grad(p, batch, weights));
    }
    // Literal reading: β·[L_label(θ̃) + γ·L_caption(θ)]. Its gradient is
    // C·g_label(θ̃) + β·γ·g_caption(θ).
    let label_only = TermWeights::LABEL_ONLY;
    let (mut loss, mut grad) = objective.loss_and_grad(theta, batch, weights)?;
    let tilde = mix(theta_a, theta, alpha)?;
    let (lt, gt) = objective.loss_and_grad(&tilde, batch, label_only)?;
    let beta = cfg.c / (1.0 - alpha);
    let (lc, gc) = objective.loss_and_grad(theta, batch, TermWeights { label: 0.0, caption: cfg.gamma })?;
    if !lt.is_finite() || !lc.is_finite() {
        return Err(Error::numeric(format!("interpolated term is not finite (alpha = {alpha})")));
    }
    grad.axpy(S::from_f64(cfg.c), &gt)?;
    grad.axpy(S::from_f64(beta), &gc)?;
    loss += beta * (lt + lc);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    fn vec_ck(v: &[f64]) -> Checkpoint<f64> {
        Checkpoint::from_tensors([("w".to_string(), Tensor::from_slice(&[v.len()], v).unwrap())]).unwrap()
    }

    fn w(c: &Checkpoint<f64>) -> Vec<f64> {
        c.tensor("w").unwrap().data().to_vec()
    }

    #[test]
    fn interpolate_examples() {
        let a = vec_ck(&[1.0, 0.0]);
        let b = vec_ck(&[0.0, 1.0]);
        let m = interpolate(&a, &b, 0.6).unwrap();
        assert!((w(&m)[0] - 0.6).abs() < 1e-15 && (w(&m)[1] - 0.4).abs() < 1e-15);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().digest(), a.digest());
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().digest(), b.digest());
        assert_eq!(m.meta().get("parent.a"), Some(&a.digest()));
        assert_eq!(m.meta().get("lambda").map(String::as_str), Some("0.6"));
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &vec_ck(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn negative_zero_endpoints_are_exact() {
        let a = vec_ck(&[-0.0]);
        let b = vec_ck(&[-0.0]);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().digest(), a.digest());
    }

    #[test]
    fn alpha_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = IwrConfig { r: 0.0, ..Default::default() };
        assert!((0..100).all(|_| sample_alpha(&zero, &mut rng) == 0.0));
        let cfg = IwrConfig { r: 0.6, ..Default::default() };
        let draws: Vec<f64> = (0..100_000).map(|_| sample_alpha(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|&a| (0.0..0.6).contains(&a)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.3).abs() < 0.01);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert!((0..50).all(|_| sample_alpha(&cfg, &mut r1) == sample_alpha(&cfg, &mut r2)));
    }

    fn quad(c: &Checkpoint<f64>) -> Result<(f64, Checkpoint<f64>)> {
        let x = w(c)[0];
        Ok((x * x, vec_ck(&[2.0 * x])))
    }

    #[test]
    fn iwr_closed_form() {
        let g = iwr_gradient(&vec_ck(&[1.0]), &vec_ck(&[0.0]), 0.5, 0.5, quad).unwrap();
        assert_eq!(w(&g), vec![2.5]);
        let plain = iwr_gradient(&vec_ck(&[1.0]), &vec_ck(&[0.0]), 0.5, 0.0, quad).unwrap();
        assert_eq!(w(&plain), vec![2.0]);
        let at_zero = iwr_gradient(&vec_ck(&[1.0]), &vec_ck(&[0.0]), 0.0, 0.5, quad).unwrap();
        assert_eq!(w(&at_zero), vec![3.0]);
    }

    #[test]
    fn swa_examples() {
        let s = swa_update(SwaState::new(0, 1), &vec_ck(&[1.0, 3.0])).unwrap();
        assert_eq!(s.count(), 1);
        assert_eq!(s.average::<f64>().unwrap().digest(), vec_ck(&[1.0, 3.0]).digest());
        let s = swa_update(s, &vec_ck(&[3.0, 5.0])).unwrap();
        assert_eq!(w(&s.average().unwrap()), vec![2.0, 4.0]);
        assert_eq!(s.count(), 2);
        let mean = s.average::<f64>().unwrap();
        let s2 = swa_update(s, &mean).unwrap();
        assert!(s2.average::<f64>().unwrap().max_abs_diff(&mean).unwrap() < 1e-7);
        assert!(swa_update(s2, &vec_ck(&[1.0])).is_err());
    }

    #[test]
    fn swa_schedule() {
        let s = SwaState::new(10, 5);
        let due: Vec<usize> = (1..=30).filter(|&t| s.due(t)).collect();
        assert_eq!(due, vec![15, 20, 25, 30]);
        assert!(!SwaState::disabled().due(5));
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = IwrConfig { lr: 0.1, lr_floor: 0.01, warmup_epochs: 1, epochs: 5, batch_size: 10, ..Default::default() };
        assert_eq!(cfg.steps_per_epoch(100), 10);
        assert_eq!(cfg.lr_at(1, 100), 0.01);
        assert_eq!(cfg.lr_at(10, 100), 0.01);
        assert!((cfg.lr_at(11, 100) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(50, 100) - 0.01).abs() < 1e-12);
        assert!(cfg.lr_at(30, 100) < cfg.lr_at(20, 100));
    }

    #[test]
    fn config_validation() {
        assert!(IwrConfig { r: 0.96, ..Default::default() }.validate().is_err());
        assert!(IwrConfig { c: -1.0, ..Default::default() }.validate().is_err());
        assert!(IwrConfig { r: 0.6, c: 0.5, gamma: 4.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn batches_are_seeded_partitions() {
        let s = BatchSchedule::new(10, 3, 4);
        let e0 = s.epoch(0);
        assert_eq!(e0.len(), 3);
        assert_eq!(e0, s.epoch(0));
        assert_ne!(e0, s.epoch(1));
        let mut all: Vec<usize> = e0.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
    }
}
