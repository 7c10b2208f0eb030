use super::{Scalar, Tensor};
use crate::{Checkpoint, Result};

/// Central-difference gradient of `f` at `theta`, one coordinate at a time:
/// `(f(θ + eps·e) − f(θ − eps·e)) / (2·eps)`.
///
/// The perturbation is applied in the checkpoint's own precision, so an
/// exact oracle needs an f64 checkpoint.
pub fn finite_diff_grad<S, F>(f: F, theta: &Checkpoint<S>, eps: f64) -> Result<Checkpoint<S>>
where
    S: Scalar,
    F: Fn(&Checkpoint<S>) -> Result<f64>,
{
    let mut out = Checkpoint::new();
    for name in theta.names().map(str::to_owned).collect::<Vec<_>>() {
        let n = theta.tensor(&name)?.len();
        let idx: Vec<usize> = (0..n).collect();
        let g = finite_diff_coords(&f, theta, eps, &name, &idx)?;
        let shape = theta.tensor(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, g.into_iter().map(S::from_f64).collect())?)?;
    }
    Ok(out)
}

/// Central differences for selected flat indices of one named tensor.
pub fn finite_diff_coords<S, F>(
    f: F,
    theta: &Checkpoint<S>,
    eps: f64,
    name: &str,
    indices: &[usize],
) -> Result<Vec<f64>>
where
    S: Scalar,
    F: Fn(&Checkpoint<S>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(crate::Error::invalid("finite difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut grads = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = theta.tensor(name)?.data()[i];
        let set = |probe: &mut Checkpoint<S>, v: S| {
            probe.get_mut(name).expect("name exists").data_mut()[i] = v;
        };
        set(&mut probe, S::from_f64(orig.to_f64() + eps));
        let plus = f(&probe)?;
        set(&mut probe, S::from_f64(orig.to_f64() - eps));
        let minus = f(&probe)?;
        set(&mut probe, orig);
        grads.push((plus - minus) / (2.0 * eps));
    }
    Ok(grads)
}

/// `max|got − want| / max(max|want|, 1e-12)`.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|b| b.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

/// Largest per-tensor [`relative_error`] between two gradient checkpoints.
pub fn max_relative_error<A: Scalar, B: Scalar>(got: &Checkpoint<A>, want: &Checkpoint<B>) -> Result<f64> {
    got.check_compatible(want)?;
    let mut worst = 0.0f64;
    for ((_, a), (_, b)) in got.iter().zip(want.iter()) {
        let a: Vec<f64> = a.data().iter().map(|x| x.to_f64()).collect();
        let b: Vec<f64> = b.data().iter().map(|x| x.to_f64()).collect();
        worst = worst.max(relative_error(&a, &b));
    }
    Ok(worst)
}
