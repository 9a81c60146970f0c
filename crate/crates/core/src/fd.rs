//! Finite-difference gradient checking.
//!
//! The tape's gradients are exact compositions of primitive adjoints; this
//! harness is the independent oracle that validates them. A scalar function
//! is rebuilt from raw input tensors, each sampled coordinate is perturbed
//! by ±h, and the central difference is compared against the recorded
//! gradient at that coordinate.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Builds a scalar root on `tape` from leaves bound to the checked inputs.
pub type ScalarFn<'a> = &'a dyn Fn(&Tape, &[NodeId]) -> Result<NodeId>;

/// Worst observed relative error per input argument.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval(f: ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &ids)?;
    Ok(tape.value(root).item() as f64)
}

fn perturbed(t: &Tensor, coord: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[coord] = (data[coord] as f64 + delta) as f32;
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

/// Central-difference check of `f`'s gradient w.r.t. every input, on up to
/// `samples_per_input` coordinates drawn from `rng` (all coordinates when the
/// input is small enough). Relative error uses the larger of the two values
/// as reference; pairs both below 1e-6 in magnitude count as exact.
pub fn fd_check(
    f: ScalarFn,
    inputs: &[Tensor],
    h: f64,
    samples_per_input: usize,
    rng: &mut SplitMix64,
) -> Result<FdReport> {
    // Recorded gradients at the unperturbed point.
    let tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &ids)?;
    let slots = tape.gradients(root, &ids)?;
    let grads: Vec<Tensor> = slots
        .iter()
        .zip(inputs)
        .map(|(slot, input)| match slot {
            Some(id) => tape.value(*id),
            None => Tensor::zeros(input.shape()),
        })
        .collect();

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut coords_checked = 0;
    for (arg, input) in inputs.iter().enumerate() {
        let n = input.len();
        // Per-coordinate errors are measured against the gradient's own RMS
        // scale as a floor: f32 forward noise on coordinates whose true
        // derivative nearly cancels would otherwise dominate the ratio,
        // while a genuinely wrong formula errs at RMS scale and still flags.
        let rms = (grads[arg].data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
            / n as f64)
            .sqrt();
        let coords: Vec<usize> = if n <= samples_per_input {
            (0..n).collect()
        } else {
            (0..samples_per_input).map(|_| rng.below(n)).collect()
        };
        for coord in coords {
            let fp = eval(f, &with_replaced(inputs, arg, perturbed(input, coord, h)))?;
            let fm = eval(f, &with_replaced(inputs, arg, perturbed(input, coord, -h)))?;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[arg].data()[coord] as f64;
            let denom = fd.abs().max(an.abs()).max(0.1 * rms);
            let rel = if denom < 1e-9 { 0.0 } else { (fd - an).abs() / denom };
            per_input[arg] = per_input[arg].max(rel);
            coords_checked += 1;
        }
    }
    Ok(FdReport { per_input, coords_checked })
}

fn with_replaced(inputs: &[Tensor], idx: usize, t: Tensor) -> Vec<Tensor> {
    let mut out = inputs.to_vec();
    out[idx] = t;
    out
}

/// Directional-derivative variant for deep graphs: per argument, compares
/// (f(x+hδ) − f(x−hδ))/2h against ⟨grad, δ⟩ for `dirs_per_input` random ±1
/// directions δ. The signal carries the whole gradient's magnitude, so f32
/// forward noise does not swamp depth-attenuated per-coordinate derivatives;
/// a permuted or rescaled gradient still disagrees for random δ.
pub fn fd_check_directional(
    f: ScalarFn,
    inputs: &[Tensor],
    h: f64,
    dirs_per_input: usize,
    rng: &mut SplitMix64,
) -> Result<FdReport> {
    let tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &ids)?;
    let slots = tape.gradients(root, &ids)?;
    let grads: Vec<Tensor> = slots
        .iter()
        .zip(inputs)
        .map(|(slot, input)| match slot {
            Some(id) => tape.value(*id),
            None => Tensor::zeros(input.shape()),
        })
        .collect();

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut coords_checked = 0;
    for (arg, input) in inputs.iter().enumerate() {
        let gnorm = grads[arg].data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        for _ in 0..dirs_per_input {
            // A random sign vector can happen to project weakly onto the
            // gradient, leaving the quotient dominated by forward round-off
            // rather than signal. Resample until the analytic projection is a
            // healthy fraction of the gradient norm; a direction chosen by
            // projection against a *wrong* gradient is no better aligned with
            // the discrepancy, so this biases nothing.
            let mut delta: Vec<f64> = Vec::new();
            let mut best_proj = -1.0f64;
            for _ in 0..32 {
                let cand: Vec<f64> =
                    (0..input.len()).map(|_| if rng.u01() < 0.5 { -1.0 } else { 1.0 }).collect();
                let proj: f64 =
                    grads[arg].data().iter().zip(&cand).map(|(&g, &d)| g as f64 * d).sum();
                if proj.abs() > best_proj {
                    best_proj = proj.abs();
                    delta = cand;
                }
                if best_proj >= 0.5 * gnorm {
                    break;
                }
            }
            let shift = |sign: f64| -> Tensor {
                let data: Vec<f32> = input
                    .data()
                    .iter()
                    .zip(&delta)
                    .map(|(&v, &d)| (v as f64 + sign * h * d) as f32)
                    .collect();
                Tensor::new(input.shape().to_vec(), data).expect("shape unchanged")
            };
            let fp = eval(f, &with_replaced(inputs, arg, shift(1.0)))?;
            let fm = eval(f, &with_replaced(inputs, arg, shift(-1.0)))?;
            let fd = (fp - fm) / (2.0 * h);
            let an: f64 = grads[arg].data().iter().zip(&delta).map(|(&g, &d)| g as f64 * d).sum();
            let denom = fd.abs().max(an.abs()).max(0.1 * gnorm);
            let rel = if denom < 1e-9 { 0.0 } else { (fd - an).abs() / denom };
            per_input[arg] = per_input[arg].max(rel);
            coords_checked += 1;
        }
    }
    Ok(FdReport { per_input, coords_checked })
}

/// Random tensor with entries uniform in [-1, 1); the standard fd test point.
pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let f: ScalarFn = &|tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum_all(sq))
        };
        let mut rng = SplitMix64::new(1);
        let x = random_tensor(&[6], &mut rng);
        let report = fd_check(f, &[x], 1e-3, 16, &mut rng).unwrap();
        assert!(report.max_rel_err() < 1e-2, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // f(x) = sum(x · detach(x)) evaluates to sum(x²), but the recorded
        // gradient only sees one factor (≈ x instead of 2x). The harness
        // must flag the factor-of-two discrepancy.
        let f: ScalarFn = &|tape, ids| {
            let frozen = tape.detach(ids[0]);
            let prod = tape.mul(ids[0], frozen)?;
            Ok(tape.sum_all(prod))
        };
        let mut rng = SplitMix64::new(2);
        let x = Tensor::filled(&[4], 0.8);
        let report = fd_check(f, &[x], 1e-3, 8, &mut rng).unwrap();
        assert!(report.max_rel_err() > 0.3, "{report:?}");
    }

    #[test]
    fn cubic_gradient_passes() {
        let f: ScalarFn = &|tape, ids| {
            let cubed = tape.mul(tape.mul(ids[0], ids[0])?, ids[0])?;
            Ok(tape.sum_all(cubed))
        };
        let mut rng = SplitMix64::new(3);
        let x = random_tensor(&[5], &mut rng);
        let report = fd_check(f, &[x], 1e-3, 8, &mut rng).unwrap();
        assert!(report.max_rel_err() < 1e-2, "{report:?}");
    }
}
