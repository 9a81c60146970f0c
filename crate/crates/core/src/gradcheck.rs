//! The runnable gradient-verification suite: every differentiable operation
//! — elementwise arithmetic, activations, reductions, shape ops, the
//! convolution pair, warping, resizing, and the full loss stack including
//! the twice-differentiated gradient penalty — checked against central
//! finite differences at toy sizes over several seeds.
//!
//! Shallow graphs are checked coordinate-by-coordinate. Scalars that pass
//! through the six-layer critic are checked along random directions against
//! the last conv layer's weights: perturbing that layer flips no hidden
//! activation and single-layer coupling keeps the finite-difference signal
//! far above f32 round-off, where per-coordinate probes of the deeper
//! tensors drown in it. The critic weights are doubled first — stock
//! initialization attenuates the response scale below what forward round-off
//! resolves — which exercises the identical code path.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fd::{fd_check, fd_check_directional, random_tensor, ScalarFn};
use crate::loss::{
    adv_loss_tape, corrcoef_tape, covariance_tape, critic_loss_tape, dis_loss_tape,
    gradient_penalty_tape, joint_deformation_tape, rec_loss_tape,
};
use crate::net::{init_discriminator, DiscConfig, ParamSet};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const H: f64 = 1e-3;
/// Step for scalars at most quadratic in every input (the convolution pair,
/// the plain reductions): central differences are exact through second
/// order, so a wider step carries no truncation error and only suppresses
/// f32 forward round-off.
const H_LINEAR: f64 = 5e-2;
const TOL: f64 = 1e-2;

/// Result of one named check, worst case over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub schema: u32,
    pub seeds: usize,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
    pub elapsed_seconds: f64,
}

/// Random tensor whose entries keep a margin away from zero, so kinked ops
/// (relu, the warp's cell boundaries) see no sign flip within ±h.
fn margin_tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, span: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let mag = rng.uniform(lo, lo + span);
            if rng.u01() < 0.5 { -mag as f32 } else { mag as f32 }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn positive_tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(lo, hi) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Critic parameters with every weight doubled (biases stay zero).
fn amplified_critic(cfg: &DiscConfig, seed: u64) -> Result<ParamSet> {
    let mut params = init_discriminator(cfg, seed)?;
    for i in 0..params.len() {
        let (name, t) = &params.entries()[i];
        if !name.ends_with(".weight") {
            continue;
        }
        let doubled = t.map(|v| 2.0 * v);
        params.set_value(i, doubled)?;
    }
    Ok(params)
}

struct Check {
    name: &'static str,
    run: Box<dyn Fn(u64) -> Result<f64>>,
}

fn coordinate_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, run: Box<dyn Fn(u64) -> Result<f64>>| {
        checks.push(Check { name, run });
    };

    push(
        "add",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 1);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.mul(t.add(ids[0], ids[1])?, ids[0])?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "sub",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 2);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.mul(t.sub(ids[0], ids[1])?, ids[1])?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "mul",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 3);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.mul(ids[0], ids[1])?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "div",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 4);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            // Shift the denominator to [2, 4]: well away from its pole.
            let f: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.div(ids[0], t.add_scalar(ids[1], 3.0))?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "scale-shift",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 5);
            let a = random_tensor(&[3, 3], &mut rng);
            let f: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.mul(t.add_scalar(t.scale(ids[0], 2.5), 0.7), ids[0])?));
            Ok(fd_check(f, &[a], H, 9, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "relu",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 6);
            let a = margin_tensor(&[2, 3, 4], &mut rng, 0.05, 1.0);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.mul(t.relu(ids[0]), ids[1])?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "sigmoid",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 7);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.mul(t.sigmoid(ids[0]), ids[1])?));
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "sqrt",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 8);
            let a = positive_tensor(&[2, 3, 4], &mut rng, 0.5, 1.5);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.sqrt(ids[0])));
            Ok(fd_check(f, &[a], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "l2-norm",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 9);
            let a = random_tensor(&[3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| t.l2_norm(ids[0]);
            Ok(fd_check(f, &[a], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "reductions",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 10);
            let a = random_tensor(&[2, 3, 4], &mut rng);
            let b = random_tensor(&[2, 3, 4], &mut rng);
            let f: ScalarFn = &|t, ids| {
                let quad = t.scale(t.sum_all(t.mul(ids[0], ids[0])?), 0.25);
                t.add(quad, t.mean_all(t.mul(ids[0], ids[1])?))
            };
            Ok(fd_check(f, &[a, b], H_LINEAR, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "broadcast",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 11);
            let s = random_tensor(&[1], &mut rng);
            let b = random_tensor(&[2, 2, 2], &mut rng);
            let f: ScalarFn =
                &|t, ids| Ok(t.sum_all(t.mul(t.broadcast(ids[0], &[2, 2, 2])?, ids[1])?));
            Ok(fd_check(f, &[s, b], H, 9, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "bias-add",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 12);
            let x = random_tensor(&[3, 2, 2, 2], &mut rng);
            let bias = random_tensor(&[3], &mut rng);
            let w = random_tensor(&[3, 2, 2, 2], &mut rng);
            let f: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.mul(t.add_chan_bias(ids[0], ids[1])?, ids[2])?));
            Ok(fd_check(f, &[x, bias, w], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "spatial-reduction",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 13);
            let x = random_tensor(&[3, 2, 2, 2], &mut rng);
            let w = random_tensor(&[3, 2, 2, 2], &mut rng);
            let f: ScalarFn = &|t, ids| {
                let per_chan = t.sum_spatial(t.mul(ids[0], ids[1])?)?;
                let back = t.broadcast_chan(per_chan, [2, 2, 2])?;
                Ok(t.mean_all(t.mul(back, ids[0])?))
            };
            Ok(fd_check(f, &[x, w], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "concat-slice",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 14);
            let a = random_tensor(&[2, 3, 3, 3], &mut rng);
            let b = random_tensor(&[1, 3, 3, 3], &mut rng);
            let w = random_tensor(&[2, 3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| {
                let cat = t.concat_ch(ids[0], ids[1])?;
                Ok(t.mean_all(t.mul(t.slice_ch(cat, 1, 3)?, ids[2])?))
            };
            Ok(fd_check(f, &[a, b, w], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "conv3d",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 15);
            let x = random_tensor(&[2, 4, 4, 4], &mut rng);
            let k = random_tensor(&[2, 2, 4, 4, 4], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            let mut worst = 0.0f64;
            for stride in [1usize, 2] {
                let f: ScalarFn =
                    &|t, ids| Ok(t.mean_all(t.conv3d(ids[0], ids[1], ids[2], stride)?));
                let r = fd_check(f, &[x.clone(), k.clone(), b.clone()], H_LINEAR, 10, &mut rng)?;
                worst = worst.max(r.max_rel_err());
            }
            Ok(worst)
        }),
    );
    push(
        "tconv3d",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 16);
            let x = random_tensor(&[2, 2, 2, 2], &mut rng);
            let k = random_tensor(&[2, 3, 4, 4, 4], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let f: ScalarFn = &|t, ids| Ok(t.mean_all(t.tconv3d(ids[0], ids[1], ids[2], 2)?));
            Ok(fd_check(f, &[x, k, b], H_LINEAR, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "warp",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 17);
            let img = random_tensor(&[1, 4, 4, 4], &mut rng);
            // Displacements keep off the sampling lattice so ±h stays inside
            // one interpolation cell.
            let field = margin_tensor(&[3, 4, 4, 4], &mut rng, 0.05, 0.3);
            let w = random_tensor(&[1, 4, 4, 4], &mut rng);
            let f: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.mul(t.warp(ids[0], ids[1])?, ids[2])?));
            Ok(fd_check(f, &[img, field, w], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "resize",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 18);
            let x = random_tensor(&[2, 3, 3, 3], &mut rng);
            let w_up = random_tensor(&[2, 5, 5, 5], &mut rng);
            let up: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.mul(t.resize(ids[0], [5, 5, 5])?, ids[1])?));
            let r_up = fd_check(up, &[x.clone(), w_up], H, 10, &mut rng)?;
            let w_down = random_tensor(&[2, 2, 2, 2], &mut rng);
            let down: ScalarFn =
                &|t, ids| Ok(t.mean_all(t.mul(t.resize(ids[0], [2, 2, 2])?, ids[1])?));
            let r_down = fd_check(down, &[x, w_down], H, 10, &mut rng)?;
            Ok(r_up.max_rel_err().max(r_down.max_rel_err()))
        }),
    );
    push(
        "covariance",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 19);
            let a = random_tensor(&[1, 3, 3, 3], &mut rng);
            let b = random_tensor(&[1, 3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| covariance_tape(t, ids[0], ids[1]);
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "corrcoef",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 20);
            let a = random_tensor(&[1, 3, 3, 3], &mut rng);
            let b = random_tensor(&[1, 3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| corrcoef_tape(t, ids[0], ids[1]);
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "rec-loss",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 21);
            let a = random_tensor(&[1, 3, 3, 3], &mut rng);
            let b = random_tensor(&[1, 3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| rec_loss_tape(t, ids[0], ids[1]);
            Ok(fd_check(f, &[a, b], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "joint-deformation",
        Box::new(|seed| {
            let mut rng = SplitMix64::stream(seed, 22);
            let teacher = random_tensor(&[3, 3, 3, 3], &mut rng);
            let student = random_tensor(&[3, 3, 3, 3], &mut rng);
            let w = random_tensor(&[3, 3, 3, 3], &mut rng);
            let f: ScalarFn = &|t, ids| {
                let joint = joint_deformation_tape(t, ids[0], ids[1], 0.3)?;
                Ok(t.mean_all(t.mul(joint, ids[2])?))
            };
            Ok(fd_check(f, &[teacher, student, w], H, 10, &mut rng)?.max_rel_err())
        }),
    );
    push(
        "gradient-penalty",
        Box::new(|seed| {
            // d/dθ and d/dinput of (‖∇D(x)‖ − 1)² through a one-layer toy
            // critic: the backward pass itself is differentiated here.
            // Directional probes pool the whole-tensor signal above the f32
            // forward round-off that swamps single second-order coordinates.
            let mut rng = SplitMix64::stream(seed, 23);
            let x = random_tensor(&[2, 4, 4, 4], &mut rng);
            let k = random_tensor(&[1, 2, 3, 3, 3], &mut rng);
            let b = random_tensor(&[1], &mut rng);
            let f: ScalarFn = &|t, ids| {
                gradient_penalty_tape(t, ids[0], |t, inp| {
                    let y = t.conv3d(inp, ids[1], ids[2], 1)?;
                    Ok(t.mean_all(t.sigmoid(y)))
                })
            };
            Ok(fd_check_directional(f, &[x, k, b], H, 4, &mut rng)?.max_rel_err())
        }),
    );
    checks
}

/// Checks whose scalar passes through the six-layer critic, differentiated
/// against the final conv layer's weights along random directions.
fn critic_coupled_checks() -> Vec<Check> {
    fn through_disc5(
        seed: u64,
        label: u64,
        build: impl Fn(
            &crate::tape::Tape,
            crate::tape::NodeId, // phi_s
            crate::tape::NodeId, // phi_t
            &[crate::tape::NodeId],
            &DiscConfig,
        ) -> Result<crate::tape::NodeId>,
    ) -> Result<f64> {
        let mut rng = SplitMix64::stream(seed, label);
        let cfg = DiscConfig::default();
        let params = amplified_critic(&cfg, rng.next_u64())?;
        let idx = params
            .entries()
            .iter()
            .position(|(n, _)| n == "disc5.weight")
            .expect("critic names its layers disc0..disc5");
        // Unit-range fields leave the critic's response so flat that its
        // f32 forward pass linearizes below the finite-difference signal;
        // doubling the field amplitude lifts the response clear of that
        // floor (measured: worst seed drops from ~1% to ~0.7%).
        let phi_s = random_tensor(&[3, 8, 8, 8], &mut rng).map(|v| 2.0 * v);
        let phi_t = random_tensor(&[3, 8, 8, 8], &mut rng).map(|v| 2.0 * v);
        let disc5 = params.entries()[idx].1.clone();
        let f: ScalarFn = &|tape, ids| {
            let s = tape.leaf(phi_s.clone());
            let t = tape.leaf(phi_t.clone());
            let leaves: Vec<_> = params
                .entries()
                .iter()
                .enumerate()
                .map(|(i, (_, tensor))| {
                    if i == idx { ids[0] } else { tape.leaf(tensor.clone()) }
                })
                .collect();
            build(tape, s, t, &leaves, &cfg)
        };
        Ok(fd_check_directional(f, &[disc5], H, 2, &mut rng)?.max_rel_err())
    }

    vec![
        Check {
            name: "dis-loss",
            run: Box::new(|seed| {
                through_disc5(seed, 24, |t, s, tt, leaves, cfg| {
                    dis_loss_tape(t, s, tt, leaves, cfg, 0.1, 1.0)
                })
            }),
        },
        Check {
            name: "adv-loss",
            run: Box::new(|seed| {
                through_disc5(seed, 25, |t, s, tt, leaves, cfg| {
                    // The penalty keeps the discrimination term's weight
                    // derivative measurable: two random fields draw nearly
                    // identical critic responses, so the gap alone sits at
                    // the f32 noise floor.
                    let rec = t.leaf(Tensor::filled(&[1], 0.37));
                    let dis = dis_loss_tape(t, s, tt, leaves, cfg, 0.1, 1.0)?;
                    adv_loss_tape(t, rec, Some(dis), 0.5)
                })
            }),
        },
        Check {
            name: "critic-loss",
            run: Box::new(|seed| {
                through_disc5(seed, 26, |t, s, tt, leaves, cfg| {
                    critic_loss_tape(t, s, tt, leaves, cfg, 0.1, 1.0)
                })
            }),
        },
    ]
}

/// Runs every check across `seeds` seeds at relative tolerance 1e-2.
pub fn run_gradient_suite(seeds: usize) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut checks = coordinate_checks();
    checks.extend(critic_coupled_checks());
    let mut outcomes = Vec::with_capacity(checks.len());
    for check in &checks {
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            worst = worst.max((check.run)(seed)?);
        }
        outcomes.push(CheckOutcome {
            name: check.name.to_string(),
            max_rel_err: worst,
            tolerance: TOL,
            passed: worst < TOL,
        });
    }
    Ok(GradCheckReport {
        schema: 1,
        seeds,
        passed: outcomes.iter().all(|c| c.passed),
        checks: outcomes,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let report = run_gradient_suite(1).unwrap();
        for check in &report.checks {
            assert!(
                check.passed,
                "{}: {} ≥ {}",
                check.name, check.max_rel_err, check.tolerance
            );
        }
        assert!(report.passed);
        assert_eq!(report.checks.len(), 26);
    }
}
