//! Registration quality measurement: overlap scores between warped and
//! fixed masks, fold counting, wall-clock timing, and the aggregated report
//! the evaluation pipeline emits.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LoadedPair;
use crate::deform::{folding_count, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::net::{cascade_forward, ParamSet, StudentConfig};
use crate::train::TrainConfig;

fn overlap_counts(a: &MaskVolume, b: &MaskVolume) -> Result<(f64, f64, f64)> {
    if a.extents() != b.extents() {
        return Err(Error::shape(format!(
            "mask extents disagree: {:?} vs {:?}",
            a.extents(),
            b.extents()
        )));
    }
    let mut na = 0u64;
    let mut nb = 0u64;
    let mut inter = 0u64;
    for (&x, &y) in a.grid().data().iter().zip(b.grid().data()) {
        let xa = x == 1.0;
        let yb = y == 1.0;
        na += xa as u64;
        nb += yb as u64;
        inter += (xa && yb) as u64;
    }
    if na + nb == 0 {
        return Err(Error::EmptyMasks);
    }
    Ok((na as f64, nb as f64, inter as f64))
}

/// Dice overlap 2|A∩B| / (|A| + |B|).
pub fn dice(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let (na, nb, inter) = overlap_counts(a, b)?;
    Ok(2.0 * inter / (na + nb))
}

/// Jaccard overlap |A∩B| / |A∪B|.
pub fn jacc(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let (na, nb, inter) = overlap_counts(a, b)?;
    Ok(inter / (na + nb - inter))
}

/// Scores of one evaluated pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub dice: f64,
    pub jacc: f64,
    pub folding_count: u64,
    pub latency_seconds: f64,
}

/// Mean and population standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }
}

/// Held-out evaluation results: per-pair scores plus aggregate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub schema: u32,
    pub pairs: Vec<PairReport>,
    pub dice: Aggregate,
    pub jacc: Aggregate,
    pub folding: Aggregate,
    pub latency_seconds: Aggregate,
    /// Registration-network parameters (all cascades; the critic takes no
    /// part in inference).
    pub param_count: u64,
    pub config: TrainConfig,
}

/// Registers every pair with the checkpointed student and scores the result:
/// the moving mask is carried through the predicted total deformation with
/// nearest-neighbor sampling and compared against the fixed mask, the total
/// field is fold-counted, and the registration itself is timed.
pub fn evaluate(
    ckpt: &Checkpoint,
    pairs: &[LoadedPair],
    limit: Option<usize>,
) -> Result<RegistrationReport> {
    ckpt.config.validate()?;
    let scfg = ckpt.config.student_config();
    if ckpt.student.len() != ckpt.config.cascades {
        return Err(Error::InvalidConfig(format!(
            "checkpoint holds {} student stages for {} cascades",
            ckpt.student.len(),
            ckpt.config.cascades
        )));
    }
    let n = limit.unwrap_or(pairs.len()).min(pairs.len());
    if n == 0 {
        return Err(Error::InvalidConfig("evaluation requires at least one pair".into()));
    }
    let mut reports = Vec::with_capacity(n);
    for (i, pair) in pairs[..n].iter().enumerate() {
        if pair.moving.extents() != [ckpt.config.extent; 3] {
            return Err(Error::Record {
                index: i,
                reason: format!(
                    "extents {:?} do not match the checkpoint's {}³",
                    pair.moving.extents(),
                    ckpt.config.extent
                ),
            });
        }
        let start = Instant::now();
        let (_, total, _) =
            cascade_forward(&pair.moving, &pair.fixed, &ckpt.student, &scfg)?;
        let latency_seconds = start.elapsed().as_secs_f64();
        let warped_mask = pair.moving_mask.warp(&total)?;
        reports.push(PairReport {
            dice: dice(&warped_mask, &pair.fixed_mask)?,
            jacc: jacc(&warped_mask, &pair.fixed_mask)?,
            folding_count: folding_count(&total)? as u64,
            latency_seconds,
        });
    }
    Ok(RegistrationReport {
        schema: 1,
        dice: Aggregate::of(reports.iter().map(|r| r.dice)),
        jacc: Aggregate::of(reports.iter().map(|r| r.jacc)),
        folding: Aggregate::of(reports.iter().map(|r| r.folding_count as f64)),
        latency_seconds: Aggregate::of(reports.iter().map(|r| r.latency_seconds)),
        param_count: ckpt.student.iter().map(|p| p.param_count() as u64).sum(),
        config: ckpt.config.clone(),
        pairs: reports,
    })
}

/// Median wall-clock seconds of `reps` single-threaded registrations of one
/// pair, after one untimed warm-up.
pub fn latency_benchmark(
    moving: &Volume,
    fixed: &Volume,
    stages: &[ParamSet],
    cfg: &StudentConfig,
    reps: usize,
) -> Result<f64> {
    if reps == 0 {
        return Err(Error::InvalidConfig("latency benchmark needs at least one rep".into()));
    }
    cascade_forward(moving, fixed, stages, cfg)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        cascade_forward(moving, fixed, stages, cfg)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { (times[mid - 1] + times[mid]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, FieldSpec, PhantomSpec};
    use crate::net::{init_discriminator, init_student, DiscConfig};
    use crate::optim::{AdamHyper, OptimizerState};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> MaskVolume {
        let data: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
        MaskVolume::new(Tensor::new(vec![1, 1, 1, bits.len()], data).unwrap()).unwrap()
    }

    #[test]
    fn overlaps_match_hand_computed_cases() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(jacc(&a, &b).unwrap(), 2.0 / 6.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jacc(&a, &a).unwrap(), 1.0);
        let disjoint = mask(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        assert_eq!(jacc(&a, &disjoint).unwrap(), 0.0);
    }

    #[test]
    fn empty_against_empty_is_undefined() {
        let empty = mask(&[0; 8]);
        assert!(matches!(dice(&empty, &empty), Err(Error::EmptyMasks)));
        assert!(matches!(jacc(&empty, &empty), Err(Error::EmptyMasks)));
        // One empty mask is fine: no overlap, defined denominators.
        let a = mask(&[1, 0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert_eq!(jacc(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_extents_are_rejected() {
        let a = mask(&[1, 0]);
        let b = mask(&[1, 0, 0]);
        assert!(matches!(dice(&a, &b), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dice_and_jacc_satisfy_their_identity(bits_a in prop::collection::vec(0u8..2, 27), bits_b in prop::collection::vec(0u8..2, 27)) {
            prop_assume!(bits_a.iter().chain(&bits_b).any(|&b| b == 1));
            let a = mask(&bits_a);
            let b = mask(&bits_b);
            let d = dice(&a, &b).unwrap();
            let j = jacc(&a, &b).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!(j <= d + 1e-15);
            if j > 0.0 && j < 1.0 {
                prop_assert!(j < d);
            }
        }
    }

    fn small_pairs(n: usize) -> Vec<LoadedPair> {
        let phantom = PhantomSpec { extent: 16, organ_axes: (3.0, 6.0), ..PhantomSpec::default() };
        let field = FieldSpec { amplitude: 2.0, ..FieldSpec::default() };
        (0..n).map(|i| make_pair(&phantom, &field, 70 + i as u64).unwrap()).collect()
    }

    #[test]
    fn ground_truth_field_scores_a_perfect_registration() {
        for pair in small_pairs(2) {
            let warped = pair.moving_mask.warp(&pair.teacher).unwrap();
            assert_eq!(dice(&warped, &pair.fixed_mask).unwrap(), 1.0);
            assert_eq!(folding_count(&pair.teacher).unwrap(), 0);
        }
    }

    fn zero_flow_checkpoint(extent: usize, cascades: usize) -> Checkpoint {
        let config = TrainConfig { extent, cascades, ..TrainConfig::default() };
        let scfg = config.student_config();
        let student: Vec<ParamSet> = (0..cascades)
            .map(|k| {
                let mut p = init_student(&scfg, k as u64).unwrap();
                for i in 0..p.len() {
                    let (name, t) = &p.entries()[i];
                    let (flow, shape) = (name.starts_with("flow."), t.shape().to_vec());
                    if flow {
                        p.set_value(i, Tensor::zeros(&shape)).unwrap();
                    }
                }
                p
            })
            .collect();
        let critic = init_discriminator(&DiscConfig::default(), 9).unwrap();
        let student_opt = student
            .iter()
            .map(|p| OptimizerState::new(p, AdamHyper::default()).unwrap())
            .collect();
        let critic_opt = OptimizerState::new(&critic, AdamHyper::default()).unwrap();
        Checkpoint {
            config,
            student,
            critic,
            student_opt,
            critic_opt,
            iteration: 0,
            rng_state: 0,
            epoch_order: Vec::new(),
            epoch_pos: 0,
        }
    }

    #[test]
    fn zero_field_model_reproduces_the_unregistered_baseline() {
        let pairs = small_pairs(2);
        let ckpt = zero_flow_checkpoint(16, 1);
        let report = evaluate(&ckpt, &pairs, None).unwrap();
        assert_eq!(report.pairs.len(), 2);
        for (scored, pair) in report.pairs.iter().zip(&pairs) {
            let baseline = dice(&pair.moving_mask, &pair.fixed_mask).unwrap();
            assert_eq!(scored.dice, baseline);
            assert_eq!(scored.folding_count, 0);
            assert!(scored.latency_seconds > 0.0);
        }
    }

    #[test]
    fn aggregates_are_plain_column_statistics() {
        let pairs = small_pairs(3);
        let ckpt = zero_flow_checkpoint(16, 1);
        let report = evaluate(&ckpt, &pairs, None).unwrap();
        let mean = report.pairs.iter().map(|p| p.dice).sum::<f64>() / 3.0;
        assert!((report.dice.mean - mean).abs() < 1e-15);
        for p in &report.pairs {
            assert!((p.dice - 2.0 * p.jacc / (1.0 + p.jacc)).abs() < 1e-12);
        }
        assert_eq!(
            report.param_count,
            ckpt.student[0].param_count() as u64
        );
        // The limit argument truncates; everything but timing is
        // deterministic across evaluations.
        let truncated = evaluate(&ckpt, &pairs, Some(2)).unwrap();
        assert_eq!(truncated.pairs.len(), 2);
        for (t, r) in truncated.pairs.iter().zip(&report.pairs) {
            assert_eq!((t.dice, t.jacc, t.folding_count), (r.dice, r.jacc, r.folding_count));
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let pairs = small_pairs(1);
        let ckpt = zero_flow_checkpoint(16, 1);
        let report = evaluate(&ckpt, &pairs, None).unwrap();
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: RegistrationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.schema, 1);
    }

    #[test]
    fn latency_benchmark_times_the_registration() {
        let pairs = small_pairs(1);
        let ckpt = zero_flow_checkpoint(16, 1);
        let scfg = ckpt.config.student_config();
        let t = latency_benchmark(&pairs[0].moving, &pairs[0].fixed, &ckpt.student, &scfg, 3)
            .unwrap();
        assert!(t > 0.0);
        assert!(latency_benchmark(&pairs[0].moving, &pairs[0].fixed, &ckpt.student, &scfg, 0)
            .is_err());
    }
}
