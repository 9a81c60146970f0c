//! Loss stack for adversarially trained registration: correlation-based
//! reconstruction, teacher-blended joint deformations, the gradient-penalty
//! discrimination objective for the student, and the critic's mirrored
//! objective.
//!
//! Every loss has a tape-level constructor that emits graph nodes (so callers
//! decide what to differentiate and how to batch) and, where useful, an eager
//! wrapper that evaluates a single sample to a plain scalar for reporting.
//! Batch losses are arithmetic means over per-sample scalars, reduced in
//! index order by [`batch_mean`].

use serde::{Deserialize, Serialize};

use crate::deform::{DisplacementField, Volume};
use crate::error::{Error, Result};
use crate::net::{discriminator_forward_tape, DiscConfig, ParamSet};
use crate::tape::{NodeId, Tape};

/// Blend and trade-off weights shared by the student and critic objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Trade-off between reconstruction and discrimination in the student
    /// objective; 1 trains on reconstruction alone.
    pub gamma: f32,
    /// Share of the teacher deformation in the joint field the gradient
    /// penalty is evaluated at.
    pub beta: f32,
    /// Strength of the gradient penalty on the critic.
    pub lambda: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 0.5, beta: 0.1, lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_same_shape(tape: &Tape, a: NodeId, b: NodeId, op: &str) -> Result<usize> {
    let sa = tape.shape_of(a);
    let sb = tape.shape_of(b);
    if sa != sb {
        return Err(Error::shape(format!("{op}: extents {sa:?} vs {sb:?}")));
    }
    Ok(sa.iter().product())
}

/// Population covariance of two equally-shaped images:
/// (1/n)·Σ a·b − (1/n²)·(Σ a)(Σ b).
pub fn covariance_tape(tape: &Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let n = check_same_shape(tape, a, b, "covariance")?;
    if n < 2 {
        return Err(Error::shape(format!("covariance needs ≥ 2 voxels, got {n}")));
    }
    let inv_n = 1.0 / n as f32;
    let cross = tape.scale(tape.sum_all(tape.mul(a, b)?), inv_n);
    let means = tape.scale(tape.mul(tape.sum_all(a), tape.sum_all(b))?, inv_n * inv_n);
    tape.sub(cross, means)
}

fn is_constant(t: &crate::tensor::Tensor) -> bool {
    let data = t.data();
    data.iter().all(|&v| v == data[0])
}

/// Pearson correlation of two images; rejects (effectively) constant inputs,
/// whose self-covariance would put a zero under the square root.
pub fn corrcoef_tape(tape: &Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape(tape, a, b, "corrcoef")?;
    if is_constant(&tape.value(a)) || is_constant(&tape.value(b)) {
        return Err(Error::DegenerateImage);
    }
    let cab = covariance_tape(tape, a, b)?;
    let caa = covariance_tape(tape, a, a)?;
    let cbb = covariance_tape(tape, b, b)?;
    if tape.value(caa).item() <= 0.0 || tape.value(cbb).item() <= 0.0 {
        return Err(Error::DegenerateImage);
    }
    tape.div(cab, tape.sqrt(tape.mul(caa, cbb)?))
}

/// Reconstruction loss 1 − corrcoef(warped, fixed); 0 iff perfectly
/// correlated, 2 at perfect anti-correlation.
pub fn rec_loss_tape(tape: &Tape, warped: NodeId, fixed: NodeId) -> Result<NodeId> {
    Ok(tape.add_scalar(tape.scale(corrcoef_tape(tape, warped, fixed)?, -1.0), 1.0))
}

/// Eager covariance of two volumes.
pub fn covariance(a: &Volume, b: &Volume) -> Result<f32> {
    let tape = Tape::new();
    let na = tape.leaf(a.grid().clone());
    let nb = tape.leaf(b.grid().clone());
    Ok(tape.value(covariance_tape(&tape, na, nb)?).item())
}

/// Eager correlation coefficient of two volumes.
pub fn corrcoef(a: &Volume, b: &Volume) -> Result<f32> {
    let tape = Tape::new();
    let na = tape.leaf(a.grid().clone());
    let nb = tape.leaf(b.grid().clone());
    Ok(tape.value(corrcoef_tape(&tape, na, nb)?).item())
}

/// Eager reconstruction loss between a warped volume and its target.
pub fn rec_loss(warped: &Volume, fixed: &Volume) -> Result<f32> {
    let tape = Tape::new();
    let nw = tape.leaf(warped.grid().clone());
    let nf = tape.leaf(fixed.grid().clone());
    Ok(tape.value(rec_loss_tape(&tape, nw, nf)?).item())
}

/// Convex blend β·teacher + (1−β)·student. The endpoints return the input
/// node itself so that β = 0 is the student field bit for bit (and β = 1 the
/// teacher's), not a sum with a zero term.
pub fn joint_deformation_tape(
    tape: &Tape,
    phi_t: NodeId,
    phi_s: NodeId,
    beta: f32,
) -> Result<NodeId> {
    check_same_shape(tape, phi_t, phi_s, "joint_deformation")?;
    if !(0.0..=1.0).contains(&beta) || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 0.0 {
        return Ok(phi_s);
    }
    if beta == 1.0 {
        return Ok(phi_t);
    }
    tape.add(tape.scale(phi_t, beta), tape.scale(phi_s, 1.0 - beta))
}

/// Eager joint deformation of two displacement fields.
pub fn joint_deformation(
    phi_t: &DisplacementField,
    phi_s: &DisplacementField,
    beta: f32,
) -> Result<DisplacementField> {
    let tape = Tape::new();
    let nt = tape.leaf(phi_t.u().clone());
    let ns = tape.leaf(phi_s.u().clone());
    DisplacementField::new(tape.value(joint_deformation_tape(&tape, nt, ns, beta)?))
}

/// Gradient penalty (‖∇ᵢₙ critic(input)‖₂ − 1)² for any scalar-valued critic
/// built from second-order-capable ops. The norm runs over the whole
/// per-sample input gradient; the result stays differentiable in whatever
/// parameters the critic closure captured.
pub fn gradient_penalty_tape(
    tape: &Tape,
    input: NodeId,
    critic: impl FnOnce(&Tape, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let response = critic(tape, input)?;
    let grad = tape.input_gradient(response, input)?;
    let shifted = tape.add_scalar(tape.l2_norm(grad)?, -1.0);
    tape.mul(shifted, shifted)
}

/// Gradient penalty of the registration critic at the given field node.
pub fn critic_penalty_tape(
    tape: &Tape,
    field: NodeId,
    critic_leaves: &[NodeId],
    cfg: &DiscConfig,
) -> Result<NodeId> {
    gradient_penalty_tape(tape, field, |t, x| {
        discriminator_forward_tape(t, x, critic_leaves, cfg)
    })
}

/// Discrimination loss for one sample: squared critic-response gap between
/// the student and teacher fields, plus λ times the gradient penalty at the
/// joint deformation. λ = 0 emits the gap term alone.
pub fn dis_loss_tape(
    tape: &Tape,
    phi_s: NodeId,
    phi_t: NodeId,
    critic_leaves: &[NodeId],
    cfg: &DiscConfig,
    beta: f32,
    lambda: f32,
) -> Result<NodeId> {
    check_same_shape(tape, phi_s, phi_t, "dis_loss")?;
    let ms = discriminator_forward_tape(tape, phi_s, critic_leaves, cfg)?;
    let mt = discriminator_forward_tape(tape, phi_t, critic_leaves, cfg)?;
    let diff = tape.sub(ms, mt)?;
    let gap = tape.mul(diff, diff)?;
    if lambda == 0.0 {
        return Ok(gap);
    }
    let joint = joint_deformation_tape(tape, phi_t, phi_s, beta)?;
    let penalty = critic_penalty_tape(tape, joint, critic_leaves, cfg)?;
    tape.add(gap, tape.scale(penalty, lambda))
}

/// Student objective γ·l_rec + (1−γ)·l_dis for one sample. The endpoints
/// return the corresponding term's node unchanged, so γ = 1 yields a graph
/// whose gradients are those of the reconstruction loss alone (the
/// discrimination term may then be omitted entirely).
pub fn adv_loss_tape(
    tape: &Tape,
    l_rec: NodeId,
    l_dis: Option<NodeId>,
    gamma: f32,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(l_rec);
    }
    let l_dis = l_dis.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "adv_loss with gamma = {gamma} requires a discrimination term"
        ))
    })?;
    if gamma == 0.0 {
        return Ok(l_dis);
    }
    tape.add(tape.scale(l_rec, gamma), tape.scale(l_dis, 1.0 - gamma))
}

/// Eager student objective over already-evaluated per-sample terms.
pub fn adv_loss(l_rec: f32, l_dis: f32, gamma: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(gamma * l_rec + (1.0 - gamma) * l_dis)
}

/// Critic objective for one sample: the negated response gap plus λ times
/// the gradient penalty, minimized over the critic parameters only. The
/// student field is detached internally, so no gradient ever flows back
/// through it regardless of how the caller built that node.
pub fn critic_loss_tape(
    tape: &Tape,
    phi_s: NodeId,
    phi_t: NodeId,
    critic_leaves: &[NodeId],
    cfg: &DiscConfig,
    beta: f32,
    lambda: f32,
) -> Result<NodeId> {
    check_same_shape(tape, phi_s, phi_t, "critic_loss")?;
    let phi_s = tape.detach(phi_s);
    let ms = discriminator_forward_tape(tape, phi_s, critic_leaves, cfg)?;
    let mt = discriminator_forward_tape(tape, phi_t, critic_leaves, cfg)?;
    let diff = tape.sub(ms, mt)?;
    let gap = tape.scale(tape.mul(diff, diff)?, -1.0);
    if lambda == 0.0 {
        return Ok(gap);
    }
    let joint = joint_deformation_tape(tape, phi_t, phi_s, beta)?;
    let penalty = critic_penalty_tape(tape, joint, critic_leaves, cfg)?;
    tape.add(gap, tape.scale(penalty, lambda))
}

/// Eager discrimination loss of one student/teacher field pair.
pub fn dis_loss(
    phi_s: &DisplacementField,
    phi_t: &DisplacementField,
    critic: &ParamSet,
    cfg: &DiscConfig,
    beta: f32,
    lambda: f32,
) -> Result<f32> {
    let tape = Tape::new();
    let ns = tape.leaf(phi_s.u().clone());
    let nt = tape.leaf(phi_t.u().clone());
    let leaves = critic.leaves(&tape);
    Ok(tape.value(dis_loss_tape(&tape, ns, nt, &leaves, cfg, beta, lambda)?).item())
}

/// Eager critic loss of one student/teacher field pair.
pub fn critic_loss(
    phi_s: &DisplacementField,
    phi_t: &DisplacementField,
    critic: &ParamSet,
    cfg: &DiscConfig,
    beta: f32,
    lambda: f32,
) -> Result<f32> {
    let tape = Tape::new();
    let ns = tape.leaf(phi_s.u().clone());
    let nt = tape.leaf(phi_t.u().clone());
    let leaves = critic.leaves(&tape);
    Ok(tape.value(critic_loss_tape(&tape, ns, nt, &leaves, cfg, beta, lambda)?).item())
}

/// Arithmetic mean of per-sample scalar nodes, accumulated in index order.
pub fn batch_mean(tape: &Tape, terms: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::shape("batch_mean over an empty batch"))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{fd_check_directional, random_tensor, ScalarFn};
    use crate::net::init_discriminator;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn leaf_pair(tape: &Tape, a: &[f32], b: &[f32]) -> (NodeId, NodeId) {
        let shape = vec![1, 1, 1, a.len()];
        (
            tape.leaf(Tensor::new(shape.clone(), a.to_vec()).unwrap()),
            tape.leaf(Tensor::new(shape, b.to_vec()).unwrap()),
        )
    }

    fn random_volume(seed: u64, n: usize) -> Volume {
        let mut rng = SplitMix64::stream(seed, 13);
        let data: Vec<f32> =
            (0..n * n * n).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        Volume::new(Tensor::new(vec![1, n, n, n], data).unwrap()).unwrap()
    }

    #[test]
    fn covariance_of_constant_images_vanishes() {
        let tape = Tape::new();
        let (a, b) = leaf_pair(&tape, &[0.7; 64], &[0.3; 64]);
        let c = covariance_tape(&tape, a, b).unwrap();
        assert!(tape.value(c).item().abs() < 1e-6);
    }

    #[test]
    fn covariance_matches_hand_arithmetic() {
        // Two two-voxel images (0,1) and (0,1): mean cross-product 1/2 minus
        // product of means 1/4.
        let tape = Tape::new();
        let (a, b) = leaf_pair(&tape, &[0.0, 1.0], &[0.0, 1.0]);
        let c = covariance_tape(&tape, a, b).unwrap();
        assert_eq!(tape.value(c).item(), 0.25);
    }

    #[test]
    fn covariance_is_symmetric() {
        let a = random_volume(1, 16);
        let b = random_volume(2, 16);
        assert_eq!(covariance(&a, &b).unwrap(), covariance(&b, &a).unwrap());
    }

    #[test]
    fn covariance_rejects_mismatched_extents() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 1, 1, 4]));
        let b = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(covariance_tape(&tape, a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn corrcoef_of_image_with_itself_is_one() {
        let a = random_volume(3, 16);
        assert!((corrcoef(&a, &a).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn corrcoef_is_affine_invariant() {
        let a = random_volume(4, 16);
        for (gain, expect) in [(2.0f32, 1.0f32), (-0.5, -1.0)] {
            let data: Vec<f32> =
                a.grid().data().iter().map(|&v| gain * v + 0.25).collect();
            let t = Volume::new(Tensor::new(a.grid().shape().to_vec(), data).unwrap())
                .unwrap();
            assert!((corrcoef(&a, &t).unwrap() - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn corrcoef_matches_hand_arithmetic() {
        // (0,1,2,3) vs (0,1,2,5): covariance 2, variances 1.25 and 3.5,
        // so the correlation is 2/√4.375.
        let tape = Tape::new();
        let (a, b) = leaf_pair(&tape, &[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 5.0]);
        let c = corrcoef_tape(&tape, a, b).unwrap();
        let expect = 2.0 / 4.375f64.sqrt();
        assert!((tape.value(c).item() as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn corrcoef_rejects_constant_images() {
        let flat = Volume::new(Tensor::new(vec![1, 16, 16, 16], vec![0.4; 4096]).unwrap())
            .unwrap();
        let a = random_volume(5, 16);
        assert!(matches!(corrcoef(&flat, &a), Err(Error::DegenerateImage)));
        assert!(matches!(corrcoef(&a, &flat), Err(Error::DegenerateImage)));
    }

    #[test]
    fn rec_loss_spans_identical_to_negated() {
        let a = random_volume(6, 16);
        assert!(rec_loss(&a, &a).unwrap().abs() < 1e-5);
        let negated: Vec<f32> = a.grid().data().iter().map(|&v| -v).collect();
        let n = Volume::new(Tensor::new(a.grid().shape().to_vec(), negated).unwrap())
            .unwrap();
        assert!((rec_loss(&n, &a).unwrap() - 2.0).abs() < 1e-4);
        let tape = Tape::new();
        let (x, y) = leaf_pair(&tape, &[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 5.0]);
        let r = rec_loss_tape(&tape, x, y).unwrap();
        let expect = 1.0 - 2.0 / 4.375f64.sqrt();
        assert!((tape.value(r).item() as f64 - expect).abs() < 1e-6);
    }

    fn field_from(seed: u64, n: usize, scale: f32) -> DisplacementField {
        let mut rng = SplitMix64::stream(seed, 31);
        let data: Vec<f32> =
            (0..3 * n * n * n).map(|_| rng.uniform(-1.0, 1.0) as f32 * scale).collect();
        DisplacementField::new(Tensor::new(vec![3, n, n, n], data).unwrap()).unwrap()
    }

    #[test]
    fn joint_deformation_endpoints_are_bit_exact() {
        let t = field_from(7, 8, 1.0);
        let s = field_from(8, 8, 1.0);
        let at0 = joint_deformation(&t, &s, 0.0).unwrap();
        assert_eq!(at0.u().data(), s.u().data());
        let at1 = joint_deformation(&t, &s, 1.0).unwrap();
        assert_eq!(at1.u().data(), t.u().data());
    }

    #[test]
    fn joint_deformation_blends_linearly() {
        let ones = DisplacementField::new(Tensor::new(
            vec![3, 4, 4, 4],
            vec![1.0; 192],
        )
        .unwrap())
        .unwrap();
        let zeros = DisplacementField::zeros([4, 4, 4]);
        let mixed = joint_deformation(&ones, &zeros, 0.1).unwrap();
        assert!(mixed.u().data().iter().all(|&v| v == 0.1));
        // Linear in β: the blend at the midpoint equals the average of the
        // blends at the ends, for every voxel.
        let t = field_from(9, 8, 2.0);
        let s = field_from(10, 8, 2.0);
        let lo = joint_deformation(&t, &s, 0.2).unwrap();
        let hi = joint_deformation(&t, &s, 0.6).unwrap();
        let mid = joint_deformation(&t, &s, 0.4).unwrap();
        for ((l, h), m) in lo.u().data().iter().zip(hi.u().data()).zip(mid.u().data()) {
            assert!((0.5 * (l + h) - m).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_deformation_rejects_bad_beta() {
        let t = field_from(11, 8, 1.0);
        let s = field_from(12, 8, 1.0);
        assert!(matches!(
            joint_deformation(&t, &s, 1.5),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn penalty_of_mean_critic_matches_closed_form() {
        // A critic that takes the plain mean of its N inputs has gradient
        // 1/N everywhere, norm 1/√N, so the penalty is (1/√N − 1)².
        let tape = Tape::new();
        let field = tape.leaf(random_tensor(&[3, 4, 4, 4], &mut SplitMix64::new(3)));
        let pen =
            gradient_penalty_tape(&tape, field, |t, x| Ok(t.mean_all(x))).unwrap();
        let n = 192.0f64;
        let expect = (1.0 / n.sqrt() - 1.0).powi(2);
        assert!((tape.value(pen).item() as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn penalty_vanishes_at_unit_gradient_norm() {
        // Critic = sum of the input against a one-hot mask: the input
        // gradient is that mask, whose norm is exactly 1.
        let tape = Tape::new();
        let field = tape.leaf(random_tensor(&[3, 4, 4, 4], &mut SplitMix64::new(4)));
        let mut mask = vec![0.0f32; 192];
        mask[17] = 1.0;
        let hot = tape.leaf(Tensor::new(vec![3, 4, 4, 4], mask).unwrap());
        let pen = gradient_penalty_tape(&tape, field, |t, x| {
            Ok(t.sum_all(t.mul(x, hot)?))
        })
        .unwrap();
        assert_eq!(tape.value(pen).item(), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences_on_toy_critic() {
        // Toy critic: one strided conv, sigmoid, mean. Differentiating the
        // penalty w.r.t. the kernel exercises the second-order path.
        for seed in 0..3 {
            let mut rng = SplitMix64::stream(seed, 41);
            let field = random_tensor(&[3, 8, 8, 8], &mut rng);
            let kernel = random_tensor(&[2, 3, 4, 4, 4], &mut rng);
            let field2 = field.clone();
            let f: ScalarFn = &move |tape, ids| {
                let x = tape.leaf(field2.clone());
                gradient_penalty_tape(tape, x, |t, inp| {
                    let bias = t.leaf(Tensor::zeros(&[2]));
                    let c = t.conv3d(inp, ids[0], bias, 2)?;
                    Ok(t.mean_all(t.sigmoid(c)))
                })
            };
            let report =
                fd_check_directional(f, &[kernel], 1e-3, 4, &mut rng).unwrap();
            assert!(report.max_rel_err() < 1e-2, "seed {seed}: {report:?}");
        }
    }

    fn toy_critic(seed: u64) -> (ParamSet, DiscConfig) {
        let cfg = DiscConfig::default();
        (init_discriminator(&cfg, seed).unwrap(), cfg)
    }

    #[test]
    fn dis_loss_vanishes_on_identical_fields_without_penalty() {
        let (params, cfg) = toy_critic(21);
        let f = field_from(13, 8, 0.5);
        assert_eq!(dis_loss(&f, &f, &params, &cfg, 0.1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn dis_loss_assembles_gap_and_penalty_terms() {
        let (params, cfg) = toy_critic(22);
        let s = field_from(14, 8, 0.5);
        let t = field_from(15, 8, 0.5);
        let (beta, lambda) = (0.3f32, 1.0f32);

        let gap_only = dis_loss(&s, &t, &params, &cfg, beta, 0.0).unwrap();
        let ms = crate::net::discriminator_forward(&s, &params, &cfg, None).unwrap();
        let mt = crate::net::discriminator_forward(&t, &params, &cfg, None).unwrap();
        assert_eq!(gap_only, (ms - mt) * (ms - mt));

        let tape = Tape::new();
        let joint = joint_deformation(&t, &s, beta).unwrap();
        let jn = tape.leaf(joint.u().clone());
        let leaves = params.leaves(&tape);
        let pen =
            tape.value(critic_penalty_tape(&tape, jn, &leaves, &cfg).unwrap()).item();

        let full = dis_loss(&s, &t, &params, &cfg, beta, lambda).unwrap();
        assert_eq!(full, gap_only + lambda * pen);
    }

    #[test]
    fn adv_loss_interpolates_and_validates() {
        assert_eq!(adv_loss(0.2, 0.4, 1.0).unwrap(), 0.2);
        assert_eq!(adv_loss(0.2, 0.4, 0.0).unwrap(), 0.4);
        assert!((adv_loss(0.2, 0.4, 0.5).unwrap() - 0.3).abs() < 1e-7);
        assert!(adv_loss(0.2, 0.4, 0.5).unwrap() < adv_loss(0.5, 0.4, 0.5).unwrap());
        assert!(adv_loss(0.2, 0.4, 0.5).unwrap() < adv_loss(0.2, 0.9, 0.5).unwrap());
        assert!(matches!(adv_loss(0.1, 0.1, 1.5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn adv_loss_at_gamma_one_is_the_reconstruction_node() {
        // With γ = 1 the combined objective IS the reconstruction node, so
        // no gradient reaches the critic parameters at all.
        let (params, cfg) = toy_critic(23);
        let a = random_volume(16, 16);
        let b = random_volume(17, 16);
        let s = field_from(18, 16, 0.5);
        let t = field_from(19, 16, 0.5);
        let tape = Tape::new();
        let na = tape.leaf(a.grid().clone());
        let nb = tape.leaf(b.grid().clone());
        let rec = rec_loss_tape(&tape, na, nb).unwrap();
        let ns = tape.leaf(s.u().clone());
        let nt = tape.leaf(t.u().clone());
        let leaves = params.leaves(&tape);
        let dis = dis_loss_tape(&tape, ns, nt, &leaves, &cfg, 0.1, 1.0).unwrap();
        let combined = adv_loss_tape(&tape, rec, Some(dis), 1.0).unwrap();
        assert_eq!(combined, rec);
        let grads = tape.gradients(combined, &leaves).unwrap();
        assert!(grads.iter().all(|g| g.is_none()));
        assert!(matches!(
            adv_loss_tape(&tape, rec, None, 0.5),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn critic_loss_reduces_to_its_terms() {
        let (params, cfg) = toy_critic(24);
        let s = field_from(20, 8, 0.5);
        let t = field_from(21, 8, 0.5);
        // Identical fields: the gap is zero, leaving λ times the penalty at
        // the (identical) joint field.
        let tape = Tape::new();
        let jn = tape.leaf(t.u().clone());
        let leaves = params.leaves(&tape);
        let pen =
            tape.value(critic_penalty_tape(&tape, jn, &leaves, &cfg).unwrap()).item();
        let same = critic_loss(&t, &t, &params, &cfg, 0.1, 1.0).unwrap();
        assert_eq!(same, pen);
        // λ = 0: the negated gap alone.
        let gap = dis_loss(&s, &t, &params, &cfg, 0.1, 0.0).unwrap();
        let neg = critic_loss(&s, &t, &params, &cfg, 0.1, 0.0).unwrap();
        assert_eq!(neg, -gap);
    }

    #[test]
    fn critic_loss_never_reaches_the_student_field() {
        let (params, cfg) = toy_critic(25);
        let s = field_from(22, 8, 0.5);
        let t = field_from(23, 8, 0.5);
        let tape = Tape::new();
        let ns = tape.leaf(s.u().clone());
        let nt = tape.leaf(t.u().clone());
        let leaves = params.leaves(&tape);
        let loss =
            critic_loss_tape(&tape, ns, nt, &leaves, &cfg, 0.1, 1.0).unwrap();
        let g = tape.gradients(loss, &[ns]).unwrap();
        assert!(g[0].is_none(), "student field must stay constant to the critic");
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        // The last-layer kernel couples through a single layer, so its probe
        // stays well above single-precision forward noise even through the
        // second-order penalty path.
        let cfg = DiscConfig::default();
        for seed in 0..3 {
            let mut params = init_discriminator(&cfg, 30 + seed).unwrap();
            for i in 0..params.len() {
                let (name, t) = &params.entries()[i];
                if name.ends_with(".weight") {
                    let scaled: Vec<f32> = t.data().iter().map(|&v| v * 2.0).collect();
                    params
                        .set_value(i, Tensor::new(t.shape().to_vec(), scaled).unwrap())
                        .unwrap();
                }
            }
            let mut rng = SplitMix64::stream(seed, 51);
            let s = random_tensor(&[3, 8, 8, 8], &mut rng);
            let t = random_tensor(&[3, 8, 8, 8], &mut rng);
            let w5 = params.get("disc5.weight").unwrap().clone();
            let slot = params
                .entries()
                .iter()
                .position(|(name, _)| name == "disc5.weight")
                .unwrap();
            let (cfg2, params2, s2, t2) =
                (cfg.clone(), params.clone(), s.clone(), t.clone());
            let f: ScalarFn = &move |tape, ids| {
                let ns = tape.leaf(s2.clone());
                let nt = tape.leaf(t2.clone());
                let mut leaves = params2.leaves(tape);
                leaves[slot] = ids[0];
                critic_loss_tape(tape, ns, nt, &leaves, &cfg2, 0.1, 1.0)
            };
            let report = fd_check_directional(f, &[w5], 1e-3, 4, &mut rng).unwrap();
            assert!(report.max_rel_err() < 1e-2, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn batch_mean_averages_in_index_order() {
        let tape = Tape::new();
        let nodes: Vec<NodeId> =
            [1.0f32, 2.0, 4.0].iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect();
        let m = batch_mean(&tape, &nodes).unwrap();
        assert!((tape.value(m).item() - 7.0 / 3.0).abs() < 1e-6);
        assert!(matches!(batch_mean(&tape, &[]), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn corrcoef_stays_within_unit_range(seed in 0u64..1000) {
            let a = random_volume(seed.wrapping_mul(2), 16);
            let b = random_volume(seed.wrapping_mul(2) + 1, 16);
            let c = corrcoef(&a, &b).unwrap();
            prop_assert!(c.abs() <= 1.0 + 1e-5, "corrcoef {c}");
        }
    }
}
