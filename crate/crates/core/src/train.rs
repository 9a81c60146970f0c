//! The reversed-role adversarial training loop: per outer iteration the
//! student takes several reconstruction-driven steps, then — on a fresh
//! batch — the critic takes one step of the adversarial game against the
//! detached student fields and the student takes one step against the
//! frozen critic.
//!
//! Every draw of randomness flows from the run seed through recorded state,
//! so a run is reproducible bit for bit and a checkpointed run continues
//! exactly as the unbroken one would have.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LoadedPair;
use crate::error::{Error, Result};
use crate::loss::{
    adv_loss_tape, batch_mean, critic_loss_tape, critic_penalty_tape, dis_loss_tape,
    joint_deformation_tape, rec_loss_tape, LossWeights,
};
use crate::net::{
    cascade_forward, cascade_forward_tape, init_discriminator, init_student, DiscConfig,
    ParamSet, StudentConfig,
};
use crate::optim::{adam_step, AdamHyper, OptimizerState};
use crate::rng::SplitMix64;
use crate::tape::{KernelCache, NodeId, Tape};
use crate::tensor::Tensor;

/// Whether the adversarial phase trains a critic at all. The ablation arm
/// `RecOnly` keeps the iteration structure (and therefore the batch
/// schedule) of the full method but its final phase optimizes pure
/// reconstruction, so the two arms differ only in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    RecOnly,
    Adversarial,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Samples per batch.
    pub batch: usize,
    /// Generator (reconstruction) phases per adversarial phase.
    pub n_gen: usize,
    /// Loss mixing weights γ, β, λ.
    pub weights: LossWeights,
    /// Adam learning rate for both networks.
    pub lr: f32,
    /// Outer iterations to run.
    pub iterations: usize,
    /// Run seed; initialization and batch order derive from it.
    pub seed: u64,
    /// Cascaded registration stages in the student.
    pub cascades: usize,
    /// Cubic extent of the training volumes.
    pub extent: usize,
    pub mode: TrainMode,
    /// When set, the gradient-penalty term also reaches the student through
    /// the joint deformation; by default it regularizes the critic only.
    pub penalty_to_student: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            n_gen: 3,
            weights: LossWeights::default(),
            lr: 1e-4,
            iterations: 500,
            seed: 0,
            cascades: 1,
            extent: 32,
            mode: TrainMode::Adversarial,
            penalty_to_student: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.n_gen < 1 || self.iterations < 1 || self.cascades < 1 {
            return Err(Error::InvalidConfig(format!(
                "batch, n_gen, iterations, and cascades must all be ≥ 1, got \
                 {}, {}, {}, {}",
                self.batch, self.n_gen, self.iterations, self.cascades
            )));
        }
        self.weights.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        let divisor = self.student_config().extent_divisor();
        if self.extent == 0 || self.extent % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "extent {} is not divisible by {divisor} (stride^levels)",
                self.extent
            )));
        }
        if self.mode == TrainMode::RecOnly && self.weights.gamma != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "reconstruction-only training requires gamma = 1, got {}",
                self.weights.gamma
            )));
        }
        Ok(())
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig { cascades: self.cascades, ..StudentConfig::default() }
    }
}

/// Loss values recorded for one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub iteration: u64,
    /// Mean of the generator phases' batch reconstruction losses.
    pub l_rec: f32,
    /// Squared critic-response gap of the adversarial batch, as the student
    /// sees it; absent when the student objective has no such term.
    pub l_dis: Option<f32>,
    /// Student objective of the adversarial phase.
    pub l_adv: f32,
    /// Critic objective; absent in reconstruction-only runs.
    pub critic: Option<f32>,
}

/// Trains from a fresh initialization for `cfg.iterations` outer iterations.
pub fn train(cfg: &TrainConfig, pairs: &[LoadedPair]) -> Result<(Checkpoint, Vec<IterationLosses>)> {
    train_observed(cfg, pairs, |_| {})
}

/// Like [`train`], invoking `observe` after every completed iteration.
pub fn train_observed(
    cfg: &TrainConfig,
    pairs: &[LoadedPair],
    observe: impl FnMut(&IterationLosses),
) -> Result<(Checkpoint, Vec<IterationLosses>)> {
    cfg.validate()?;
    let mut trainer = Trainer::fresh(cfg.clone(), pairs)?;
    let log = trainer.run_to(cfg.iterations as u64, observe)?;
    Ok((trainer.into_checkpoint(), log))
}

/// Continues a checkpointed run for `additional` more outer iterations; the
/// result is bit-identical to a single run of the combined length.
pub fn resume(
    ckpt: Checkpoint,
    pairs: &[LoadedPair],
    additional: u64,
) -> Result<(Checkpoint, Vec<IterationLosses>)> {
    resume_observed(ckpt, pairs, additional, |_| {})
}

/// Like [`resume`], invoking `observe` after every completed iteration.
pub fn resume_observed(
    ckpt: Checkpoint,
    pairs: &[LoadedPair],
    additional: u64,
    observe: impl FnMut(&IterationLosses),
) -> Result<(Checkpoint, Vec<IterationLosses>)> {
    let mut trainer = Trainer::from_checkpoint(ckpt, pairs)?;
    let target = trainer.iteration + additional;
    trainer.cfg.iterations = target as usize;
    let log = trainer.run_to(target, observe)?;
    Ok((trainer.into_checkpoint(), log))
}

struct Trainer<'a> {
    cfg: TrainConfig,
    scfg: StudentConfig,
    dcfg: DiscConfig,
    pairs: &'a [LoadedPair],
    student: Vec<ParamSet>,
    critic: ParamSet,
    student_opt: Vec<OptimizerState>,
    critic_opt: OptimizerState,
    iteration: u64,
    rng: SplitMix64,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    cache: Rc<KernelCache>,
}

impl<'a> Trainer<'a> {
    fn fresh(cfg: TrainConfig, pairs: &'a [LoadedPair]) -> Result<Trainer<'a>> {
        check_pairs(&cfg, pairs)?;
        let scfg = cfg.student_config();
        let dcfg = DiscConfig::default();
        let student = (0..cfg.cascades)
            .map(|k| init_student(&scfg, SplitMix64::stream(cfg.seed, 100 + k as u64).next_u64()))
            .collect::<Result<Vec<_>>>()?;
        let critic =
            init_discriminator(&dcfg, SplitMix64::stream(cfg.seed, 200).next_u64())?;
        let student_opt = student
            .iter()
            .map(|p| OptimizerState::new(p, AdamHyper::default()))
            .collect::<Result<Vec<_>>>()?;
        let critic_opt = OptimizerState::new(&critic, AdamHyper::default())?;
        let rng = SplitMix64::stream(cfg.seed, 300);
        // Position at the end of a virtual epoch so the first draw shuffles.
        let epoch_order: Vec<usize> = (0..pairs.len()).collect();
        let epoch_pos = epoch_order.len();
        Ok(Trainer {
            cfg,
            scfg,
            dcfg,
            pairs,
            student,
            critic,
            student_opt,
            critic_opt,
            iteration: 0,
            rng,
            epoch_order,
            epoch_pos,
            cache: KernelCache::new(),
        })
    }

    fn from_checkpoint(ckpt: Checkpoint, pairs: &'a [LoadedPair]) -> Result<Trainer<'a>> {
        let cfg = ckpt.config;
        cfg.validate()?;
        check_pairs(&cfg, pairs)?;
        if ckpt.student.len() != cfg.cascades || ckpt.student_opt.len() != cfg.cascades {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {} student stages and {} optimizer states \
                 for {} cascades",
                ckpt.student.len(),
                ckpt.student_opt.len(),
                cfg.cascades
            )));
        }
        if ckpt.epoch_order.len() != pairs.len()
            || ckpt.epoch_pos as usize > pairs.len()
            || ckpt.epoch_order.iter().any(|&i| i as usize >= pairs.len())
        {
            return Err(Error::InvalidConfig(format!(
                "checkpoint batch schedule covers {} records, dataset has {}",
                ckpt.epoch_order.len(),
                pairs.len()
            )));
        }
        Ok(Trainer {
            scfg: cfg.student_config(),
            dcfg: DiscConfig::default(),
            cfg,
            pairs,
            student: ckpt.student,
            critic: ckpt.critic,
            student_opt: ckpt.student_opt,
            critic_opt: ckpt.critic_opt,
            iteration: ckpt.iteration,
            rng: SplitMix64::new(ckpt.rng_state),
            epoch_order: ckpt.epoch_order.iter().map(|&i| i as usize).collect(),
            epoch_pos: ckpt.epoch_pos as usize,
            cache: KernelCache::new(),
        })
    }

    fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            student: self.student,
            critic: self.critic,
            student_opt: self.student_opt,
            critic_opt: self.critic_opt,
            iteration: self.iteration,
            rng_state: self.rng.state(),
            epoch_order: self.epoch_order.iter().map(|&i| i as u32).collect(),
            epoch_pos: self.epoch_pos as u32,
        }
    }

    fn run_to(
        &mut self,
        target: u64,
        mut observe: impl FnMut(&IterationLosses),
    ) -> Result<Vec<IterationLosses>> {
        let mut log = Vec::new();
        while self.iteration < target {
            let mut rec_sum = 0.0f64;
            for _ in 0..self.cfg.n_gen {
                let batch = self.next_batch();
                rec_sum += self.reconstruction_step(&batch)? as f64;
            }
            let batch = self.next_batch();
            let (l_adv, l_dis, critic) = match self.cfg.mode {
                TrainMode::RecOnly => (self.reconstruction_step(&batch)?, None, None),
                TrainMode::Adversarial => {
                    let critic_value = self.critic_step(&batch)?;
                    let (l_adv, l_dis) = self.adversarial_student_step(&batch)?;
                    (l_adv, l_dis, Some(critic_value))
                }
            };
            let entry = IterationLosses {
                iteration: self.iteration,
                l_rec: (rec_sum / self.cfg.n_gen as f64) as f32,
                l_dis,
                l_adv,
                critic,
            };
            observe(&entry);
            log.push(entry);
            self.iteration += 1;
        }
        Ok(log)
    }

    /// Draws the next batch of record indices: sampling without replacement
    /// within an epoch, reshuffling whenever one is exhausted.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch);
        while out.len() < self.cfg.batch {
            if self.epoch_pos >= self.epoch_order.len() {
                self.rng.shuffle(&mut self.epoch_order);
                self.epoch_pos = 0;
            }
            out.push(self.epoch_order[self.epoch_pos]);
            self.epoch_pos += 1;
        }
        out
    }

    /// One optimizer step on the student against the batch-mean
    /// reconstruction loss of the final warped image.
    fn reconstruction_step(&mut self, batch: &[usize]) -> Result<f32> {
        let tape = Tape::with_cache(self.cache.clone());
        let leaves: Vec<Vec<NodeId>> =
            self.student.iter().map(|p| p.leaves(&tape)).collect();
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let pair = &self.pairs[i];
            let m = tape.leaf(pair.moving.grid().clone());
            let f = tape.leaf(pair.fixed.grid().clone());
            let (_, _, warped) = cascade_forward_tape(&tape, m, f, &leaves, &self.scfg)?;
            terms.push(rec_loss_tape(&tape, warped, f)?);
        }
        let loss = batch_mean(&tape, &terms)?;
        let value = tape.value(loss).item();
        self.check_finite(value, "reconstruction step")?;
        self.apply_student_grads(&tape, loss, &leaves)?;
        Ok(value)
    }

    /// One optimizer step on the critic; the student fields enter as plain
    /// values, so only the critic parameters move.
    fn critic_step(&mut self, batch: &[usize]) -> Result<f32> {
        let mut fields = Vec::with_capacity(batch.len());
        for &i in batch {
            let pair = &self.pairs[i];
            let (_, total, _) =
                cascade_forward(&pair.moving, &pair.fixed, &self.student, &self.scfg)?;
            fields.push(total);
        }
        let tape = Tape::with_cache(self.cache.clone());
        let critic_leaves = self.critic.leaves(&tape);
        let w = self.cfg.weights;
        let mut terms = Vec::with_capacity(batch.len());
        for (field, &i) in fields.iter().zip(batch) {
            let s = tape.leaf(field.u().clone());
            let t = tape.leaf(self.pairs[i].teacher.u().clone());
            terms.push(critic_loss_tape(
                &tape,
                s,
                t,
                &critic_leaves,
                &self.dcfg,
                w.beta,
                w.lambda,
            )?);
        }
        let loss = batch_mean(&tape, &terms)?;
        let value = tape.value(loss).item();
        self.check_finite(value, "critic step")?;
        let grads = self.resolve_grads(&tape, loss, &critic_leaves, "critic")?;
        adam_step(&mut self.critic, &grads, &mut self.critic_opt, self.cfg.lr)?;
        Ok(value)
    }

    /// One optimizer step on the student against the combined adversarial
    /// objective, with the critic parameters frozen.
    fn adversarial_student_step(&mut self, batch: &[usize]) -> Result<(f32, Option<f32>)> {
        let w = self.cfg.weights;
        let tape = Tape::with_cache(self.cache.clone());
        let leaves: Vec<Vec<NodeId>> =
            self.student.iter().map(|p| p.leaves(&tape)).collect();
        // The γ = 1 endpoint needs no discrimination term, so the critic is
        // never even evaluated there and the step reduces to reconstruction.
        let critic_leaves =
            if w.gamma < 1.0 { Some(self.critic.leaves(&tape)) } else { None };
        let mut adv_terms = Vec::with_capacity(batch.len());
        let mut gap_terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let pair = &self.pairs[i];
            let m = tape.leaf(pair.moving.grid().clone());
            let f = tape.leaf(pair.fixed.grid().clone());
            let (_, total, warped) = cascade_forward_tape(&tape, m, f, &leaves, &self.scfg)?;
            let l_rec = rec_loss_tape(&tape, warped, f)?;
            let l_dis = match &critic_leaves {
                None => None,
                Some(cl) => {
                    let t = tape.leaf(pair.teacher.u().clone());
                    let gap =
                        dis_loss_tape(&tape, total, t, cl, &self.dcfg, w.beta, 0.0)?;
                    gap_terms.push(gap);
                    if self.cfg.penalty_to_student && w.lambda > 0.0 {
                        let joint = joint_deformation_tape(&tape, t, total, w.beta)?;
                        let penalty = critic_penalty_tape(&tape, joint, cl, &self.dcfg)?;
                        Some(tape.add(gap, tape.scale(penalty, w.lambda))?)
                    } else {
                        Some(gap)
                    }
                }
            };
            adv_terms.push(adv_loss_tape(&tape, l_rec, l_dis, w.gamma)?);
        }
        let loss = batch_mean(&tape, &adv_terms)?;
        let value = tape.value(loss).item();
        self.check_finite(value, "adversarial student step")?;
        let l_dis = if gap_terms.is_empty() {
            None
        } else {
            Some(tape.value(batch_mean(&tape, &gap_terms)?).item())
        };
        self.apply_student_grads(&tape, loss, &leaves)?;
        Ok((value, l_dis))
    }

    /// Backward over all cascades at once, then one Adam step per cascade.
    fn apply_student_grads(
        &mut self,
        tape: &Tape,
        loss: NodeId,
        leaves: &[Vec<NodeId>],
    ) -> Result<()> {
        let flat: Vec<NodeId> = leaves.iter().flatten().copied().collect();
        let grads = self.resolve_grads(tape, loss, &flat, "student")?;
        let mut offset = 0;
        for (k, per_stage) in leaves.iter().enumerate() {
            let slice = &grads[offset..offset + per_stage.len()];
            adam_step(&mut self.student[k], slice, &mut self.student_opt[k], self.cfg.lr)?;
            offset += per_stage.len();
        }
        Ok(())
    }

    fn resolve_grads(
        &self,
        tape: &Tape,
        loss: NodeId,
        wanted: &[NodeId],
        who: &str,
    ) -> Result<Vec<Tensor>> {
        let nodes = tape.gradients(loss, wanted)?;
        nodes
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(g) => Ok(tape.value(*g)),
                None => Err(Error::InvalidConfig(format!(
                    "{who} parameter {i} received no gradient — the loss graph \
                     is not connected to it"
                ))),
            })
            .collect()
    }

    fn check_finite(&self, value: f32, context: &str) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                context: context.to_string(),
            })
        }
    }
}

fn check_pairs(cfg: &TrainConfig, pairs: &[LoadedPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("training requires at least one pair".into()));
    }
    let want = [cfg.extent; 3];
    for (i, pair) in pairs.iter().enumerate() {
        if pair.moving.extents() != want {
            return Err(Error::Record {
                index: i,
                reason: format!(
                    "extents {:?} do not match the configured {want:?}",
                    pair.moving.extents()
                ),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, FieldSpec, PhantomSpec};

    fn tiny_pairs(n: usize) -> Vec<LoadedPair> {
        let phantom = PhantomSpec { extent: 16, organ_axes: (3.0, 6.0), ..PhantomSpec::default() };
        let field = FieldSpec { amplitude: 2.0, ..FieldSpec::default() };
        (0..n).map(|i| make_pair(&phantom, &field, 900 + i as u64).unwrap()).collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch: 1,
            n_gen: 1,
            iterations: 1,
            extent: 16,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_out_of_domain_values() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { n_gen: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { extent: 24, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        let bad_rec = TrainConfig { mode: TrainMode::RecOnly, ..TrainConfig::default() };
        assert!(bad_rec.validate().is_err(), "rec-only with gamma < 1 must be rejected");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig { mode: TrainMode::RecOnly, ..TrainConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("rec-only"));
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Omitted fields fall back to the defaults.
        let sparse: TrainConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(sparse, TrainConfig { iterations: 7, ..TrainConfig::default() });
    }

    #[test]
    fn batches_cover_each_epoch_without_replacement() {
        let pairs = tiny_pairs(4);
        let cfg = TrainConfig { batch: 2, ..tiny_cfg() };
        let mut trainer = Trainer::fresh(cfg, &pairs).unwrap();
        let epoch: Vec<usize> =
            trainer.next_batch().into_iter().chain(trainer.next_batch()).collect();
        let mut sorted = epoch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3], "one epoch must visit every record once");
        // A second epoch revisits all records, generally in a new order.
        let epoch2: Vec<usize> =
            trainer.next_batch().into_iter().chain(trainer.next_batch()).collect();
        let mut sorted2 = epoch2.clone();
        sorted2.sort_unstable();
        assert_eq!(sorted2, vec![0, 1, 2, 3]);
    }

    #[test]
    fn step_accounting_matches_the_phase_structure() {
        let pairs = tiny_pairs(4);
        let cfg = TrainConfig { batch: 2, n_gen: 3, ..tiny_cfg() };
        let (ckpt, log) = train(&cfg, &pairs).unwrap();
        // Per outer iteration: n_gen reconstruction steps plus one
        // adversarial step on the student, and exactly one critic step.
        assert_eq!(ckpt.student_opt[0].step_count(), 4);
        assert_eq!(ckpt.critic_opt.step_count(), 1);
        assert_eq!(ckpt.iteration, 1);
        assert_eq!(log.len(), 1);
        assert!(log[0].l_dis.is_some() && log[0].critic.is_some());
    }

    #[test]
    fn identical_configs_reproduce_identical_loss_logs() {
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig { mode: TrainMode::RecOnly, weights: LossWeights { gamma: 1.0, ..LossWeights::default() }, iterations: 2, ..tiny_cfg() };
        let (ckpt_a, log_a) = train(&cfg, &pairs).unwrap();
        let (ckpt_b, log_b) = train(&cfg, &pairs).unwrap();
        assert_eq!(log_a, log_b);
        for (a, b) in ckpt_a.student[0].entries().iter().zip(ckpt_b.student[0].entries()) {
            assert_eq!(a.1.data(), b.1.data(), "{} diverged between runs", a.0);
        }
    }

    #[test]
    fn gamma_one_adversarial_matches_rec_only_bit_for_bit() {
        // With γ = 1 the student's adversarial step is pure reconstruction
        // and with β = 0 the critic trains on the detached student field
        // alone, so the student trajectory must be unaffected by the whole
        // adversarial apparatus.
        let pairs = tiny_pairs(2);
        let weights = LossWeights { gamma: 1.0, beta: 0.0, ..LossWeights::default() };
        let adv = TrainConfig { weights, iterations: 2, ..tiny_cfg() };
        let rec = TrainConfig { mode: TrainMode::RecOnly, ..adv.clone() };
        let (ckpt_adv, log_adv) = train(&adv, &pairs).unwrap();
        let (ckpt_rec, log_rec) = train(&rec, &pairs).unwrap();
        for (a, b) in ckpt_adv.student[0].entries().iter().zip(ckpt_rec.student[0].entries()) {
            assert_eq!(a.1.data(), b.1.data(), "{} diverged across modes", a.0);
        }
        for (ma, mb) in ckpt_adv.student_opt[0]
            .first_moments()
            .iter()
            .zip(ckpt_rec.student_opt[0].first_moments())
        {
            assert_eq!(ma.data(), mb.data());
        }
        for (a, b) in log_adv.iter().zip(&log_rec) {
            assert_eq!(a.l_rec, b.l_rec);
            assert_eq!(a.l_adv, b.l_adv);
        }
        // The critic itself did train in the adversarial run.
        assert_eq!(ckpt_adv.critic_opt.step_count(), 2);
        assert_eq!(ckpt_rec.critic_opt.step_count(), 0);
    }

    #[test]
    fn resuming_matches_the_unbroken_run_bit_for_bit() {
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig { iterations: 2, ..tiny_cfg() };
        let (full, full_log) = train(&cfg, &pairs).unwrap();
        let (head, head_log) = train(&TrainConfig { iterations: 1, ..cfg.clone() }, &pairs).unwrap();
        let (resumed, tail_log) = resume(head, &pairs, 1).unwrap();
        let mut combined = head_log;
        combined.extend(tail_log);
        assert_eq!(combined, full_log);
        assert_eq!(resumed.config, full.config);
        assert_eq!(resumed.iteration, full.iteration);
        assert_eq!(resumed.rng_state, full.rng_state);
        assert_eq!(resumed.epoch_order, full.epoch_order);
        assert_eq!(resumed.epoch_pos, full.epoch_pos);
        for (a, b) in resumed.student[0].entries().iter().zip(full.student[0].entries()) {
            assert_eq!(a.1.data(), b.1.data(), "{} diverged after resume", a.0);
        }
        for (a, b) in resumed.critic.entries().iter().zip(full.critic.entries()) {
            assert_eq!(a.1.data(), b.1.data(), "critic {} diverged after resume", a.0);
        }
        for (a, b) in resumed
            .critic_opt
            .second_moments()
            .iter()
            .zip(full.critic_opt.second_moments())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn non_finite_losses_abort_with_the_iteration_index() {
        let pairs = tiny_pairs(1);
        let cfg = TrainConfig {
            mode: TrainMode::RecOnly,
            weights: LossWeights { gamma: 1.0, ..LossWeights::default() },
            ..tiny_cfg()
        };
        let (mut ckpt, _) = train(&cfg, &pairs).unwrap();
        // Poison the flow head; the prediction turns NaN on the next step.
        let flow = ckpt.student[0]
            .entries()
            .iter()
            .position(|(n, _)| n == "flow.weight")
            .unwrap();
        let shape = ckpt.student[0].entries()[flow].1.shape().to_vec();
        let n = ckpt.student[0].entries()[flow].1.len();
        ckpt.student[0]
            .set_value(flow, Tensor::new(shape, vec![f32::NAN; n]).unwrap())
            .unwrap();
        match resume(ckpt, &pairs, 1) {
            Err(Error::NonFiniteLoss { iteration: 1, .. }) => {}
            other => panic!("expected a non-finite abort at iteration 1, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_pair_extents_are_rejected() {
        let phantom = PhantomSpec::default(); // 32³ phantoms
        let field = FieldSpec::default();
        let pairs = vec![make_pair(&phantom, &field, 1).unwrap()];
        match train(&tiny_cfg(), &pairs) {
            Err(Error::Record { index: 0, .. }) => {}
            other => panic!("expected a record-extent error, got {other:?}"),
        }
    }
}
