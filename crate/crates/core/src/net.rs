//! The registration networks: a light-weight encoder–decoder student that
//! predicts a dense displacement field from a moving/fixed volume pair, an
//! n-stage cascade that composes successive predictions, and the critic that
//! maps a displacement field to a scalar mean feature.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::deform::{DisplacementField, Volume};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::{Error, KernelCache, Result, Tensor};

/// Shape of the student generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    /// Channels after the first encoder layer; doubles per level.
    pub base_channels: usize,
    /// Number of stride-2 encoder levels (and matching decoder levels).
    pub levels: usize,
    /// Cubic kernel edge for every layer.
    pub kernel: usize,
    /// Down/upsampling factor per level.
    pub stride: usize,
    /// Number of cascaded registration stages.
    pub cascades: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { base_channels: 16, levels: 4, kernel: 4, stride: 2, cascades: 1 }
    }
}

impl StudentConfig {
    fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.levels < 2
            || self.kernel == 0
            || self.stride < 2
            || self.cascades == 0
        {
            return Err(Error::InvalidConfig(format!(
                "student config out of domain: {self:?}"
            )));
        }
        Ok(())
    }

    /// Input extents must be divisible by this for the decoder to mirror the
    /// encoder exactly.
    pub fn extent_divisor(&self) -> usize {
        self.stride.pow(self.levels as u32)
    }

    fn check_extents(&self, d: [usize; 3]) -> Result<()> {
        let div = self.extent_divisor();
        if d.iter().any(|&n| n == 0 || n % div != 0) {
            return Err(Error::shape(format!(
                "input extents {d:?} not divisible by {div} (stride^levels)"
            )));
        }
        Ok(())
    }

    /// Encoder output channels per level: base, 2·base, 4·base, …
    fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Shape of the critic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Fields are trilinearly resampled to this cubic extent before the
    /// first layer; must leave at least one voxel after all halvings.
    pub input_size: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { input_size: 32 }
    }
}

/// Output channels after each critic layer. The first layer keeps the three
/// displacement components; the remainder double up to 256.
const DISC_CHANNELS: [usize; 6] = [3, 16, 32, 64, 128, 256];
const DISC_KERNEL: usize = 4;
const DISC_STRIDE: usize = 2;

impl DiscConfig {
    fn validate(&self) -> Result<()> {
        // Each of the six stride-2 layers must see a genuinely halvable
        // extent except the last, which may reduce a single voxel to itself.
        if self.input_size < (1 << (DISC_CHANNELS.len() - 1)) {
            return Err(Error::InvalidConfig(format!(
                "critic input size {} too small for {} stride-2 layers",
                self.input_size,
                DISC_CHANNELS.len()
            )));
        }
        Ok(())
    }
}

/// An ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name '{name}'")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces the value at `index`, keeping the name; the new tensor must
    /// match the old shape.
    pub fn set_value(&mut self, index: usize, value: Tensor) -> Result<()> {
        let (name, old) = &self.entries[index];
        if old.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': shape {:?} cannot become {:?}",
                old.shape(),
                value.shape()
            )));
        }
        self.entries[index].1 = value;
        Ok(())
    }

    /// Registers every parameter as a tape leaf, in declaration order.
    pub fn leaves(&self, tape: &Tape) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Total number of scalar parameters in the collection.
pub fn param_count(params: &ParamSet) -> usize {
    params.param_count()
}

fn glorot(rng: &mut SplitMix64, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f32> =
        (0..shape.iter().product()).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::new(shape, data).expect("element count matches shape")
}

/// Conv layer parameters: kernel `[co, ci, k, k, k]` Glorot-uniform, bias zero.
fn conv_layer(
    params: &mut ParamSet,
    rng: &mut SplitMix64,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
) -> Result<()> {
    let taps = k * k * k;
    let kern = glorot(rng, vec![co, ci, k, k, k], ci * taps, co * taps);
    params.push(format!("{name}.weight"), kern)?;
    params.push(format!("{name}.bias"), Tensor::zeros(&[co]))
}

/// Transposed-conv layer parameters: kernel `[ci, co, k, k, k]`.
fn tconv_layer(
    params: &mut ParamSet,
    rng: &mut SplitMix64,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
) -> Result<()> {
    let taps = k * k * k;
    let kern = glorot(rng, vec![ci, co, k, k, k], ci * taps, co * taps);
    params.push(format!("{name}.weight"), kern)?;
    params.push(format!("{name}.bias"), Tensor::zeros(&[co]))
}

/// Per-decoder-level input channels: the deepest level consumes the encoder
/// bottleneck; every other level consumes the previous level's output
/// concatenated with the matching encoder feature.
fn dec_in_channels(cfg: &StudentConfig, level: usize) -> usize {
    if level == cfg.levels - 2 {
        cfg.enc_channels(cfg.levels - 1)
    } else {
        2 * cfg.enc_channels(level + 1)
    }
}

/// Initializes student parameters: `levels` stride-2 encoder convolutions
/// (2 input channels for the moving/fixed pair), `levels-1` decoder
/// transposed convolutions with skip concatenation, and a transposed-conv
/// flow head emitting 3 displacement channels with no activation.
pub fn init_student(cfg: &StudentConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for level in 0..cfg.levels {
        let ci = if level == 0 { 2 } else { cfg.enc_channels(level - 1) };
        let mut rng = SplitMix64::stream(seed, level as u64);
        conv_layer(&mut params, &mut rng, &format!("enc{level}"), ci, cfg.enc_channels(level), cfg.kernel)?;
    }
    for level in (0..cfg.levels - 1).rev() {
        let mut rng = SplitMix64::stream(seed, 16 + level as u64);
        tconv_layer(
            &mut params,
            &mut rng,
            &format!("dec{level}"),
            dec_in_channels(cfg, level),
            cfg.enc_channels(level),
            cfg.kernel,
        )?;
    }
    let mut rng = SplitMix64::stream(seed, 32);
    tconv_layer(&mut params, &mut rng, "flow", 2 * cfg.base_channels, 3, cfg.kernel)?;
    Ok(params)
}

/// Initializes critic parameters: six stride-2 convolutions over the resized
/// field, ReLU after the first five, sigmoid after the last.
pub fn init_discriminator(cfg: &DiscConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut ci = 3;
    for (i, &co) in DISC_CHANNELS.iter().enumerate() {
        let mut rng = SplitMix64::stream(seed, 64 + i as u64);
        conv_layer(&mut params, &mut rng, &format!("disc{i}"), ci, co, DISC_KERNEL)?;
        ci = co;
    }
    Ok(params)
}

/// Builds the student forward pass on `tape`. `moving` and `fixed` are
/// `[1, D, H, W]` nodes; `leaves` the parameter nodes in declaration order.
/// Returns the `[3, D, H, W]` displacement prediction.
pub fn student_forward_tape(
    tape: &Tape,
    moving: NodeId,
    fixed: NodeId,
    leaves: &[NodeId],
    cfg: &StudentConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let want = 2 * cfg.levels + 2 * (cfg.levels - 1) + 2;
    if leaves.len() != want {
        return Err(Error::InvalidConfig(format!(
            "student expects {want} parameter tensors, got {}",
            leaves.len()
        )));
    }
    let shape = tape.shape_of(moving);
    let d = [shape[1], shape[2], shape[3]];
    cfg.check_extents(d)?;
    if tape.shape_of(fixed) != shape {
        return Err(Error::shape("moving/fixed extents differ"));
    }

    let mut t = tape.concat_ch(moving, fixed)?;
    let mut skips = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let k = leaves[2 * level];
        let b = leaves[2 * level + 1];
        t = tape.relu(tape.conv3d(t, k, b, cfg.stride)?);
        skips.push(t);
    }
    let dec_base = 2 * cfg.levels;
    for (i, level) in (0..cfg.levels - 1).rev().enumerate() {
        let k = leaves[dec_base + 2 * i];
        let b = leaves[dec_base + 2 * i + 1];
        t = tape.relu(tape.tconv3d(t, k, b, cfg.stride)?);
        t = tape.concat_ch(t, skips[level])?;
    }
    let flow_k = leaves[leaves.len() - 2];
    let flow_b = leaves[leaves.len() - 1];
    tape.tconv3d(t, flow_k, flow_b, cfg.stride)
}

/// One-shot student prediction for a volume pair.
pub fn student_forward(
    moving: &Volume,
    fixed: &Volume,
    params: &ParamSet,
    cfg: &StudentConfig,
) -> Result<DisplacementField> {
    let tape = Tape::new();
    let m = tape.leaf(moving.grid().clone());
    let f = tape.leaf(fixed.grid().clone());
    let leaves = params.leaves(&tape);
    let out = student_forward_tape(&tape, m, f, &leaves, cfg)?;
    DisplacementField::new(tape.value(out))
}

/// Field composition on the tape: `u = u2 + warp(u1, u2)`, matching the
/// eager composition rule.
pub fn compose_tape(tape: &Tape, first: NodeId, second: NodeId) -> Result<NodeId> {
    let sampled = tape.warp(first, second)?;
    tape.add(sampled, second)
}

/// Builds the n-stage cascade on `tape`: stage k predicts a correction from
/// the currently warped moving image and the fixed image, the corrections
/// compose into a running total, and the original moving image is re-warped
/// by that total (one interpolation, not n). Returns the per-stage fields,
/// the composed field, and the final warped image node.
pub fn cascade_forward_tape(
    tape: &Tape,
    moving: NodeId,
    fixed: NodeId,
    per_stage: &[Vec<NodeId>],
    cfg: &StudentConfig,
) -> Result<(Vec<NodeId>, NodeId, NodeId)> {
    if per_stage.len() != cfg.cascades {
        return Err(Error::InvalidConfig(format!(
            "expected {} parameter sets for {} cascades, got {}",
            cfg.cascades,
            cfg.cascades,
            per_stage.len()
        )));
    }
    let mut stages = Vec::with_capacity(cfg.cascades);
    let mut total: Option<NodeId> = None;
    let mut current = moving;
    for leaves in per_stage {
        let phi = student_forward_tape(tape, current, fixed, leaves, cfg)?;
        stages.push(phi);
        total = Some(match total {
            None => phi,
            Some(t) => compose_tape(tape, t, phi)?,
        });
        current = tape.warp(moving, total.expect("just set"))?;
    }
    let total = total.expect("cascades >= 1");
    Ok((stages, total, current))
}

/// One-shot cascade registration for a volume pair.
pub fn cascade_forward(
    moving: &Volume,
    fixed: &Volume,
    per_stage: &[ParamSet],
    cfg: &StudentConfig,
) -> Result<(Vec<DisplacementField>, DisplacementField, Volume)> {
    let tape = Tape::new();
    let m = tape.leaf(moving.grid().clone());
    let f = tape.leaf(fixed.grid().clone());
    let leaves: Vec<Vec<NodeId>> = per_stage.iter().map(|p| p.leaves(&tape)).collect();
    let (stages, total, warped) = cascade_forward_tape(&tape, m, f, &leaves, cfg)?;
    let stages = stages
        .into_iter()
        .map(|id| DisplacementField::new(tape.value(id)))
        .collect::<Result<Vec<_>>>()?;
    let total = DisplacementField::new(tape.value(total))?;
    let warped = Volume::new(tape.value(warped))?;
    Ok((stages, total, warped))
}

/// Builds the critic forward pass on `tape`: the field is resampled to the
/// configured cubic extent, passed through the six convolutions, squashed by
/// a sigmoid, and reduced to its scalar mean feature in (0, 1).
pub fn discriminator_forward_tape(
    tape: &Tape,
    field: NodeId,
    leaves: &[NodeId],
    cfg: &DiscConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if leaves.len() != 2 * DISC_CHANNELS.len() {
        return Err(Error::InvalidConfig(format!(
            "critic expects {} parameter tensors, got {}",
            2 * DISC_CHANNELS.len(),
            leaves.len()
        )));
    }
    let shape = tape.shape_of(field);
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::shape(format!("critic input must be [3, D, H, W], got {shape:?}")));
    }
    let c = cfg.input_size;
    let mut t = if shape[1..] == [c, c, c] { field } else { tape.resize(field, [c, c, c])? };
    for i in 0..DISC_CHANNELS.len() {
        let k = leaves[2 * i];
        let b = leaves[2 * i + 1];
        t = tape.conv3d(t, k, b, DISC_STRIDE)?;
        if i + 1 < DISC_CHANNELS.len() {
            t = tape.relu(t);
        }
    }
    Ok(tape.mean_all(tape.sigmoid(t)))
}

/// One-shot critic evaluation of a displacement field; uses `cache` to reuse
/// packed kernels across calls when provided.
pub fn discriminator_forward(
    field: &DisplacementField,
    params: &ParamSet,
    cfg: &DiscConfig,
    cache: Option<Rc<KernelCache>>,
) -> Result<f32> {
    let tape = match cache {
        Some(c) => Tape::with_cache(c),
        None => Tape::new(),
    };
    let f = tape.leaf(field.u().clone());
    let leaves = params.leaves(&tape);
    let m = discriminator_forward_tape(&tape, f, &leaves, cfg)?;
    Ok(tape.value(m).item())
}
