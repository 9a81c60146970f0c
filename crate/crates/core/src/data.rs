//! Synthetic training data: blob-and-organ phantoms, smooth fold-free
//! ground-truth deformations, paired datasets on disk, and the teacher-field
//! providers the trainer consumes.
//!
//! Every artifact is a pure function of its seeds, so regenerating a dataset
//! reproduces it byte for byte, and the ground-truth field doubles as an
//! exact teacher: the fixed image IS the moving image warped by it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deform::{folding_count, DisplacementField, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::kernels::Interp;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::volio;

/// Recipe for one synthetic intensity volume and its organ mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Cubic volume extent; power of two, at least 16.
    pub extent: usize,
    /// Number of Gaussian intensity blobs.
    pub blob_count: usize,
    /// Blob peak amplitude range.
    pub blob_amp: (f64, f64),
    /// Blob width (standard deviation) range, in voxels.
    pub blob_sigma: (f64, f64),
    /// Organ ellipsoid semi-axis range, in voxels.
    pub organ_axes: (f64, f64),
    /// Generation seed.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: 32,
            blob_count: 8,
            blob_amp: (0.3, 1.0),
            blob_sigma: (2.5, 4.5),
            organ_axes: (4.0, 9.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 16 || !self.extent.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "phantom extent must be a power of two ≥ 16, got {}",
                self.extent
            )));
        }
        for (name, (lo, hi)) in [
            ("blob_amp", self.blob_amp),
            ("blob_sigma", self.blob_sigma),
            ("organ_axes", self.organ_axes),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
                return Err(Error::InvalidConfig(format!(
                    "{name} range must satisfy 0 < lo ≤ hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.organ_axes.1 > self.extent as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "organ semi-axes up to {} do not fit extent {}",
                self.organ_axes.1, self.extent
            )));
        }
        Ok(())
    }
}

/// Recipe for a smooth random displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    /// Control-grid extent the random displacements are drawn on before
    /// upsampling.
    pub control_extent: usize,
    /// Peak displacement magnitude in voxels (per component, before the
    /// derivative cap, which may shrink it further).
    pub amplitude: f64,
    /// Upper bound on the per-component spatial derivative after scaling;
    /// keeping it well below 1 keeps the deformation fold-free.
    pub derivative_bound: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec { control_extent: 4, amplitude: 3.0, derivative_bound: 0.4 }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.control_extent < 2 {
            return Err(Error::InvalidConfig(format!(
                "control extent must be ≥ 2, got {}",
                self.control_extent
            )));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "amplitude must be ≥ 0, got {}",
                self.amplitude
            )));
        }
        if !(0.0..1.0).contains(&self.derivative_bound) || self.derivative_bound == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "derivative bound must lie in (0, 1), got {}",
                self.derivative_bound
            )));
        }
        Ok(())
    }
}

/// Synthesizes the phantom volume and its organ mask: a background of smooth
/// positive blobs plus a parabolic-capped ellipsoid organ whose interior is
/// the mask, all normalized to [0, 1].
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    spec.validate()?;
    let e = spec.extent;
    let ef = e as f64;
    let mut rng = SplitMix64::stream(spec.seed, 3);

    let organ_center: [f64; 3] = [
        rng.uniform(0.38 * ef, 0.62 * ef),
        rng.uniform(0.38 * ef, 0.62 * ef),
        rng.uniform(0.38 * ef, 0.62 * ef),
    ];
    let organ_axes: [f64; 3] = [
        rng.uniform(spec.organ_axes.0, spec.organ_axes.1),
        rng.uniform(spec.organ_axes.0, spec.organ_axes.1),
        rng.uniform(spec.organ_axes.0, spec.organ_axes.1),
    ];
    let blobs: Vec<([f64; 3], f64, f64)> = (0..spec.blob_count)
        .map(|_| {
            let c = [
                rng.uniform(2.5, ef - 2.5),
                rng.uniform(2.5, ef - 2.5),
                rng.uniform(2.5, ef - 2.5),
            ];
            let sigma = rng.uniform(spec.blob_sigma.0, spec.blob_sigma.1);
            let amp = rng.uniform(spec.blob_amp.0, spec.blob_amp.1);
            (c, sigma, amp)
        })
        .collect();

    let mut intensity = vec![0.0f32; e * e * e];
    let mut mask = vec![0.0f32; e * e * e];
    let mut idx = 0;
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let p = [x as f64, y as f64, z as f64];
                let mut v = 0.0f64;
                for (c, sigma, amp) in &blobs {
                    let r2: f64 =
                        (0..3).map(|i| (p[i] - c[i]) * (p[i] - c[i])).sum();
                    v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
                let rho2: f64 = (0..3)
                    .map(|i| {
                        let t = (p[i] - organ_center[i]) / organ_axes[i];
                        t * t
                    })
                    .sum();
                if rho2 <= 1.0 {
                    v += 0.75 * (1.0 - rho2);
                    mask[idx] = 1.0;
                }
                intensity[idx] = v as f32;
                idx += 1;
            }
        }
    }

    let max = intensity.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let min = intensity.iter().cloned().fold(f32::INFINITY, f32::min);
    if !(max > min && max > 0.0) {
        return Err(Error::DegenerateImage);
    }
    for v in &mut intensity {
        *v /= max;
    }
    let volume = Volume::new(Tensor::new(vec![1, e, e, e], intensity)?)?;
    let mask = MaskVolume::new(Tensor::new(vec![1, e, e, e], mask)?)?;
    Ok((volume, mask))
}

/// Raised-cosine taper over the `margin` voxels nearest each face, so
/// displacements vanish exactly on the boundary and sequential warps agree
/// with composed ones there.
fn boundary_window(pos: usize, len: usize, margin: usize) -> f64 {
    let edge = pos.min(len - 1 - pos);
    if edge >= margin {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / margin as f64).cos()
    }
}

const FIELD_MARGIN: usize = 4;

/// Draws control-grid displacements, upsamples them trilinearly to the full
/// extent, tapers them to zero at the faces, scales to the requested peak
/// amplitude, then caps the spatial derivative. The result is asserted
/// fold-free — a fold here is a generator bug, not an input condition.
pub fn gen_smooth_field(
    spec: &FieldSpec,
    extent: [usize; 3],
    rng: &mut SplitMix64,
) -> Result<DisplacementField> {
    spec.validate()?;
    let c = spec.control_extent;
    let control: Vec<f32> =
        (0..3 * c * c * c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    let tape = Tape::new();
    let coarse = tape.leaf(Tensor::new(vec![3, c, c, c], control)?);
    let fine = tape.value(tape.resize(coarse, extent)?);

    let [d, h, w] = extent;
    let mut u: Vec<f64> = fine.data().iter().map(|&v| v as f64).collect();
    let plane = d * h * w;
    for ch in 0..3 {
        let mut idx = 0;
        for z in 0..d {
            let wz = boundary_window(z, d, FIELD_MARGIN);
            for y in 0..h {
                let wy = boundary_window(y, h, FIELD_MARGIN);
                for x in 0..w {
                    let wx = boundary_window(x, w, FIELD_MARGIN);
                    u[ch * plane + idx] *= wz * wy * wx;
                    idx += 1;
                }
            }
        }
    }

    let peak = u.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if peak > 0.0 {
        let s = spec.amplitude / peak;
        for v in &mut u {
            *v *= s;
        }
    }

    let max_d = max_abs_derivative(&u, extent);
    if max_d > spec.derivative_bound {
        let s = spec.derivative_bound / max_d;
        for v in &mut u {
            *v *= s;
        }
    }

    let data: Vec<f32> = u.iter().map(|&v| v as f32).collect();
    let field = DisplacementField::new(Tensor::new(vec![3, d, h, w], data)?)?;
    assert_eq!(
        folding_count(&field)?,
        0,
        "smooth-field generator produced a folding deformation"
    );
    Ok(field)
}

/// Largest |∂u_c/∂axis| over all components, axes, and voxels, using the
/// same stencils as the Jacobian map: central differences inside, one-sided
/// at the faces.
fn max_abs_derivative(u: &[f64], extent: [usize; 3]) -> f64 {
    let [d, h, w] = extent;
    let plane = d * h * w;
    let mut worst = 0.0f64;
    for ch in 0..3 {
        let base = ch * plane;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let at = base + (z * h + y) * w + x;
                    for (pos, len, step) in [(x, w, 1), (y, h, w), (z, d, h * w)] {
                        let g = if pos == 0 {
                            u[at + step] - u[at]
                        } else if pos == len - 1 {
                            u[at] - u[at - step]
                        } else {
                            (u[at + step] - u[at - step]) * 0.5
                        };
                        worst = worst.max(g.abs());
                    }
                }
            }
        }
    }
    worst
}

/// One training sample held in memory.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_mask: MaskVolume,
    pub fixed_mask: MaskVolume,
    pub teacher: DisplacementField,
}

/// Builds one pair from scratch: phantom, ground-truth field, and the fixed
/// image/mask produced by warping with it. The teacher field IS the ground
/// truth, so reconstruction and overlap against `fixed` are exact at the
/// teacher deformation by construction.
pub fn make_pair(
    phantom: &PhantomSpec,
    field: &FieldSpec,
    seed: u64,
) -> Result<LoadedPair> {
    let phantom_spec =
        PhantomSpec { seed: SplitMix64::stream(seed, 5).next_u64(), ..phantom.clone() };
    let (moving, moving_mask) = gen_phantom(&phantom_spec)?;
    let mut field_rng = SplitMix64::stream(seed, 6);
    let extent = moving.extents();
    let teacher = gen_smooth_field(field, extent, &mut field_rng)?;
    let fixed = moving.warp(&teacher, Interp::Trilinear)?;
    let fixed_mask = moving_mask.warp(&teacher)?;
    Ok(LoadedPair { moving, fixed, moving_mask, fixed_mask, teacher })
}

/// File names of one dataset record, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPaths {
    pub moving: String,
    pub fixed: String,
    pub moving_mask: String,
    pub fixed_mask: String,
    pub teacher_field: String,
}

/// Index of a generated dataset: the specs and seed it derives from plus the
/// per-record file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub field: FieldSpec,
    pub records: Vec<RecordPaths>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn record_seed(dataset_seed: u64, index: usize) -> u64 {
    SplitMix64::stream(dataset_seed, 1000 + index as u64).next_u64()
}

/// Generates `count` records into `dir` and writes the manifest there. Each
/// record derives its own seed from the dataset seed, so the content of
/// record i does not depend on how many others exist.
pub fn gen_dataset(
    dir: &Path,
    count: usize,
    phantom: &PhantomSpec,
    field: &FieldSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    phantom.validate()?;
    field.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let pair = make_pair(phantom, field, record_seed(seed, i))?;
        let paths = RecordPaths {
            moving: format!("rec_{i:03}_moving.vol"),
            fixed: format!("rec_{i:03}_fixed.vol"),
            moving_mask: format!("rec_{i:03}_moving_mask.vol"),
            fixed_mask: format!("rec_{i:03}_fixed_mask.vol"),
            teacher_field: format!("rec_{i:03}_teacher.vol"),
        };
        volio::write_volume(&dir.join(&paths.moving), &pair.moving)?;
        volio::write_volume(&dir.join(&paths.fixed), &pair.fixed)?;
        volio::write_mask(&dir.join(&paths.moving_mask), &pair.moving_mask)?;
        volio::write_mask(&dir.join(&paths.fixed_mask), &pair.fixed_mask)?;
        volio::write_field(&dir.join(&paths.teacher_field), &pair.teacher)?;
        records.push(paths);
    }
    let manifest = DatasetManifest {
        schema: 1,
        seed,
        phantom: phantom.clone(),
        field: field.clone(),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(manifest)
}

/// Parses a manifest file and returns it with its base directory.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema != 1 {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported manifest schema {}", manifest.schema),
        ));
    }
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((manifest, base))
}

/// Where teacher fields come from: the dataset's own ground-truth files, or
/// externally supplied replacements matched by file name.
#[derive(Debug, Clone)]
pub enum TeacherProvider {
    GroundTruth,
    FromFiles { dir: PathBuf },
}

impl TeacherProvider {
    fn teacher_path(&self, base: &Path, record: &RecordPaths) -> PathBuf {
        match self {
            TeacherProvider::GroundTruth => base.join(&record.teacher_field),
            TeacherProvider::FromFiles { dir } => {
                let name = Path::new(&record.teacher_field)
                    .file_name()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(&record.teacher_field));
                dir.join(name)
            }
        }
    }
}

/// Loads one record, checking that all five files share the same extents.
pub fn load_pair(
    base: &Path,
    record: &RecordPaths,
    index: usize,
    provider: &TeacherProvider,
) -> Result<LoadedPair> {
    let fail = |reason: String| Error::Record { index, reason };
    let moving = volio::read_volume(&base.join(&record.moving))?;
    let fixed = volio::read_volume(&base.join(&record.fixed))?;
    let moving_mask = volio::read_mask(&base.join(&record.moving_mask))?;
    let fixed_mask = volio::read_mask(&base.join(&record.fixed_mask))?;
    let teacher = volio::read_field(&provider.teacher_path(base, record))?;
    let extent = moving.extents();
    for (name, got) in [
        ("fixed image", fixed.extents()),
        ("moving mask", moving_mask.extents()),
        ("fixed mask", fixed_mask.extents()),
        ("teacher field", teacher.extents()),
    ] {
        if got != extent {
            return Err(fail(format!(
                "{name} extents {got:?} do not match the moving image's {extent:?}"
            )));
        }
    }
    Ok(LoadedPair { moving, fixed, moving_mask, fixed_mask, teacher })
}

/// Loads every record of a dataset into memory.
pub fn load_dataset(
    manifest_path: &Path,
    provider: &TeacherProvider,
) -> Result<Vec<LoadedPair>> {
    let (manifest, base) = load_manifest(manifest_path)?;
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| load_pair(&base, r, i, provider))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { extent: 16, organ_axes: (3.0, 6.0), ..PhantomSpec::default() }
    }

    #[test]
    fn default_specs_validate() {
        PhantomSpec::default().validate().unwrap();
        FieldSpec::default().validate().unwrap();
        assert!(PhantomSpec { extent: 20, ..PhantomSpec::default() }.validate().is_err());
        assert!(FieldSpec { derivative_bound: 1.5, ..FieldSpec::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn phantom_mask_is_binary_and_nonempty() {
        let (_, mask) = gen_phantom(&small_spec()).unwrap();
        assert!(mask.grid().data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(mask.count() > 0);
    }

    #[test]
    fn phantom_generation_is_deterministic() {
        let a = gen_phantom(&small_spec()).unwrap();
        let b = gen_phantom(&small_spec()).unwrap();
        assert_eq!(a.0.grid().data(), b.0.grid().data());
        assert_eq!(a.1.grid().data(), b.1.grid().data());
        let other =
            gen_phantom(&PhantomSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.0.grid().data(), other.0.grid().data());
    }

    #[test]
    fn phantom_intensities_fill_the_unit_range() {
        for seed in 0..5 {
            let spec = PhantomSpec { seed, ..PhantomSpec::default() };
            let (vol, _) = gen_phantom(&spec).unwrap();
            let max = vol.grid().data().iter().cloned().fold(f32::MIN, f32::max);
            let min = vol.grid().data().iter().cloned().fold(f32::MAX, f32::min);
            assert!((max - min) >= 0.5, "seed {seed}: span {}", max - min);
            assert!(max <= 1.0 && min >= 0.0);
        }
    }

    #[test]
    fn zero_amplitude_gives_the_zero_field() {
        let spec = FieldSpec { amplitude: 0.0, ..FieldSpec::default() };
        let mut rng = SplitMix64::new(4);
        let f = gen_smooth_field(&spec, [16, 16, 16], &mut rng).unwrap();
        assert!(f.u().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_fields_respect_their_contract() {
        // Fold-free and within amplitude over many seeds; the folding_count
        // assertion inside the generator has already fired if not, so this
        // re-checks from the outside along with the amplitude and
        // derivative caps.
        let spec = FieldSpec::default();
        for seed in 0..100 {
            let mut rng = SplitMix64::stream(seed, 7);
            let f = gen_smooth_field(&spec, [16, 16, 16], &mut rng).unwrap();
            assert_eq!(folding_count(&f).unwrap(), 0, "seed {seed}");
            let peak =
                f.u().data().iter().fold(0.0f32, |a, &v| a.max(v.abs())) as f64;
            assert!(peak <= spec.amplitude + 1e-5, "seed {seed}: peak {peak}");
            let u: Vec<f64> = f.u().data().iter().map(|&v| v as f64).collect();
            let d = max_abs_derivative(&u, [16, 16, 16]);
            assert!(d <= spec.derivative_bound + 1e-5, "seed {seed}: derivative {d}");
        }
    }

    #[test]
    fn fields_vanish_on_the_boundary() {
        let mut rng = SplitMix64::new(9);
        let f = gen_smooth_field(&FieldSpec::default(), [16, 16, 16], &mut rng).unwrap();
        let u = f.u().data();
        let plane = 16 * 16 * 16;
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(u[ch * plane + y * 16 + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn pair_construction_identities_hold() {
        let pair = make_pair(&small_spec(), &FieldSpec::default(), 42).unwrap();
        let rewarped = pair.moving.warp(&pair.teacher, Interp::Trilinear).unwrap();
        assert_eq!(rewarped.grid().data(), pair.fixed.grid().data());
        let remasked = pair.moving_mask.warp(&pair.teacher).unwrap();
        assert_eq!(remasked.grid().data(), pair.fixed_mask.grid().data());
        let rec = crate::loss::rec_loss(&rewarped, &pair.fixed).unwrap();
        assert!(rec.abs() < 1e-6, "reconstruction at ground truth: {rec}");
    }

    #[test]
    fn deformation_actually_moves_the_organ() {
        let spec = FieldSpec { amplitude: 3.0, ..FieldSpec::default() };
        let pair = make_pair(&small_spec(), &spec, 43).unwrap();
        assert_ne!(
            pair.moving_mask.grid().data(),
            pair.fixed_mask.grid().data(),
            "amplitude-3 field left the mask untouched"
        );
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let phantom = small_spec();
        let field = FieldSpec::default();
        let ma = gen_dataset(a.path(), 2, &phantom, &field, 7).unwrap();
        let mb = gen_dataset(b.path(), 2, &phantom, &field, 7).unwrap();
        assert_eq!(ma, mb);
        let mut names: Vec<String> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 11, "2 records × 5 files + manifest");
        for name in names {
            let bytes_a = std::fs::read(a.path().join(&name)).unwrap();
            let bytes_b = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{name} differs between runs");
        }
    }

    #[test]
    fn loaded_dataset_matches_the_generated_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let phantom = small_spec();
        let field = FieldSpec::default();
        gen_dataset(dir.path(), 2, &phantom, &field, 9).unwrap();
        let pairs = load_dataset(
            &dir.path().join(MANIFEST_NAME),
            &TeacherProvider::GroundTruth,
        )
        .unwrap();
        assert_eq!(pairs.len(), 2);
        for (i, loaded) in pairs.iter().enumerate() {
            let fresh = make_pair(&phantom, &field, record_seed(9, i)).unwrap();
            assert_eq!(loaded.moving.grid().data(), fresh.moving.grid().data());
            assert_eq!(loaded.teacher.u().data(), fresh.teacher.u().data());
            assert_eq!(loaded.fixed_mask.grid().data(), fresh.fixed_mask.grid().data());
        }
    }

    #[test]
    fn file_teacher_provider_reads_the_alternate_directory() {
        let dir = tempfile::tempdir().unwrap();
        let alt = tempfile::tempdir().unwrap();
        gen_dataset(dir.path(), 1, &small_spec(), &FieldSpec::default(), 11).unwrap();
        let (manifest, base) = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        let record = &manifest.records[0];
        // The alternate teacher is the ground truth scaled by one half.
        let gt = volio::read_field(&base.join(&record.teacher_field)).unwrap();
        let halved: Vec<f32> = gt.u().data().iter().map(|&v| 0.5 * v).collect();
        let alt_field = DisplacementField::new(
            Tensor::new(gt.u().shape().to_vec(), halved).unwrap(),
        )
        .unwrap();
        volio::write_field(&alt.path().join(&record.teacher_field), &alt_field).unwrap();
        let provider = TeacherProvider::FromFiles { dir: alt.path().to_path_buf() };
        let pair = load_pair(&base, record, 0, &provider).unwrap();
        assert_eq!(pair.teacher.u().data(), alt_field.u().data());
    }

    #[test]
    fn extent_mismatches_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        gen_dataset(dir.path(), 1, &small_spec(), &FieldSpec::default(), 13).unwrap();
        let (manifest, base) = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        let record = &manifest.records[0];
        let wrong = DisplacementField::zeros([8, 8, 8]);
        volio::write_field(&base.join(&record.teacher_field), &wrong).unwrap();
        match load_pair(&base, record, 0, &TeacherProvider::GroundTruth) {
            Err(Error::Record { index: 0, .. }) => {}
            other => panic!("expected a record error, got {other:?}"),
        }
    }
}
