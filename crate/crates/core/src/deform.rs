//! Displacement-field semantics: typed volumes and masks, the warp operator,
//! field composition across cascades, and Jacobian-determinant smoothness
//! analysis.
//!
//! A displacement field `u` maps each voxel `x` of the cuboid grid to the
//! sample coordinate `x + u(x)`; warping resamples an image at those
//! coordinates with clamp-to-edge boundary handling. All displacements are in
//! voxel units with channel order `(u_x, u_y, u_z)`, `x` being the
//! fastest-varying axis.

use crate::kernels::{self, Interp};
use crate::{Error, Result, Tensor};

/// A scalar intensity volume over the cuboid grid.
///
/// The grid tensor is `[1, D, H, W]` with each extent a power of two of at
/// least 16 (the network's strided downsampling path assumes this), and every
/// intensity finite.
#[derive(Clone, Debug)]
pub struct Volume {
    grid: Tensor,
}

/// A strictly binary volume marking an organ's voxels.
#[derive(Clone, Debug)]
pub struct MaskVolume {
    grid: Tensor,
}

/// A dense voxel-unit displacement field, `[3, D, H, W]` with channels
/// `(u_x, u_y, u_z)`.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    u: Tensor,
}

fn spatial_extents(shape: &[usize], channels: usize, what: &str) -> Result<[usize; 3]> {
    match shape {
        [c, d, h, w] if *c == channels => Ok([*d, *h, *w]),
        _ => Err(Error::shape(format!(
            "{what} must be [{channels}, D, H, W], got {shape:?}"
        ))),
    }
}

fn check_matching(op: &str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{op}: extents {a:?} vs {b:?}")))
    }
}

impl Volume {
    /// Wraps an intensity grid, validating shape, extent, and finiteness.
    pub fn new(grid: Tensor) -> Result<Volume> {
        let d = spatial_extents(grid.shape(), 1, "volume grid")?;
        for n in d {
            if n < 16 || !n.is_power_of_two() {
                return Err(Error::shape(format!(
                    "volume extents must be powers of two >= 16, got {d:?}"
                )));
            }
        }
        if !grid.data().iter().all(|v| v.is_finite()) {
            return Err(Error::shape("volume contains non-finite intensities"));
        }
        Ok(Volume { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[1], s[2], s[3]]
    }

    /// Resamples the volume at `x + u(x)`: trilinear for smooth intensity
    /// interpolation, nearest for label-preserving lookup. Sample coordinates
    /// outside the grid clamp to the boundary.
    pub fn warp(&self, field: &DisplacementField, interp: Interp) -> Result<Volume> {
        check_matching("warp", self.extents(), field.extents())?;
        let d = self.extents();
        let out = kernels::warp_raw(self.grid.data(), 1, d, field.u.data(), interp);
        Volume::new(Tensor::new(self.grid.shape().to_vec(), out)?)
    }
}

impl MaskVolume {
    /// Wraps a mask grid, validating shape and strict binarity.
    pub fn new(grid: Tensor) -> Result<MaskVolume> {
        spatial_extents(grid.shape(), 1, "mask grid")?;
        if !grid.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::shape("mask must be strictly binary"));
        }
        Ok(MaskVolume { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[1], s[2], s[3]]
    }

    /// Resamples the mask at `x + u(x)` with nearest-neighbor lookup, which
    /// keeps the result strictly binary. Masks carry segmentation labels, so
    /// only this evaluation-time path exists; no differentiable variant.
    pub fn warp(&self, field: &DisplacementField) -> Result<MaskVolume> {
        check_matching("warp", self.extents(), field.extents())?;
        let d = self.extents();
        let out = kernels::warp_raw(self.grid.data(), 1, d, field.u.data(), Interp::Nearest);
        MaskVolume::new(Tensor::new(self.grid.shape().to_vec(), out)?)
    }

    /// Number of voxels set in the mask.
    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v == 1.0).count()
    }
}

impl DisplacementField {
    /// Wraps a displacement tensor, validating shape and finiteness.
    pub fn new(u: Tensor) -> Result<DisplacementField> {
        spatial_extents(u.shape(), 3, "displacement field")?;
        if !u.data().iter().all(|v| v.is_finite()) {
            return Err(Error::shape("displacement field contains non-finite values"));
        }
        Ok(DisplacementField { u })
    }

    /// The identity deformation over the given extents.
    pub fn zeros(d: [usize; 3]) -> DisplacementField {
        DisplacementField { u: Tensor::zeros(&[3, d[0], d[1], d[2]]) }
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.u.shape();
        [s[1], s[2], s[3]]
    }
}

/// Composes two deformations applied in sequence: warping by `first` and then
/// by `second` equals (up to interpolation error) a single warp by the
/// returned field, `u(x) = u_second(x) + sample(u_first, x + u_second(x))`.
///
/// The identity is exact when `first` is constant — sampling a constant field
/// anywhere returns that constant — which covers the integer-shift case.
pub fn compose(
    first: &DisplacementField,
    second: &DisplacementField,
) -> Result<DisplacementField> {
    check_matching("compose", first.extents(), second.extents())?;
    let d = first.extents();
    let mut u = kernels::warp_raw(first.u.data(), 3, d, second.u.data(), Interp::Trilinear);
    for (acc, &s) in u.iter_mut().zip(second.u.data()) {
        *acc += s;
    }
    DisplacementField::new(Tensor::new(first.u.shape().to_vec(), u)?)
}

/// Per-voxel determinants of `∂(x + u)/∂x` in f64, plus the extents.
///
/// Derivatives are central differences in the interior and one-sided at the
/// boundary faces; both are exact on fields affine in the coordinates.
fn jacobian_dets(field: &DisplacementField) -> Result<(Vec<f64>, [usize; 3])> {
    let d = field.extents();
    if d.iter().any(|&n| n < 3) {
        return Err(Error::shape(format!(
            "jacobian determinant needs extents >= 3, got {d:?}"
        )));
    }
    let [dd, hh, ww] = d;
    let n = dd * hh * ww;
    let u = field.u.data();
    // diff of channel `ch` along one axis at flat index v, with `pos` the
    // coordinate on that axis, `len` its extent and `step` its stride.
    let diff = |ch: usize, v: usize, pos: usize, len: usize, step: usize| -> f64 {
        let base = ch * n + v;
        if pos == 0 {
            (u[base + step] - u[base]) as f64
        } else if pos == len - 1 {
            (u[base] - u[base - step]) as f64
        } else {
            (u[base + step] as f64 - u[base - step] as f64) * 0.5
        }
    };
    let mut dets = vec![0.0f64; n];
    let mut v = 0;
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                // Row i of the Jacobian is ∇(x_i + u_i); columns follow the
                // (x, y, z) derivative order of the channels.
                let mut j = [[0.0f64; 3]; 3];
                for (ch, row) in j.iter_mut().enumerate() {
                    row[0] = diff(ch, v, x, ww, 1);
                    row[1] = diff(ch, v, y, hh, ww);
                    row[2] = diff(ch, v, z, dd, hh * ww);
                    row[ch] += 1.0;
                }
                dets[v] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                v += 1;
            }
        }
    }
    Ok((dets, d))
}

/// Per-voxel determinant of the deformation's Jacobian `I + ∇u` as a
/// `[1, D, H, W]` tensor. Determinant 1 everywhere means a locally
/// volume-preserving deformation; values at or below zero mark folding.
pub fn jacobian_det_map(field: &DisplacementField) -> Result<Tensor> {
    let (dets, d) = jacobian_dets(field)?;
    let data: Vec<f32> = dets.iter().map(|&v| v as f32).collect();
    Tensor::new(vec![1, d[0], d[1], d[2]], data)
}

/// Number of voxels whose Jacobian determinant is non-positive — the folding
/// count used to compare deformation smoothness across methods.
pub fn folding_count(field: &DisplacementField) -> Result<usize> {
    let (dets, _) = jacobian_dets(field)?;
    Ok(dets.iter().filter(|&&v| v <= 0.0).count())
}
