//! Direct 3-D convolution and spatial resampling kernels.
//!
//! Geometry convention: a stride-`s` convolution maps input extent `n` to
//! `ceil(n/s)` using SAME-style zero padding, `total = max((out-1)*s + k - n, 0)`
//! split as `floor(total/2)` before / remainder after. Power-of-two extents
//! halve exactly under stride 2, and the rule stays well-defined down to
//! extent-1 inputs (needed by the deepest discriminator layers). Transposed
//! convolution and the convolution backward passes are exact linear adjoints
//! of this forward map, so every gradient identity holds to rounding error.
//!
//! Values are stored as f32; every accumulation runs in f64. Hot loops are
//! written over channels-last repacks so the innermost dimension is a
//! contiguous channel run the compiler can vectorize.

/// Spatial geometry of one convolution: extents, kernel size, stride, padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    /// Input spatial extents (d, h, w).
    pub xd: [usize; 3],
    /// Output spatial extents, `ceil(xd/s)` per axis.
    pub yd: [usize; 3],
    /// Kernel extents per axis.
    pub k: [usize; 3],
    pub s: usize,
    /// Zero padding applied before the first voxel, per axis.
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn for_input(xd: [usize; 3], k: [usize; 3], s: usize) -> ConvGeom {
        assert!(s >= 1, "stride must be positive");
        let mut yd = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            yd[a] = (xd[a] + s - 1) / s;
            let span = (yd[a] - 1) * s + k[a];
            pad[a] = span.saturating_sub(xd[a]) / 2;
        }
        ConvGeom { xd, yd, k, s, pad }
    }

    pub fn xn(&self) -> usize {
        self.xd[0] * self.xd[1] * self.xd[2]
    }

    pub fn yn(&self) -> usize {
        self.yd[0] * self.yd[1] * self.yd[2]
    }

    pub fn kn(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
}

/// [c, n] -> [n, c] transpose, blocked so both sides stay cache-resident.
fn to_channels_last(x: &[f32], c: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), c * n);
    let mut out = vec![0.0f32; n * c];
    const B: usize = 64;
    let mut v0 = 0;
    while v0 < n {
        let vb = (n - v0).min(B);
        for ch in 0..c {
            let src = &x[ch * n + v0..ch * n + v0 + vb];
            for (j, &val) in src.iter().enumerate() {
                out[(v0 + j) * c + ch] = val;
            }
        }
        v0 += B;
    }
    out
}

/// [n, c] -> [c, n] transpose (inverse of `to_channels_last`).
fn from_channels_last(xp: &[f32], c: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(xp.len(), c * n);
    let mut out = vec![0.0f32; c * n];
    const B: usize = 64;
    let mut v0 = 0;
    while v0 < n {
        let vb = (n - v0).min(B);
        for ch in 0..c {
            let dst = &mut out[ch * n + v0..ch * n + v0 + vb];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = xp[(v0 + j) * c + ch];
            }
        }
        v0 += B;
    }
    out
}

/// A convolution kernel in the layouts the compute loops want, built once per
/// tensor and cached across forward/backward calls within a training phase.
#[derive(Clone, Debug)]
pub struct PackedConvKernel {
    pub ci: usize,
    pub co: usize,
    pub k: [usize; 3],
    /// Natural layout [co, ci, k^3], as stored in parameters.
    pub natural: Vec<f32>,
    /// [tap][ci][co]: contiguous output-channel runs (forward loops).
    pub kp: Vec<f32>,
    /// [tap][co][ci]: contiguous input-channel runs (adjoint loops).
    pub kq: Vec<f32>,
}

/// Builds both repacked layouts with o/i-chunked blocked transposes so the
/// multi-megabyte discriminator kernels repack in streaming passes.
pub fn pack_conv_kernel(kern: &[f32], ci: usize, co: usize, k: [usize; 3]) -> PackedConvKernel {
    let kn = k[0] * k[1] * k[2];
    debug_assert_eq!(kern.len(), co * ci * kn);
    const B: usize = 16;
    let mut kp = vec![0.0f32; kn * ci * co];
    let mut ob = 0;
    while ob < co {
        let oe = (ob + B).min(co);
        for i in 0..ci {
            for t in 0..kn {
                for o in ob..oe {
                    kp[(t * ci + i) * co + o] = kern[(o * ci + i) * kn + t];
                }
            }
        }
        ob += B;
    }
    let mut kq = vec![0.0f32; kn * co * ci];
    let mut ib = 0;
    while ib < ci {
        let ie = (ib + B).min(ci);
        for o in 0..co {
            for t in 0..kn {
                for i in ib..ie {
                    kq[(t * co + o) * ci + i] = kern[(o * ci + i) * kn + t];
                }
            }
        }
        ib += B;
    }
    PackedConvKernel { ci, co, k, natural: kern.to_vec(), kp, kq }
}

/// Forward cross-correlation: x [ci, xd], kern [co, ci, k^3] -> [co, yd].
pub fn conv3d_raw(x: &[f32], ci: usize, co: usize, g: &ConvGeom, kern: &[f32]) -> Vec<f32> {
    conv3d_packed(x, g, &pack_conv_kernel(kern, ci, co, g.k))
}

/// Forward cross-correlation over a prepacked kernel.
pub fn conv3d_packed(x: &[f32], g: &ConvGeom, pk: &PackedConvKernel) -> Vec<f32> {
    let (ci, co) = (pk.ci, pk.co);
    let (xn, yn) = (g.xn(), g.yn());
    debug_assert_eq!(x.len(), ci * xn);
    debug_assert_eq!(pk.k, g.k);
    let xp = to_channels_last(x, ci, xn);
    let kp = &pk.kp;
    let (h, w) = (g.xd[1], g.xd[2]);
    let mut outp = vec![0.0f32; yn * co];
    let mut acc = vec![0.0f64; co];
    for zo in 0..g.yd[0] {
        for yo in 0..g.yd[1] {
            for xo in 0..g.yd[2] {
                let accs = &mut acc[..co];
                accs.iter_mut().for_each(|a| *a = 0.0);
                for kz in 0..g.k[0] {
                    let zi = (zo * g.s + kz) as isize - g.pad[0] as isize;
                    if zi < 0 || zi >= g.xd[0] as isize {
                        continue;
                    }
                    for ky in 0..g.k[1] {
                        let yi = (yo * g.s + ky) as isize - g.pad[1] as isize;
                        if yi < 0 || yi >= g.xd[1] as isize {
                            continue;
                        }
                        for kx in 0..g.k[2] {
                            let xi = (xo * g.s + kx) as isize - g.pad[2] as isize;
                            if xi < 0 || xi >= g.xd[2] as isize {
                                continue;
                            }
                            let voff =
                                ((zi as usize * h + yi as usize) * w + xi as usize) * ci;
                            let xv = &xp[voff..voff + ci];
                            let tap = (kz * g.k[1] + ky) * g.k[2] + kx;
                            let kr = &kp[tap * ci * co..(tap + 1) * ci * co];
                            for i in 0..ci {
                                let v = xv[i] as f64;
                                let kro = &kr[i * co..(i + 1) * co];
                                for (a, &kv) in accs.iter_mut().zip(kro) {
                                    *a += v * kv as f64;
                                }
                            }
                        }
                    }
                }
                let obase = ((zo * g.yd[1] + yo) * g.yd[2] + xo) * co;
                for (dst, &a) in outp[obase..obase + co].iter_mut().zip(acc.iter()) {
                    *dst = a as f32;
                }
            }
        }
    }
    from_channels_last(&outp, co, yn)
}

/// Exact adjoint of `conv3d_raw`: gy [co, yd] -> [ci, xd] (shared kernel).
///
/// This is both the input-gradient of the forward convolution and the forward
/// pass of transposed convolution (with `xd = s * input extents`).
pub fn conv3d_adjoint_raw(gy: &[f32], ci: usize, co: usize, g: &ConvGeom, kern: &[f32]) -> Vec<f32> {
    conv3d_adjoint_packed(gy, g, &pack_conv_kernel(kern, ci, co, g.k))
}

/// Adjoint over a prepacked kernel. Few-channel stride-2 outputs (the flow
/// head) go through a contiguous row-AXPY path; the general path runs the
/// same channels-last scheme as the forward.
pub fn conv3d_adjoint_packed(gy: &[f32], g: &ConvGeom, pk: &PackedConvKernel) -> Vec<f32> {
    if g.s == 2 && pk.ci <= 8 {
        return conv3d_adjoint_axpy_s2(gy, g, pk);
    }
    let (ci, co) = (pk.ci, pk.co);
    let (xn, yn) = (g.xn(), g.yn());
    debug_assert_eq!(gy.len(), co * yn);
    let gyp = to_channels_last(gy, co, yn);
    let kq = &pk.kq;
    let mut gxp = vec![0.0f32; xn * ci];
    let mut acc = vec![0.0f64; ci];
    let s = g.s as isize;
    for zm in 0..g.xd[0] {
        for ym in 0..g.xd[1] {
            for xm in 0..g.xd[2] {
                let accs = &mut acc[..ci];
                accs.iter_mut().for_each(|a| *a = 0.0);
                // Output positions p with p*s + q - pad == m, per axis.
                for qz in 0..g.k[0] {
                    let tz = zm as isize + g.pad[0] as isize - qz as isize;
                    if tz < 0 || tz % s != 0 {
                        continue;
                    }
                    let pz = (tz / s) as usize;
                    if pz >= g.yd[0] {
                        continue;
                    }
                    for qy in 0..g.k[1] {
                        let ty = ym as isize + g.pad[1] as isize - qy as isize;
                        if ty < 0 || ty % s != 0 {
                            continue;
                        }
                        let py = (ty / s) as usize;
                        if py >= g.yd[1] {
                            continue;
                        }
                        for qx in 0..g.k[2] {
                            let tx = xm as isize + g.pad[2] as isize - qx as isize;
                            if tx < 0 || tx % s != 0 {
                                continue;
                            }
                            let px = (tx / s) as usize;
                            if px >= g.yd[2] {
                                continue;
                            }
                            let poff = ((pz * g.yd[1] + py) * g.yd[2] + px) * co;
                            let grow = &gyp[poff..poff + co];
                            let tap = (qz * g.k[1] + qy) * g.k[2] + qx;
                            let kr = &kq[tap * co * ci..(tap + 1) * co * ci];
                            for o in 0..co {
                                let v = grow[o] as f64;
                                let kro = &kr[o * ci..(o + 1) * ci];
                                for (a, &kv) in accs.iter_mut().zip(kro) {
                                    *a += v * kv as f64;
                                }
                            }
                        }
                    }
                }
                let mbase = ((zm * g.xd[1] + ym) * g.xd[2] + xm) * ci;
                for (dst, &a) in gxp[mbase..mbase + ci].iter_mut().zip(acc.iter()) {
                    *dst = a as f32;
                }
            }
        }
    }
    from_channels_last(&gxp, ci, xn)
}

/// Stride-2 adjoint for small `ci`: accumulates whole output rows with
/// even/odd parity scratch so the inner loop is a contiguous AXPY over the
/// gy row instead of a `ci`-wide dot product.
fn conv3d_adjoint_axpy_s2(gy: &[f32], g: &ConvGeom, pk: &PackedConvKernel) -> Vec<f32> {
    let (ci, co) = (pk.ci, pk.co);
    let (yn, kn) = (g.yn(), g.kn());
    debug_assert_eq!(gy.len(), co * yn);
    let kern = &pk.natural;
    let w = g.xd[2];
    let ydw = g.yd[2];
    let mut out = vec![0.0f32; ci * g.xn()];
    // Parity scratch: scratch[i][parity][px] holds out[i, zm, ym, 2*px + parity].
    let half = (w + 1) / 2;
    let mut scratch = vec![0.0f64; ci * 2 * half];
    // Per-qx geometry is row-independent: xm = 2*(px + off) + parity, with px
    // limited so xm stays inside the row.
    let qx_info: Vec<(usize, isize, usize, usize)> = (0..g.k[2])
        .map(|qx| {
            let xm0 = qx as isize - g.pad[2] as isize;
            let parity = xm0.rem_euclid(2) as usize;
            let off = (xm0 - parity as isize) / 2;
            let px_lo = (-off).max(0) as usize;
            let j_hi = (w - parity + 1) / 2;
            let px_hi = (j_hi as isize - off).clamp(0, ydw as isize) as usize;
            (parity, off, px_lo, px_hi)
        })
        .collect();
    for zm in 0..g.xd[0] {
        for ym in 0..g.xd[1] {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            for qz in 0..g.k[0] {
                let tz = zm as isize + g.pad[0] as isize - qz as isize;
                if tz < 0 || tz % 2 != 0 {
                    continue;
                }
                let pz = (tz / 2) as usize;
                if pz >= g.yd[0] {
                    continue;
                }
                for qy in 0..g.k[1] {
                    let ty = ym as isize + g.pad[1] as isize - qy as isize;
                    if ty < 0 || ty % 2 != 0 {
                        continue;
                    }
                    let py = (ty / 2) as usize;
                    if py >= g.yd[1] {
                        continue;
                    }
                    let trow = (qz * g.k[1] + qy) * g.k[2];
                    for o in 0..co {
                        let gbase = ((o * g.yd[0] + pz) * g.yd[1] + py) * ydw;
                        let grow = &gy[gbase..gbase + ydw];
                        for i in 0..ci {
                            let krow = &kern[(o * ci + i) * kn + trow..][..g.k[2]];
                            for (qx, &(parity, off, px_lo, px_hi)) in
                                qx_info.iter().enumerate()
                            {
                                if px_lo >= px_hi {
                                    continue;
                                }
                                let kv = krow[qx] as f64;
                                let j0 = (px_lo as isize + off) as usize;
                                let dst_base = (i * 2 + parity) * half + j0;
                                let dst = &mut scratch
                                    [dst_base..dst_base + (px_hi - px_lo)];
                                let src = &grow[px_lo..px_hi];
                                for (a, &v) in dst.iter_mut().zip(src) {
                                    *a += kv * v as f64;
                                }
                            }
                        }
                    }
                }
            }
            for i in 0..ci {
                let obase = ((i * g.xd[0] + zm) * g.xd[1] + ym) * w;
                for xm in 0..w {
                    out[obase + xm] = scratch[(i * 2 + (xm & 1)) * half + xm / 2] as f32;
                }
            }
        }
    }
    out
}

/// Kernel gradient of the forward convolution:
/// dK[o,i,q] = sum_p gy[o,p] * x[i, s*p + q - pad], shapes [co, ci, k^3].
pub fn conv3d_kernel_grad_raw(
    x: &[f32],
    gy: &[f32],
    ci: usize,
    co: usize,
    g: &ConvGeom,
) -> Vec<f32> {
    let (xn, yn, kn) = (g.xn(), g.yn(), g.kn());
    debug_assert_eq!(x.len(), ci * xn);
    debug_assert_eq!(gy.len(), co * yn);
    let xp = to_channels_last(x, ci, xn);
    let gyp = to_channels_last(gy, co, yn);
    let (h, w) = (g.xd[1], g.xd[2]);
    // Accumulated per tap into a [i][tap][o] staging buffer, then transposed
    // one i-slab (kn*co floats, L2-resident) at a time into [o][i][tap].
    let mut ito = vec![0.0f32; ci * kn * co];
    // One f64 accumulator panel per tap keeps the working set bounded by
    // ci*co regardless of volume size. Output coordinates with the tap's
    // input sample in range are [lo, hi) per axis; empty taps skip entirely.
    let valid_range = |kq: usize, pad: usize, xd: usize, yd: usize| -> (usize, usize) {
        // 0 <= q*s + k - pad < xd
        let lo = if pad > kq { (pad - kq + g.s - 1) / g.s } else { 0 };
        let hi_excl = (xd + pad - kq + g.s - 1) / g.s;
        (lo.min(yd), hi_excl.min(yd))
    };
    let mut acc = vec![0.0f64; ci * co];
    for kz in 0..g.k[0] {
        let (zlo, zhi) = valid_range(kz, g.pad[0], g.xd[0], g.yd[0]);
        for ky in 0..g.k[1] {
            let (ylo, yhi) = valid_range(ky, g.pad[1], g.xd[1], g.yd[1]);
            for kx in 0..g.k[2] {
                let (xlo, xhi) = valid_range(kx, g.pad[2], g.xd[2], g.yd[2]);
                let tap = (kz * g.k[1] + ky) * g.k[2] + kx;
                if zlo >= zhi || ylo >= yhi || xlo >= xhi {
                    continue; // staging buffer is pre-zeroed
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for zo in zlo..zhi {
                    let zi = zo * g.s + kz - g.pad[0];
                    for yo in ylo..yhi {
                        let yi = yo * g.s + ky - g.pad[1];
                        for xo in xlo..xhi {
                            let xi = xo * g.s + kx - g.pad[2];
                            let voff = ((zi * h + yi) * w + xi) * ci;
                            let xv = &xp[voff..voff + ci];
                            let pbase = ((zo * g.yd[1] + yo) * g.yd[2] + xo) * co;
                            let grow = &gyp[pbase..pbase + co];
                            for i in 0..ci {
                                let v = xv[i] as f64;
                                let ac = &mut acc[i * co..(i + 1) * co];
                                for (a, &gv) in ac.iter_mut().zip(grow) {
                                    *a += v * gv as f64;
                                }
                            }
                        }
                    }
                }
                for i in 0..ci {
                    let dst = &mut ito[(i * kn + tap) * co..(i * kn + tap + 1) * co];
                    for (d, &a) in dst.iter_mut().zip(&acc[i * co..(i + 1) * co]) {
                        *d = a as f32;
                    }
                }
            }
        }
    }
    let mut dk = vec![0.0f32; co * ci * kn];
    for i in 0..ci {
        let slab = &ito[i * kn * co..(i + 1) * kn * co];
        for o in 0..co {
            let dst = &mut dk[(o * ci + i) * kn..(o * ci + i + 1) * kn];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = slab[t * co + o];
            }
        }
    }
    dk
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Splits a sample coordinate into a base index and fraction for linear
/// interpolation. Coordinates are clamped to the volume; at the far face the
/// base drops to `len-2` with fraction 1 so the stencil stays in bounds.
#[inline]
fn lin_coords(t: f32, len: usize) -> (usize, f32) {
    if len == 1 {
        return (0, 0.0);
    }
    let t = t.clamp(0.0, (len - 1) as f32);
    let i = (t.floor() as usize).min(len - 2);
    (i, t - i as f32)
}

/// Samples `img` at voxel + displacement: out(x) = img(x + u(x)), clamp-to-edge.
/// `img` is [c, d] and `field` is [3, d] with channels (u_x, u_y, u_z), voxel units.
pub fn warp_raw(img: &[f32], c: usize, d: [usize; 3], field: &[f32], interp: Interp) -> Vec<f32> {
    let n = d[0] * d[1] * d[2];
    debug_assert_eq!(img.len(), c * n);
    debug_assert_eq!(field.len(), 3 * n);
    let (ux, uy, uz) = (&field[..n], &field[n..2 * n], &field[2 * n..]);
    let mut out = vec![0.0f32; c * n];
    let mut v = 0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let tx = x as f32 + ux[v];
                let ty = y as f32 + uy[v];
                let tz = z as f32 + uz[v];
                match interp {
                    Interp::Nearest => {
                        let iz = tz.clamp(0.0, (d[0] - 1) as f32).round() as usize;
                        let iy = ty.clamp(0.0, (d[1] - 1) as f32).round() as usize;
                        let ix = tx.clamp(0.0, (d[2] - 1) as f32).round() as usize;
                        let src = (iz * d[1] + iy) * d[2] + ix;
                        for ch in 0..c {
                            out[ch * n + v] = img[ch * n + src];
                        }
                    }
                    Interp::Trilinear => {
                        let (iz, fz) = lin_coords(tz, d[0]);
                        let (iy, fy) = lin_coords(ty, d[1]);
                        let (ix, fx) = lin_coords(tx, d[2]);
                        let z1 = (iz + 1).min(d[0] - 1);
                        let y1 = (iy + 1).min(d[1] - 1);
                        let x1 = (ix + 1).min(d[2] - 1);
                        let c000 = (iz * d[1] + iy) * d[2] + ix;
                        let c001 = (iz * d[1] + iy) * d[2] + x1;
                        let c010 = (iz * d[1] + y1) * d[2] + ix;
                        let c011 = (iz * d[1] + y1) * d[2] + x1;
                        let c100 = (z1 * d[1] + iy) * d[2] + ix;
                        let c101 = (z1 * d[1] + iy) * d[2] + x1;
                        let c110 = (z1 * d[1] + y1) * d[2] + ix;
                        let c111 = (z1 * d[1] + y1) * d[2] + x1;
                        let (gx, gy2, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
                        for ch in 0..c {
                            let b = ch * n;
                            let s = (img[b + c000] as f64 * (gx * gy2) as f64
                                + img[b + c001] as f64 * (fx * gy2) as f64
                                + img[b + c010] as f64 * (gx * fy) as f64
                                + img[b + c011] as f64 * (fx * fy) as f64)
                                * gz as f64
                                + (img[b + c100] as f64 * (gx * gy2) as f64
                                    + img[b + c101] as f64 * (fx * gy2) as f64
                                    + img[b + c110] as f64 * (gx * fy) as f64
                                    + img[b + c111] as f64 * (fx * fy) as f64)
                                    * fz as f64;
                            out[b + v] = s as f32;
                        }
                    }
                }
                v += 1;
            }
        }
    }
    out
}

/// Gradient of trilinear `warp_raw` w.r.t. the image: scatters each output
/// cotangent back onto its eight stencil corners.
pub fn warp_grad_image_raw(gy: &[f32], c: usize, d: [usize; 3], field: &[f32]) -> Vec<f32> {
    let n = d[0] * d[1] * d[2];
    debug_assert_eq!(gy.len(), c * n);
    debug_assert_eq!(field.len(), 3 * n);
    let (ux, uy, uz) = (&field[..n], &field[n..2 * n], &field[2 * n..]);
    let mut acc = vec![0.0f64; c * n];
    let mut v = 0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let (iz, fz) = lin_coords(z as f32 + uz[v], d[0]);
                let (iy, fy) = lin_coords(y as f32 + uy[v], d[1]);
                let (ix, fx) = lin_coords(x as f32 + ux[v], d[2]);
                let z1 = (iz + 1).min(d[0] - 1);
                let y1 = (iy + 1).min(d[1] - 1);
                let x1 = (ix + 1).min(d[2] - 1);
                let corners = [
                    ((iz * d[1] + iy) * d[2] + ix, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
                    ((iz * d[1] + iy) * d[2] + x1, fx * (1.0 - fy) * (1.0 - fz)),
                    ((iz * d[1] + y1) * d[2] + ix, (1.0 - fx) * fy * (1.0 - fz)),
                    ((iz * d[1] + y1) * d[2] + x1, fx * fy * (1.0 - fz)),
                    ((z1 * d[1] + iy) * d[2] + ix, (1.0 - fx) * (1.0 - fy) * fz),
                    ((z1 * d[1] + iy) * d[2] + x1, fx * (1.0 - fy) * fz),
                    ((z1 * d[1] + y1) * d[2] + ix, (1.0 - fx) * fy * fz),
                    ((z1 * d[1] + y1) * d[2] + x1, fx * fy * fz),
                ];
                for ch in 0..c {
                    let gv = gy[ch * n + v] as f64;
                    for &(idx, wgt) in &corners {
                        acc[ch * n + idx] += gv * wgt as f64;
                    }
                }
                v += 1;
            }
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

/// Gradient of trilinear `warp_raw` w.r.t. the displacement field.
/// Clamped sample coordinates contribute zero (the warp is constant there).
pub fn warp_grad_field_raw(gy: &[f32], img: &[f32], c: usize, d: [usize; 3], field: &[f32]) -> Vec<f32> {
    let n = d[0] * d[1] * d[2];
    debug_assert_eq!(gy.len(), c * n);
    debug_assert_eq!(img.len(), c * n);
    debug_assert_eq!(field.len(), 3 * n);
    let (ux, uy, uz) = (&field[..n], &field[n..2 * n], &field[2 * n..]);
    let mut out = vec![0.0f32; 3 * n];
    let mut v = 0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let (tx, ty, tz) = (x as f32 + ux[v], y as f32 + uy[v], z as f32 + uz[v]);
                let (iz, fz) = lin_coords(tz, d[0]);
                let (iy, fy) = lin_coords(ty, d[1]);
                let (ix, fx) = lin_coords(tx, d[2]);
                let z1 = (iz + 1).min(d[0] - 1);
                let y1 = (iy + 1).min(d[1] - 1);
                let x1 = (ix + 1).min(d[2] - 1);
                let on_x = tx >= 0.0 && tx <= (d[2] - 1) as f32 && d[2] > 1;
                let on_y = ty >= 0.0 && ty <= (d[1] - 1) as f32 && d[1] > 1;
                let on_z = tz >= 0.0 && tz <= (d[0] - 1) as f32 && d[0] > 1;
                let (mut gx_acc, mut gy_acc, mut gz_acc) = (0.0f64, 0.0f64, 0.0f64);
                for ch in 0..c {
                    let b = ch * n;
                    let v000 = img[b + (iz * d[1] + iy) * d[2] + ix] as f64;
                    let v001 = img[b + (iz * d[1] + iy) * d[2] + x1] as f64;
                    let v010 = img[b + (iz * d[1] + y1) * d[2] + ix] as f64;
                    let v011 = img[b + (iz * d[1] + y1) * d[2] + x1] as f64;
                    let v100 = img[b + (z1 * d[1] + iy) * d[2] + ix] as f64;
                    let v101 = img[b + (z1 * d[1] + iy) * d[2] + x1] as f64;
                    let v110 = img[b + (z1 * d[1] + y1) * d[2] + ix] as f64;
                    let v111 = img[b + (z1 * d[1] + y1) * d[2] + x1] as f64;
                    let (fx, fy, fz) = (fx as f64, fy as f64, fz as f64);
                    let g = gy[b + v] as f64;
                    // d/dfx: difference along x of the bilinear sums in (y, z).
                    gx_acc += g
                        * ((v001 - v000) * (1.0 - fy) * (1.0 - fz)
                            + (v011 - v010) * fy * (1.0 - fz)
                            + (v101 - v100) * (1.0 - fy) * fz
                            + (v111 - v110) * fy * fz);
                    gy_acc += g
                        * ((v010 - v000) * (1.0 - fx) * (1.0 - fz)
                            + (v011 - v001) * fx * (1.0 - fz)
                            + (v110 - v100) * (1.0 - fx) * fz
                            + (v111 - v101) * fx * fz);
                    gz_acc += g
                        * ((v100 - v000) * (1.0 - fx) * (1.0 - fy)
                            + (v101 - v001) * fx * (1.0 - fy)
                            + (v110 - v010) * (1.0 - fx) * fy
                            + (v111 - v011) * fx * fy);
                }
                out[v] = if on_x { gx_acc as f32 } else { 0.0 };
                out[n + v] = if on_y { gy_acc as f32 } else { 0.0 };
                out[2 * n + v] = if on_z { gz_acc as f32 } else { 0.0 };
                v += 1;
            }
        }
    }
    out
}

/// Per-axis source coordinate for align-corners trilinear resizing.
#[inline]
fn resize_coord(o: usize, out_len: usize, in_len: usize) -> f32 {
    if out_len == 1 {
        (in_len - 1) as f32 / 2.0
    } else {
        o as f32 * (in_len - 1) as f32 / (out_len - 1) as f32
    }
}

/// Trilinear resampling of [c, in_d] onto the grid [c, out_d] (align corners).
pub fn resize_trilinear_raw(img: &[f32], c: usize, in_d: [usize; 3], out_d: [usize; 3]) -> Vec<f32> {
    let nin = in_d[0] * in_d[1] * in_d[2];
    let nout = out_d[0] * out_d[1] * out_d[2];
    debug_assert_eq!(img.len(), c * nin);
    let mut out = vec![0.0f32; c * nout];
    let mut v = 0;
    for z in 0..out_d[0] {
        let (iz, fz) = lin_coords(resize_coord(z, out_d[0], in_d[0]), in_d[0]);
        for y in 0..out_d[1] {
            let (iy, fy) = lin_coords(resize_coord(y, out_d[1], in_d[1]), in_d[1]);
            for x in 0..out_d[2] {
                let (ix, fx) = lin_coords(resize_coord(x, out_d[2], in_d[2]), in_d[2]);
                let z1 = (iz + 1).min(in_d[0] - 1);
                let y1 = (iy + 1).min(in_d[1] - 1);
                let x1 = (ix + 1).min(in_d[2] - 1);
                for ch in 0..c {
                    let b = ch * nin;
                    let at = |zz: usize, yy: usize, xx: usize| {
                        img[b + (zz * in_d[1] + yy) * in_d[2] + xx] as f64
                    };
                    let s = ((at(iz, iy, ix) * (1.0 - fx as f64)
                        + at(iz, iy, x1) * fx as f64)
                        * (1.0 - fy as f64)
                        + (at(iz, y1, ix) * (1.0 - fx as f64) + at(iz, y1, x1) * fx as f64)
                            * fy as f64)
                        * (1.0 - fz as f64)
                        + ((at(z1, iy, ix) * (1.0 - fx as f64) + at(z1, iy, x1) * fx as f64)
                            * (1.0 - fy as f64)
                            + (at(z1, y1, ix) * (1.0 - fx as f64)
                                + at(z1, y1, x1) * fx as f64)
                                * fy as f64)
                            * fz as f64;
                    out[ch * nout + v] = s as f32;
                }
                v += 1;
            }
        }
    }
    out
}

/// Exact adjoint of `resize_trilinear_raw`: gy [c, out_d] -> [c, in_d].
pub fn resize_adjoint_raw(gy: &[f32], c: usize, in_d: [usize; 3], out_d: [usize; 3]) -> Vec<f32> {
    let nin = in_d[0] * in_d[1] * in_d[2];
    let nout = out_d[0] * out_d[1] * out_d[2];
    debug_assert_eq!(gy.len(), c * nout);
    let mut acc = vec![0.0f64; c * nin];
    let mut v = 0;
    for z in 0..out_d[0] {
        let (iz, fz) = lin_coords(resize_coord(z, out_d[0], in_d[0]), in_d[0]);
        for y in 0..out_d[1] {
            let (iy, fy) = lin_coords(resize_coord(y, out_d[1], in_d[1]), in_d[1]);
            for x in 0..out_d[2] {
                let (ix, fx) = lin_coords(resize_coord(x, out_d[2], in_d[2]), in_d[2]);
                let z1 = (iz + 1).min(in_d[0] - 1);
                let y1 = (iy + 1).min(in_d[1] - 1);
                let x1 = (ix + 1).min(in_d[2] - 1);
                let corners = [
                    ((iz * in_d[1] + iy) * in_d[2] + ix, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
                    ((iz * in_d[1] + iy) * in_d[2] + x1, fx * (1.0 - fy) * (1.0 - fz)),
                    ((iz * in_d[1] + y1) * in_d[2] + ix, (1.0 - fx) * fy * (1.0 - fz)),
                    ((iz * in_d[1] + y1) * in_d[2] + x1, fx * fy * (1.0 - fz)),
                    ((z1 * in_d[1] + iy) * in_d[2] + ix, (1.0 - fx) * (1.0 - fy) * fz),
                    ((z1 * in_d[1] + iy) * in_d[2] + x1, fx * (1.0 - fy) * fz),
                    ((z1 * in_d[1] + y1) * in_d[2] + ix, (1.0 - fx) * fy * fz),
                    ((z1 * in_d[1] + y1) * in_d[2] + x1, fx * fy * fz),
                ];
                for ch in 0..c {
                    let gv = gy[ch * nout + v] as f64;
                    for &(idx, wgt) in &corners {
                        acc[ch * nin + idx] += gv * wgt as f64;
                    }
                }
                v += 1;
            }
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}
