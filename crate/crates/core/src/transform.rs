//! The warping layer and deformation-field algebra: composition, numerical
//! inversion, magnitude, and the motion-based distance map.
//!
//! Conventions, fixed per build (see [`WarpConfig`]): backward warping
//! `out(p) = I(p + φ(p))` with `p` in voxel indices, trilinear interpolation,
//! and clamp-to-edge boundary handling. Field components are displacements in
//! voxel units; physical spacing enters only metric evaluation.
//!
//! The differentiable warp lives on the graph as [`crate::autodiff::Graph::warp`];
//! the functions here are the plain (non-graph) counterparts sharing the same
//! kernel.

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::volume::{DeformationField, Dims, VolumeGrid};

/// The warp layer's fixed conventions, as documented constants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WarpConfig;

impl WarpConfig {
    /// Out-of-range samples are clamped to the volume edge.
    pub const BOUNDARY: &'static str = "clamp-to-edge";
    /// Trilinear interpolation (the 3D analogue of bilinear).
    pub const INTERPOLATION: &'static str = "trilinear";
    /// Backward warping: `out(p) = I(p + phi(p))`, `p` in voxel indices.
    pub const COORDINATES: &'static str = "backward, voxel units";
}

fn check_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Trilinear backward warp of a scalar volume.
pub fn warp_volume(image: &VolumeGrid, field: &DeformationField) -> Result<VolumeGrid> {
    check_dims(image.dims, field.dims, "warp image/field extents")?;
    let mut out = vec![0.0f32; image.dims.voxel_count()];
    kernels::warp_forward(image.data(), 1, image.dims, field.data(), &mut out);
    image.with_data(out)
}

/// Warp each of the three components of `inner` by `by`, exactly as
/// [`warp_volume`] treats a scalar channel.
pub fn warp_field(inner: &DeformationField, by: &DeformationField) -> Result<DeformationField> {
    check_dims(inner.dims, by.dims, "warp_field extents")?;
    let mut out = vec![0.0f32; 3 * inner.dims.voxel_count()];
    kernels::warp_forward(inner.data(), 3, inner.dims, by.data(), &mut out);
    DeformationField::new(inner.dims, inner.spacing, out)
}

/// Field composition: `compose(first, then)(p) = first(p) + then(p + first(p))`,
/// so warping by the result equals warping by `then` and then by `first`:
/// `warp(I, compose(first, then)) ≈ warp(warp(I, then), first)`.
///
/// To chain a displacement A→B with B→C into A→C, pass
/// `compose(field_bc, field_ab)`.
pub fn compose(first: &DeformationField, then: &DeformationField) -> Result<DeformationField> {
    let warped = warp_field(then, first)?;
    let data: Vec<f32> = first
        .data()
        .iter()
        .zip(warped.data())
        .map(|(&a, &b)| a + b)
        .collect();
    DeformationField::new(first.dims, first.spacing, data)
}

/// Chain chronologically ordered legs `[φ_{a→b}, φ_{b→c}, ...]` into one
/// field `φ_{a→z}`: each later leg wraps the accumulated earlier chain.
pub fn chain_fields(legs: &[DeformationField]) -> Result<DeformationField> {
    let mut iter = legs.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Invalid("cannot chain zero legs".into()))?;
    let mut acc = first.clone();
    for leg in iter {
        acc = compose(leg, &acc)?;
    }
    Ok(acc)
}

/// Mean Euclidean displacement magnitude, in voxels.
pub fn mean_magnitude(f: &DeformationField) -> f64 {
    let n = f.dims.voxel_count();
    let d = f.data();
    let mut acc = 0.0f64;
    for i in 0..n {
        let x = d[i] as f64;
        let y = d[n + i] as f64;
        let z = d[2 * n + i] as f64;
        acc += (x * x + y * y + z * z).sqrt();
    }
    acc / n as f64
}

/// Result of [`invert_field`]: the inverse displacement, the final residual
/// (mean |compose(f, inverse)| in voxels) and the residual after every
/// iteration.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub field: DeformationField,
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Default iteration count for [`invert_field`]; sufficient for smooth fields
/// with displacements up to about 5 voxels.
pub const INVERT_DEFAULT_ITERATIONS: usize = 10;

/// Fixed-point inversion `g ← −f(p + g(p))`. Converges for smooth fields whose
/// displacement magnitudes are well below half the volume extent. Errors if
/// the composition residual grows instead of shrinking.
pub fn invert_field(f: &DeformationField, iterations: usize) -> Result<InversionResult> {
    let mut g = DeformationField::zeros(f.dims, f.spacing);
    let mut trace = Vec::with_capacity(iterations);
    let mut prev = f64::INFINITY;
    for it in 0..iterations {
        let sampled = warp_field(f, &g)?;
        let data: Vec<f32> = sampled.data().iter().map(|&v| -v).collect();
        g = DeformationField::new(f.dims, f.spacing, data)?;
        let residual = mean_magnitude(&compose(f, &g)?);
        trace.push(residual);
        if residual > prev * 1.2 + 1e-9 && residual > 1e-6 {
            return Err(Error::InversionDiverged {
                iterations: it + 1,
                trace,
            });
        }
        prev = residual;
    }
    Ok(InversionResult {
        field: g,
        residual: prev,
        trace,
    })
}

/// Inverse-consistency residual of a forward/backward field pair, in voxels:
/// the average over both orderings of `mean|warp_field(a, a) + b|`. The plain
/// counterpart of the differentiable consistency term.
pub fn consistency_residual(fwd: &DeformationField, bwd: &DeformationField) -> Result<f64> {
    let one_way = |a: &DeformationField, b: &DeformationField| -> Result<f64> {
        let w = warp_field(a, a)?;
        let mut acc = 0.0f64;
        for (x, y) in w.data().iter().zip(b.data()) {
            acc += (x + y).abs() as f64;
        }
        Ok(acc / w.data().len() as f64)
    };
    Ok(0.5 * (one_way(fwd, bwd)? + one_way(bwd, fwd)?))
}

/// Per-voxel Euclidean norm of the displacement vectors.
pub fn field_magnitude(f: &DeformationField) -> VolumeGrid {
    let n = f.dims.voxel_count();
    let d = f.data();
    let mut out = vec![0.0f32; n];
    for (i, o) in out.iter_mut().enumerate() {
        let x = d[i];
        let y = d[n + i];
        let z = d[2 * n + i];
        *o = (x * x + y * y + z * z).sqrt();
    }
    VolumeGrid::new(f.dims, f.spacing, out).expect("finite magnitudes")
}

/// Default magnitude quantile for [`motion_distance_map`].
pub const DISTANCE_MAP_DEFAULT_QUANTILE: f64 = 0.9;

/// Distance map highlighting the moving region: voxels whose displacement
/// magnitude reaches the given quantile form the motion region, and every
/// voxel gets its exact Euclidean distance (in voxels) to that region,
/// normalized to [0, 1] by the volume diagonal. An empty region yields all
/// zeros; so does a zero field, whose quantile threshold of zero makes every
/// voxel part of the region.
pub fn motion_distance_map(f: &DeformationField, threshold_quantile: f64) -> Result<VolumeGrid> {
    if !(0.0 < threshold_quantile && threshold_quantile < 1.0) {
        return Err(Error::Invalid(format!(
            "threshold_quantile must be in (0, 1), got {threshold_quantile}"
        )));
    }
    let mags = field_magnitude(f);
    let mut sorted: Vec<f32> = mags.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let q = crate::volume::nearest_rank_quantile(&sorted, threshold_quantile);
    let region: Vec<bool> = mags.data().iter().map(|&m| m >= q).collect();
    if region.iter().all(|&r| !r) {
        return Ok(VolumeGrid::zeros(f.dims, f.spacing));
    }
    let dist2 = euclidean_distance_sq(&region, f.dims);
    let inv_diag = 1.0 / f.dims.diagonal();
    let data: Vec<f32> = dist2
        .iter()
        .map(|&d2| (d2.sqrt() * inv_diag) as f32)
        .collect();
    VolumeGrid::new(f.dims, f.spacing, data)
}

/// Stand-in for infinity in the distance transform; large enough to dominate
/// any squared grid distance yet safely finite.
const DT_BIG: f64 = 1e20;

/// Exact squared Euclidean distance to the `true` voxels of `region`, by
/// three separable lower-envelope passes.
pub fn euclidean_distance_sq(region: &[bool], d: Dims) -> Vec<f64> {
    assert_eq!(region.len(), d.voxel_count());
    let mut dist: Vec<f64> = region
        .iter()
        .map(|&r| if r { 0.0 } else { DT_BIG })
        .collect();

    let max_ext = d.nx.max(d.ny).max(d.nz);
    let mut scratch = DtScratch::new(max_ext);

    // x pass
    for z in 0..d.nz {
        for y in 0..d.ny {
            let start = (z * d.ny + y) * d.nx;
            scratch.transform_line(&mut dist, start, 1, d.nx);
        }
    }
    // y pass
    for z in 0..d.nz {
        for x in 0..d.nx {
            let start = z * d.ny * d.nx + x;
            scratch.transform_line(&mut dist, start, d.nx, d.ny);
        }
    }
    // z pass
    for y in 0..d.ny {
        for x in 0..d.nx {
            let start = y * d.nx + x;
            scratch.transform_line(&mut dist, start, d.nx * d.ny, d.nz);
        }
    }
    dist
}

struct DtScratch {
    f: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
    out: Vec<f64>,
}

impl DtScratch {
    fn new(n: usize) -> DtScratch {
        DtScratch {
            f: vec![0.0; n],
            v: vec![0; n],
            z: vec![0.0; n + 1],
            out: vec![0.0; n],
        }
    }

    /// One 1D pass of the lower-envelope squared distance transform over a
    /// strided line of `len` samples starting at `start`.
    fn transform_line(&mut self, data: &mut [f64], start: usize, stride: usize, len: usize) {
        if len == 1 {
            return;
        }
        for i in 0..len {
            self.f[i] = data[start + i * stride];
        }
        let f = &self.f;
        let v = &mut self.v;
        let z = &mut self.z;
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..len {
            let fq = f[q] + (q * q) as f64;
            loop {
                let p = v[k];
                let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                if s <= z[k] {
                    if k == 0 {
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for q in 0..len {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            self.out[q] = dq * dq + f[p];
        }
        for i in 0..len {
            data[start + i * stride] = self.out[i];
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::volume::Spacing;

    fn ramp_x(n: usize) -> VolumeGrid {
        let d = Dims::new(n, n, n);
        let mut data = vec![0.0f32; d.voxel_count()];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    data[d.index(x, y, z)] = x as f32;
                }
            }
        }
        VolumeGrid::new(d, Spacing::isotropic(1.0), data).unwrap()
    }

    fn constant_field(d: Dims, u: [f32; 3]) -> DeformationField {
        let n = d.voxel_count();
        let mut data = vec![0.0f32; 3 * n];
        data[..n].fill(u[0]);
        data[n..2 * n].fill(u[1]);
        data[2 * n..].fill(u[2]);
        DeformationField::new(d, Spacing::isotropic(1.0), data).unwrap()
    }

    /// Smooth low-frequency random field with max displacement about `amp`,
    /// windowed to vanish at the volume boundary so samples stay in range.
    pub(crate) fn smooth_field(d: Dims, amp: f64, seed: u64) -> DeformationField {
        let mut rng = Rng::new(seed);
        let n = d.voxel_count();
        let mut data = vec![0.0f32; 3 * n];
        let window = |t: usize, ext: usize| {
            (std::f64::consts::PI * t as f64 / (ext - 1).max(1) as f64).sin()
        };
        for comp in 0..3 {
            let (ax, ay, az) = (
                rng.uniform(0.4, 0.9),
                rng.uniform(0.4, 0.9),
                rng.uniform(0.4, 0.9),
            );
            let (px, py, pz) = (
                rng.uniform(0.0, 6.28),
                rng.uniform(0.0, 6.28),
                rng.uniform(0.0, 6.28),
            );
            let a = rng.uniform(0.4 * amp, amp);
            for z in 0..d.nz {
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let v = (ax * x as f64 / d.nx as f64 * std::f64::consts::PI + px).sin()
                            * (ay * y as f64 / d.ny as f64 * std::f64::consts::PI + py).sin()
                            * (az * z as f64 / d.nz as f64 * std::f64::consts::PI + pz).sin();
                        let w = window(x, d.nx) * window(y, d.ny) * window(z, d.nz);
                        data[comp * n + d.index(x, y, z)] = (a * v * w) as f32;
                    }
                }
            }
        }
        DeformationField::new(d, Spacing::isotropic(1.0), data).unwrap()
    }

    #[test]
    fn warp_zero_field_is_identity_bit_exact() {
        let img = ramp_x(6);
        let zero = DeformationField::zeros(img.dims, img.spacing);
        let out = warp_volume(&img, &zero).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn warp_unit_shift_with_clamp() {
        let img = ramp_x(5);
        let f = constant_field(img.dims, [1.0, 0.0, 0.0]);
        let out = warp_volume(&img, &f).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = (x as f32 + 1.0).min(4.0);
                    assert_eq!(out.at(x, y, z), expect, "voxel {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn warp_half_shift_exact_on_linear_data() {
        let img = ramp_x(5);
        let f = constant_field(img.dims, [0.5, 0.0, 0.0]);
        let out = warp_volume(&img, &f).unwrap();
        for x in 0..4 {
            assert!((out.at(x, 2, 2) - (x as f32 + 0.5)).abs() < 1e-6);
        }
        assert_eq!(out.at(4, 2, 2), 4.0); // clamped at the far face
    }

    #[test]
    fn warp_exact_on_affine_images() {
        // Trilinear interpolation reproduces affine functions wherever no
        // clamping occurs.
        let d = Dims::new(8, 8, 8);
        let mut data = vec![0.0f32; d.voxel_count()];
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    data[d.index(x, y, z)] = 1.0 + 2.0 * x as f32 + 3.0 * y as f32 - z as f32;
                }
            }
        }
        let img = VolumeGrid::new(d, Spacing::isotropic(1.0), data).unwrap();
        let f = smooth_field(d, 1.5, 3);
        let out = warp_volume(&img, &f).unwrap();
        let n = d.voxel_count();
        for z in 0..8usize {
            for y in 0..8usize {
                for x in 0..8usize {
                    let i = d.index(x, y, z);
                    let qx = (x as f32 + f.data()[i]).clamp(0.0, 7.0);
                    let qy = (y as f32 + f.data()[n + i]).clamp(0.0, 7.0);
                    let qz = (z as f32 + f.data()[2 * n + i]).clamp(0.0, 7.0);
                    let expect = 1.0 + 2.0 * qx + 3.0 * qy - qz;
                    assert!(
                        (out.at(x, y, z) - expect).abs() < 1e-4,
                        "voxel {x},{y},{z}: {} vs {}",
                        out.at(x, y, z),
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn warp_field_by_zero_is_identity() {
        let d = Dims::new(4, 4, 4);
        let inner = smooth_field(d, 1.0, 1);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        let out = warp_field(&inner, &zero).unwrap();
        assert_eq!(out.data(), inner.data());
    }

    #[test]
    fn constant_fields_are_warp_invariant() {
        let d = Dims::new(4, 4, 4);
        let inner = constant_field(d, [0.3, -0.7, 1.1]);
        let by = smooth_field(d, 1.5, 2);
        let out = warp_field(&inner, &by).unwrap();
        for (a, b) in out.data().iter().zip(inner.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_field_equals_three_scalar_warps() {
        let d = Dims::new(5, 5, 5);
        let inner = smooth_field(d, 1.0, 4);
        let by = smooth_field(d, 1.0, 5);
        let out = warp_field(&inner, &by).unwrap();
        let n = d.voxel_count();
        for comp in 0..3 {
            let ch = VolumeGrid::new(
                d,
                Spacing::isotropic(1.0),
                inner.data()[comp * n..(comp + 1) * n].to_vec(),
            )
            .unwrap();
            let w = warp_volume(&ch, &by).unwrap();
            assert_eq!(w.data(), &out.data()[comp * n..(comp + 1) * n]);
        }
    }

    #[test]
    fn compose_identity_laws() {
        let d = Dims::new(5, 5, 5);
        let f = smooth_field(d, 1.0, 7);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        let left = compose(&zero, &f).unwrap();
        let right = compose(&f, &zero).unwrap();
        for (a, b) in left.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in right.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_constant_translations_add() {
        let d = Dims::new(4, 4, 4);
        let c1 = constant_field(d, [0.5, 0.25, -0.5]);
        let c2 = constant_field(d, [0.25, -0.75, 0.5]);
        let out = compose(&c1, &c2).unwrap();
        let n = d.voxel_count();
        for i in 0..n {
            assert!((out.data()[i] - 0.75).abs() < 1e-6);
            assert!((out.data()[n + i] + 0.5).abs() < 1e-6);
            assert!((out.data()[2 * n + i] - 0.0).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_is_associative_up_to_interpolation() {
        let d = Dims::new(12, 12, 12);
        let a = smooth_field(d, 2.0, 11);
        let b = smooth_field(d, 2.0, 12);
        let c = smooth_field(d, 2.0, 13);
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        let max = left
            .data()
            .iter()
            .zip(right.data())
            .map(|(l, r)| (l - r).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 0.05, "associativity deviation {max}");
    }

    #[test]
    fn invert_constant_translation_in_one_iteration() {
        let d = Dims::new(6, 6, 6);
        let f = constant_field(d, [0.8, -0.4, 0.2]);
        let inv = invert_field(&f, 1).unwrap();
        let n = d.voxel_count();
        for i in 0..n {
            assert!((inv.field.data()[i] + 0.8).abs() < 1e-6);
            assert!((inv.field.data()[n + i] - 0.4).abs() < 1e-6);
            assert!((inv.field.data()[2 * n + i] + 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn invert_zero_field_is_zero() {
        let d = Dims::new(4, 4, 4);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        let inv = invert_field(&zero, 3).unwrap();
        assert!(inv.field.data().iter().all(|&v| v == 0.0));
        assert_eq!(inv.residual, 0.0);
    }

    #[test]
    fn inversion_residual_non_increasing_on_smooth_field() {
        let d = Dims::new(12, 12, 12);
        let f = smooth_field(d, 1.5, 21);
        let inv = invert_field(&f, INVERT_DEFAULT_ITERATIONS).unwrap();
        // Decreasing until the interpolation floor; tiny oscillations around
        // the floor are allowed.
        for w in inv.trace.windows(2) {
            assert!(w[1] <= w[0] * 1.01 + 1e-6, "residual grew: {:?}", inv.trace);
        }
        assert!(
            inv.trace.last().unwrap() < inv.trace.first().unwrap(),
            "no overall decrease: {:?}",
            inv.trace
        );
        assert!(inv.residual < 0.05, "final residual {}", inv.residual);
    }

    #[test]
    fn field_magnitude_values() {
        let d = Dims::new(3, 3, 3);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        assert!(field_magnitude(&zero).data().iter().all(|&v| v == 0.0));

        let f = constant_field(d, [3.0, 4.0, 0.0]);
        assert!(field_magnitude(&f).data().iter().all(|&v| v == 5.0));

        let g = smooth_field(d, 1.0, 31);
        let mags = field_magnitude(&g);
        let n = d.voxel_count();
        for i in 0..n {
            let (x, y, z) = (
                g.data()[i] as f64,
                g.data()[n + i] as f64,
                g.data()[2 * n + i] as f64,
            );
            let expect = (x * x + y * y + z * z).sqrt();
            assert!((mags.data()[i] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn distance_map_zero_field_is_all_zeros() {
        let d = Dims::new(4, 4, 4);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        let map = motion_distance_map(&zero, 0.9).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_map_single_voxel_region_reaches_one_at_far_corner() {
        let d = Dims::new(3, 3, 3);
        let n = d.voxel_count();
        let mut data = vec![0.0f32; 3 * n];
        data[d.index(0, 0, 0)] = 5.0; // only displaced voxel
        let f = DeformationField::new(d, Spacing::isotropic(1.0), data).unwrap();
        let map = motion_distance_map(&f, 0.99).unwrap();
        assert_eq!(map.at(0, 0, 0), 0.0);
        // sqrt(12)/diagonal(3³) = 1 exactly.
        assert!((map.at(2, 2, 2) - 1.0).abs() < 1e-6);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn distance_map_full_region_is_zero() {
        let d = Dims::new(4, 4, 4);
        let f = constant_field(d, [1.0, 0.0, 0.0]);
        let map = motion_distance_map(&f, 0.5).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let d = Dims::new(6, 5, 4);
        let mut rng = Rng::new(17);
        for _ in 0..5 {
            let region: Vec<bool> = (0..d.voxel_count()).map(|_| rng.next_f64() < 0.1).collect();
            if !region.iter().any(|&r| r) {
                continue;
            }
            let fast = euclidean_distance_sq(&region, d);
            for z in 0..d.nz {
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let mut best = f64::INFINITY;
                        for zz in 0..d.nz {
                            for yy in 0..d.ny {
                                for xx in 0..d.nx {
                                    if region[d.index(xx, yy, zz)] {
                                        let dx = x as f64 - xx as f64;
                                        let dy = y as f64 - yy as f64;
                                        let dz = z as f64 - zz as f64;
                                        best = best.min(dx * dx + dy * dy + dz * dz);
                                    }
                                }
                            }
                        }
                        assert_eq!(fast[d.index(x, y, z)], best, "voxel {x},{y},{z}");
                    }
                }
            }
        }
    }
}
