//! Synthetic 4D cardiac phantom: image sequences with analytic ground-truth
//! cavity masks and inter-phase displacement fields.
//!
//! Each phase is the end-diastole template pushed through an analytic
//! diffeomorphism Φ_t = radial-scale ∘ twist. Both factors have closed-form
//! inverses (the radial profile is piecewise linear and the twist angle
//! depends only on the rotation-invariant radius), so displacement fields
//! between arbitrary phase pairs — and their exact inverses — come from
//! `Φ_from ∘ Φ_to⁻¹` directly. Images, masks and fields all derive from the
//! same map, which is what makes the phantom usable as an oracle.
//!
//! The intensity template is piecewise constant: background 0.2, myocardial
//! ring 0.8, blood pool 0.55, papillary bodies 0.8 inside the pool. The
//! papillary bodies sit close enough to the wall that the sub-voxel gap
//! closes at end-systole, blurring the cavity boundary exactly where
//! intensity-only segmentation struggles.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::transform::{compose, mean_magnitude};
use crate::volume::{
    save_field, save_mask, save_volume, DeformationField, Dims, FieldRef, LabelMask, Spacing,
    StudyManifest, VolumeGrid,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Intensity constants of the piecewise-constant template.
pub const INTENSITY_BACKGROUND: f32 = 0.2;
pub const INTENSITY_MYOCARDIUM: f32 = 0.8;
pub const INTENSITY_BLOOD_POOL: f32 = 0.55;
pub const INTENSITY_PAPILLARY: f32 = 0.8;

/// Template-space gap between a papillary body and the cavity wall, in
/// voxels. Contraction scales it below one voxel at end-systole, so the body
/// visually fuses with the wall there.
const PAPILLARY_WALL_GAP: f64 = 1.2;

/// Width of the blend shell over which the deformation decays to identity.
const BLEND_WIDTH: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub time_points: usize,
    /// End-diastole cavity semi-axes in voxels.
    pub cavity_semi_axes: [f64; 3],
    /// Myocardial ring thickness in voxels.
    pub myo_thickness: f64,
    pub ejection_fraction: f64,
    /// Peak twist about z, reached at the last phase (the angle grows
    /// linearly in t).
    pub max_twist_deg: f64,
    pub papillary_count: usize,
    pub papillary_radius: f64,
    /// Additive Gaussian intensity noise, i.i.d. per frame.
    pub noise_sigma: f64,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [48, 48, 48],
            time_points: 10,
            cavity_semi_axes: [11.0, 11.0, 14.0],
            myo_thickness: 3.0,
            ejection_fraction: 0.5,
            max_twist_deg: 8.0,
            papillary_count: 2,
            papillary_radius: 2.5,
            noise_sigma: 0.02,
            spacing_mm: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn dims_struct(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn spacing_struct(&self) -> Spacing {
        Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ]
    }

    /// Linear contraction amplitude `a` solved from the ejection fraction:
    /// the end-systolic linear scale is (1 − EF)^(1/3).
    pub fn contraction_amplitude(&self) -> f64 {
        1.0 - (1.0 - self.ejection_fraction).cbrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_points < 2 {
            return Err(Error::Invalid(format!(
                "phantom needs at least 2 time points, got {}",
                self.time_points
            )));
        }
        if !(0.0 < self.ejection_fraction && self.ejection_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "ejection fraction must be in (0,1), got {}",
                self.ejection_fraction
            )));
        }
        if self.cavity_semi_axes.iter().any(|&a| a <= 1.0) || self.myo_thickness <= 0.5 {
            return Err(Error::Invalid("cavity semi-axes and wall thickness too small".into()));
        }
        let model = MotionModel::from_spec(self);
        let k_min = 1.0 - self.contraction_amplitude();
        let max_disp = model.r0 * ((1.0 - k_min) + self.max_twist_deg.to_radians());
        for axis in 0..3 {
            let half = (self.dims[axis] - 1) as f64 / 2.0;
            let margin = half - self.cavity_semi_axes[axis];
            if margin < self.myo_thickness + max_disp {
                return Err(Error::Invalid(format!(
                    "cavity semi-axis {} leaves margin {margin:.1} < thickness {} + max displacement {max_disp:.1}",
                    self.cavity_semi_axes[axis], self.myo_thickness
                )));
            }
        }
        if model.r1 < model.r0 + 1.5 {
            return Err(Error::Invalid(format!(
                "no room for the deformation blend shell: r0 = {:.1}, half extent {:.1}",
                model.r0,
                model.r1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Analytic motion model
// ---------------------------------------------------------------------------

/// The time-dependent diffeomorphism: twist about z (angle linear in t,
/// decaying over the blend shell) followed by radial scaling about the
/// cavity center (uniform scale k_t inside r0, identity beyond r1, linear
/// blend between).
struct MotionModel {
    r0: f64,
    r1: f64,
    amplitude: f64,
    twist_max_rad: f64,
    time_points: usize,
}

impl MotionModel {
    fn from_spec(spec: &PhantomSpec) -> MotionModel {
        let outer_max = spec
            .cavity_semi_axes
            .iter()
            .fold(0.0f64, |m, &a| m.max(a))
            + spec.myo_thickness;
        let r0 = outer_max + 1.0;
        let min_half = (0..3)
            .map(|a| (spec.dims[a] - 1) as f64 / 2.0)
            .fold(f64::INFINITY, f64::min);
        MotionModel {
            r0,
            r1: (r0 + BLEND_WIDTH).min(min_half),
            amplitude: spec.contraction_amplitude(),
            twist_max_rad: spec.max_twist_deg.to_radians(),
            time_points: spec.time_points,
        }
    }

    /// Linear contraction scale: 1 at ED (t = 0), minimal at mid-cycle.
    fn scale_at(&self, t: f64) -> f64 {
        let s = (std::f64::consts::PI * t / self.time_points as f64).sin();
        1.0 - self.amplitude * s * s
    }

    fn twist_at(&self, t: f64) -> f64 {
        if self.time_points < 2 {
            return 0.0;
        }
        self.twist_max_rad * t / (self.time_points - 1) as f64
    }

    /// Twist decay: 1 inside r0, 0 beyond r1.
    fn ramp(&self, rho: f64) -> f64 {
        if rho <= self.r0 {
            1.0
        } else if rho >= self.r1 {
            0.0
        } else {
            (self.r1 - rho) / (self.r1 - self.r0)
        }
    }

    /// Radial profile: material radius ρ maps to m(ρ).
    fn radial(&self, k: f64, rho: f64) -> f64 {
        if rho <= self.r0 {
            k * rho
        } else if rho >= self.r1 {
            rho
        } else {
            let kr0 = k * self.r0;
            kr0 + (rho - self.r0) * (self.r1 - kr0) / (self.r1 - self.r0)
        }
    }

    fn radial_inv(&self, k: f64, m: f64) -> f64 {
        let kr0 = k * self.r0;
        if m <= kr0 {
            m / k
        } else if m >= self.r1 {
            m
        } else {
            self.r0 + (m - kr0) * (self.r1 - self.r0) / (self.r1 - kr0)
        }
    }

    fn rotate_z(u: [f64; 3], angle: f64) -> [f64; 3] {
        let (s, c) = angle.sin_cos();
        [c * u[0] - s * u[1], s * u[0] + c * u[1], u[2]]
    }

    /// Φ_t: template (centered) → frame t (centered).
    fn forward(&self, t: f64, u: [f64; 3]) -> [f64; 3] {
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho == 0.0 {
            return u;
        }
        let v = Self::rotate_z(u, self.twist_at(t) * self.ramp(rho));
        let k = self.scale_at(t);
        let m = self.radial(k, rho);
        let f = m / rho;
        [v[0] * f, v[1] * f, v[2] * f]
    }

    /// Φ_t⁻¹: frame t (centered) → template (centered).
    fn inverse(&self, t: f64, w: [f64; 3]) -> [f64; 3] {
        let m = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if m == 0.0 {
            return w;
        }
        let k = self.scale_at(t);
        let rho = self.radial_inv(k, m);
        let f = rho / m;
        let v = [w[0] * f, w[1] * f, w[2] * f];
        Self::rotate_z(v, -self.twist_at(t) * self.ramp(rho))
    }
}

// ---------------------------------------------------------------------------
// Template
// ---------------------------------------------------------------------------

struct Template {
    semi_axes: [f64; 3],
    outer_axes: [f64; 3],
    papillary_centers: Vec<[f64; 3]>,
    papillary_radius: f64,
}

impl Template {
    fn build(spec: &PhantomSpec) -> Template {
        let a = spec.cavity_semi_axes;
        let outer = [
            a[0] + spec.myo_thickness,
            a[1] + spec.myo_thickness,
            a[2] + spec.myo_thickness,
        ];
        // Papillary azimuths are drawn from the study seed so different
        // studies get different configurations.
        let mut rng = Rng::new(spec.seed ^ 0x7061_7069_6c6c_6172);
        let azimuth0 = rng.uniform(0.0, std::f64::consts::TAU);
        let mut centers = Vec::with_capacity(spec.papillary_count);
        for i in 0..spec.papillary_count {
            let theta =
                azimuth0 + i as f64 * std::f64::consts::TAU / spec.papillary_count.max(1) as f64;
            let (s, c) = theta.sin_cos();
            // Ellipse radius of the cavity in this direction (z = 0 slice
            // tilted by a small alternating z offset).
            let zf = 0.15 * ((i % 3) as f64 - 1.0);
            let dir = [c, s, zf];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            let dirn = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
            let q = (dirn[0] / a[0]).powi(2) + (dirn[1] / a[1]).powi(2) + (dirn[2] / a[2]).powi(2);
            let wall_dist = 1.0 / q.sqrt();
            let r_center = wall_dist - spec.papillary_radius - PAPILLARY_WALL_GAP;
            centers.push([dirn[0] * r_center, dirn[1] * r_center, dirn[2] * r_center]);
        }
        Template {
            semi_axes: a,
            outer_axes: outer,
            papillary_centers: centers,
            papillary_radius: spec.papillary_radius,
        }
    }

    fn in_ellipsoid(u: [f64; 3], axes: [f64; 3]) -> bool {
        (u[0] / axes[0]).powi(2) + (u[1] / axes[1]).powi(2) + (u[2] / axes[2]).powi(2) <= 1.0
    }

    fn in_papillary(&self, u: [f64; 3]) -> bool {
        let r2 = self.papillary_radius * self.papillary_radius;
        self.papillary_centers.iter().any(|c| {
            let dx = u[0] - c[0];
            let dy = u[1] - c[1];
            let dz = u[2] - c[2];
            dx * dx + dy * dy + dz * dz <= r2
        })
    }

    fn intensity(&self, u: [f64; 3]) -> f32 {
        if Self::in_ellipsoid(u, self.semi_axes) {
            if self.in_papillary(u) {
                INTENSITY_PAPILLARY
            } else {
                INTENSITY_BLOOD_POOL
            }
        } else if Self::in_ellipsoid(u, self.outer_axes) {
            INTENSITY_MYOCARDIUM
        } else {
            INTENSITY_BACKGROUND
        }
    }

    /// Cavity label: the full ellipsoid interior, papillary bodies included —
    /// the intensity boundary and the mask boundary deliberately disagree
    /// around the papillary bodies.
    fn label(&self, u: [f64; 3]) -> u8 {
        Self::in_ellipsoid(u, self.semi_axes) as u8
    }
}

// ---------------------------------------------------------------------------
// Sequence generation
// ---------------------------------------------------------------------------

/// A generated study: T frames, cavity masks, and analytic displacement
/// fields for all adjacent pairs in both directions, including the cyclic
/// pair closing the cardiac cycle.
#[derive(Clone, Debug)]
pub struct PhantomSequence {
    pub spec: PhantomSpec,
    pub frames: Vec<VolumeGrid>,
    pub masks: Vec<LabelMask>,
    /// `fields_fwd[t]` warps frame t into frame (t+1) mod T.
    pub fields_fwd: Vec<DeformationField>,
    /// `fields_bwd[t]` warps frame (t+1) mod T into frame t.
    pub fields_bwd: Vec<DeformationField>,
}

/// Generate the full sequence. Deterministic in the spec (noise included).
pub fn generate(spec: &PhantomSpec) -> Result<PhantomSequence> {
    spec.validate()?;
    let model = MotionModel::from_spec(spec);
    let template = Template::build(spec);
    let d = spec.dims_struct();
    let spacing = spec.spacing_struct();
    let center = spec.center();
    let n = d.voxel_count();
    let t_count = spec.time_points;

    let mut frames = Vec::with_capacity(t_count);
    let mut masks = Vec::with_capacity(t_count);
    let mut noise_rng = Rng::new(spec.seed);
    for t in 0..t_count {
        let mut intensity = vec![0.0f32; n];
        let mut labels = vec![0u8; n];
        let tf = t as f64;
        let mut i = 0usize;
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let w = [
                        x as f64 - center[0],
                        y as f64 - center[1],
                        z as f64 - center[2],
                    ];
                    let u = model.inverse(tf, w);
                    intensity[i] = template.intensity(u);
                    labels[i] = template.label(u);
                    i += 1;
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            let mut frame_rng = noise_rng.fork(t as u64);
            for v in intensity.iter_mut() {
                *v += (frame_rng.normal() * spec.noise_sigma) as f32;
            }
        }
        frames.push(VolumeGrid::new(d, spacing, intensity)?);
        masks.push(LabelMask::new(d, spacing, 2, labels)?);
    }

    let mut fields_fwd = Vec::with_capacity(t_count);
    let mut fields_bwd = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let next = (t + 1) % t_count;
        fields_fwd.push(analytic_field(spec, t, next)?);
        fields_bwd.push(analytic_field(spec, next, t)?);
    }

    Ok(PhantomSequence {
        spec: spec.clone(),
        frames,
        masks,
        fields_fwd,
        fields_bwd,
    })
}

/// Closed-form displacement field warping frame `t_from` into frame `t_to`
/// under backward warping: `I_to(p) = I_from(p + φ(p))`, so
/// `φ(p) = Φ_from(Φ_to⁻¹(p)) − p`. Swapping the arguments yields the exact
/// inverse map.
pub fn analytic_field(spec: &PhantomSpec, t_from: usize, t_to: usize) -> Result<DeformationField> {
    if t_from >= spec.time_points || t_to >= spec.time_points {
        return Err(Error::Invalid(format!(
            "phase indices ({t_from}, {t_to}) out of range for T = {}",
            spec.time_points
        )));
    }
    let model = MotionModel::from_spec(spec);
    let d = spec.dims_struct();
    let center = spec.center();
    let n = d.voxel_count();
    let mut data = vec![0.0f32; 3 * n];
    if t_from == t_to {
        return DeformationField::new(d, spec.spacing_struct(), data);
    }
    let (tf, tt) = (t_from as f64, t_to as f64);
    let mut i = 0usize;
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let p = [
                    x as f64 - center[0],
                    y as f64 - center[1],
                    z as f64 - center[2],
                ];
                let q = model.forward(tf, model.inverse(tt, p));
                data[i] = (q[0] - p[0]) as f32;
                data[n + i] = (q[1] - p[1]) as f32;
                data[2 * n + i] = (q[2] - p[2]) as f32;
                i += 1;
            }
        }
    }
    DeformationField::new(d, spec.spacing_struct(), data)
}

impl PhantomSequence {
    pub fn time_points(&self) -> usize {
        self.frames.len()
    }

    /// Cavity voxel counts per phase.
    pub fn cavity_volumes(&self) -> Vec<usize> {
        self.masks.iter().map(|m| m.count(1)).collect()
    }

    /// Sequence-level invariants: the realized ejection fraction, adjacent
    /// volume deltas (as a fraction of the ED volume), and the analytic
    /// inverse pairing of the stored fields.
    pub fn check_invariants(&self) -> Result<()> {
        let vols = self.cavity_volumes();
        let ed = vols[0] as f64;
        let es = *vols.iter().min().unwrap() as f64;
        let realized_ef = 1.0 - es / ed;
        let want = self.spec.ejection_fraction;
        if (realized_ef - want).abs() > 0.05 * want.max(1e-9) {
            return Err(Error::Invalid(format!(
                "realized EF {realized_ef:.4} deviates from requested {want:.4} by more than 5%"
            )));
        }
        for t in 0..vols.len() {
            let next = (t + 1) % vols.len();
            let delta = (vols[next] as f64 - vols[t] as f64).abs() / ed;
            if delta > 0.15 {
                return Err(Error::Invalid(format!(
                    "adjacent volume delta {delta:.3} of ED volume between phases {t} and {next}"
                )));
            }
        }
        for t in 0..self.fields_fwd.len() {
            let residual = mean_magnitude(&compose(&self.fields_fwd[t], &self.fields_bwd[t])?);
            if residual >= 0.05 {
                return Err(Error::Invalid(format!(
                    "fields {t}↔{} compose to residual {residual:.4} voxels",
                    (t + 1) % self.fields_fwd.len()
                )));
            }
        }
        Ok(())
    }
}

/// Spec for study `index` of a corpus. With `jitter` the cardiac geometry
/// (semi-axes, wall thickness, ejection fraction, twist, papillary layout)
/// varies per study, deterministically from the corpus seed, so a trained
/// network has to generalize rather than memorize one anatomy. Ejection
/// fractions stay at or below 0.44: with the sin² contraction profile over
/// 10 phases, larger values push adjacent-phase volume deltas past 15% of
/// the ED volume.
pub fn corpus_spec(
    dims: [usize; 3],
    time_points: usize,
    corpus_seed: u64,
    index: usize,
    jitter: bool,
) -> PhantomSpec {
    let min_dim = dims.iter().copied().min().unwrap_or(48) as f64;
    let s = min_dim / 48.0;
    let study_seed = corpus_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64);
    let base = PhantomSpec {
        dims,
        time_points,
        cavity_semi_axes: [10.5 * s, 10.0 * s, 13.4 * s],
        myo_thickness: (3.0 * s).max(1.5),
        ejection_fraction: 0.40,
        max_twist_deg: 7.0,
        papillary_count: 2,
        papillary_radius: (2.4 * s).max(1.2),
        noise_sigma: 0.02,
        spacing_mm: [1.0, 1.0, 1.0],
        seed: study_seed,
    };
    if !jitter {
        return base;
    }
    let mut rng = Rng::new(study_seed ^ 0x6a69_7474_6572);
    PhantomSpec {
        cavity_semi_axes: [
            base.cavity_semi_axes[0] * rng.uniform(0.92, 1.08),
            base.cavity_semi_axes[1] * rng.uniform(0.92, 1.08),
            base.cavity_semi_axes[2] * rng.uniform(0.94, 1.06),
        ],
        myo_thickness: base.myo_thickness * rng.uniform(0.88, 1.12),
        ejection_fraction: rng.uniform(0.36, 0.44),
        max_twist_deg: rng.uniform(5.0, 9.0),
        papillary_count: 2 + rng.below(2),
        papillary_radius: base.papillary_radius * rng.uniform(0.85, 1.15),
        ..base
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Write the study to `dir` in the volume-core format: `manifest.json`,
/// `t{k}.vol.*`, `t{k}.mask.*`, and `t{a}to{b}.field.*` for all adjacent
/// pairs in both directions.
pub fn export_study(seq: &PhantomSequence, dir: &Path) -> Result<StudyManifest> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let t_count = seq.time_points();
    let mut volumes = Vec::with_capacity(t_count);
    let mut mask_paths = Vec::with_capacity(t_count);
    for (t, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let vol_name = format!("t{t}.vol.json");
        let mask_name = format!("t{t}.mask.json");
        save_volume(frame, &dir.join(&vol_name))?;
        save_mask(mask, &dir.join(&mask_name))?;
        volumes.push(vol_name);
        mask_paths.push(mask_name);
    }
    let mut fields = Vec::new();
    for t in 0..t_count {
        let next = (t + 1) % t_count;
        let fwd_name = format!("t{t}to{next}.field.json");
        let bwd_name = format!("t{next}to{t}.field.json");
        save_field(&seq.fields_fwd[t], &dir.join(&fwd_name))?;
        save_field(&seq.fields_bwd[t], &dir.join(&bwd_name))?;
        fields.push(FieldRef {
            from: t,
            to: next,
            path: fwd_name,
        });
        fields.push(FieldRef {
            from: next,
            to: t,
            path: bwd_name,
        });
    }
    let manifest = StudyManifest {
        study_id: format!("phantom-{:016x}", seq.spec.seed),
        dims: seq.spec.dims,
        spacing: seq.spec.spacing_mm,
        volumes,
        masks: Some(mask_paths),
        fields,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
