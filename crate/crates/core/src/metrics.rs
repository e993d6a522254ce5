//! Segmentation metrics (Dice, Jaccard, Hausdorff), the flow end-point error,
//! and per-time-point reporting.
//!
//! Hausdorff is evaluated over boundary voxels (6-connectivity surface,
//! volume borders count as boundary) in physical millimeters. The default
//! path uses a grid-bucket accelerator that agrees exactly with the
//! brute-force reference, since both take the same per-pair distances and
//! min/max over the same finite sets.

use crate::error::{Error, Result};
use crate::volume::{DeformationField, Dims, LabelMask, Spacing};
use serde::{Deserialize, Serialize};

/// Metrics of one (study, time point, class) cell. `hausdorff_mm` is absent
/// when either boundary set was empty (the metric is undefined there);
/// aggregation skips such records and reports how many were skipped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub study_id: String,
    pub time_index: usize,
    pub class_id: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hausdorff_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe_voxels: Option<f64>,
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "mask extents differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

fn overlap_counts(a: &LabelMask, b: &LabelMask, class: u8) -> (usize, usize, usize) {
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        let in_a = la == class;
        let in_b = lb == class;
        na += in_a as usize;
        nb += in_b as usize;
        inter += (in_a && in_b) as usize;
    }
    (na, nb, inter)
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; 1 when both sets are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64> {
    check_dims(a.dims, b.dims)?;
    let (na, nb, inter) = overlap_counts(a, b, class);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Jaccard index `|A∩B| / |A∪B|`; 1 when both sets are empty.
pub fn jaccard(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64> {
    check_dims(a.dims, b.dims)?;
    let (na, nb, inter) = overlap_counts(a, b, class);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary voxels of `class`: member voxels with a 6-neighbor outside the
/// class or on the volume border.
pub fn boundary_voxels(mask: &LabelMask, class: u8) -> Vec<[usize; 3]> {
    let d = mask.dims;
    let data = mask.data();
    let mut out = Vec::new();
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                if data[d.index(x, y, z)] != class {
                    continue;
                }
                let mut is_boundary = x == 0
                    || y == 0
                    || z == 0
                    || x == d.nx - 1
                    || y == d.ny - 1
                    || z == d.nz - 1;
                if !is_boundary {
                    is_boundary = data[d.index(x - 1, y, z)] != class
                        || data[d.index(x + 1, y, z)] != class
                        || data[d.index(x, y - 1, z)] != class
                        || data[d.index(x, y + 1, z)] != class
                        || data[d.index(x, y, z - 1)] != class
                        || data[d.index(x, y, z + 1)] != class;
                }
                if is_boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn to_mm(p: [usize; 3], s: Spacing) -> [f64; 3] {
    [p[0] as f64 * s.sx, p[1] as f64 * s.sy, p[2] as f64 * s.sz]
}

#[inline(always)]
fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Directed Hausdorff component: `max_{p∈from} min_{q∈to} d(p,q)²`, brute
/// force.
fn directed_max_min_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst = 0.0f64;
    for &p in from {
        let mut best = f64::INFINITY;
        for &q in to {
            let d2 = dist_sq(p, q);
            if d2 < best {
                best = d2;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Exact brute-force symmetric Hausdorff distance over boundary voxels, in
/// millimeters. O(|A|·|B|); the reference for the accelerated path.
pub fn hausdorff_brute(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64> {
    check_dims(a.dims, b.dims)?;
    let pa: Vec<[f64; 3]> = boundary_voxels(a, class)
        .into_iter()
        .map(|p| to_mm(p, a.spacing))
        .collect();
    let pb: Vec<[f64; 3]> = boundary_voxels(b, class)
        .into_iter()
        .map(|p| to_mm(p, b.spacing))
        .collect();
    if pa.is_empty() {
        return Err(Error::EmptySet("first"));
    }
    if pb.is_empty() {
        return Err(Error::EmptySet("second"));
    }
    let d2 = directed_max_min_sq(&pa, &pb).max(directed_max_min_sq(&pb, &pa));
    Ok(d2.sqrt())
}

/// Uniform grid over points in physical coordinates, for nearest-neighbor
/// queries with expanding-shell search.
struct BucketGrid {
    cell: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    buckets: Vec<Vec<[f64; 3]>>,
}

impl BucketGrid {
    fn build(points: &[[f64; 3]], cell: f64) -> BucketGrid {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let dims = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / cell).floor() as usize + 1);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for &p in points {
            let c = Self::cell_of_raw(p, lo, cell, dims);
            buckets[c].push(p);
        }
        BucketGrid {
            cell,
            origin: lo,
            dims,
            buckets,
        }
    }

    fn cell_of_raw(p: [f64; 3], origin: [f64; 3], cell: f64, dims: [usize; 3]) -> usize {
        let i = [0, 1, 2].map(|k| {
            (((p[k] - origin[k]) / cell).floor() as usize).min(dims[k] - 1)
        });
        (i[2] * dims[1] + i[1]) * dims[0] + i[0]
    }

    fn coords_of(&self, p: [f64; 3]) -> [isize; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.origin[k]) / self.cell).floor() as isize)
    }

    /// Exact min squared distance from `p` to the stored points.
    fn min_dist_sq(&self, p: [f64; 3]) -> f64 {
        let c = self.coords_of(p);
        let mut best = f64::INFINITY;
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as isize + 1;
        for ring in 0..=max_ring {
            // Once a candidate is known, stop as soon as the nearest possible
            // point of the next shell cannot beat it.
            if best.is_finite() {
                let ring_min = (ring - 1).max(0) as f64 * self.cell;
                if ring_min * ring_min > best {
                    break;
                }
            }
            for iz in c[2] - ring..=c[2] + ring {
                if iz < 0 || iz as usize >= self.dims[2] {
                    continue;
                }
                for iy in c[1] - ring..=c[1] + ring {
                    if iy < 0 || iy as usize >= self.dims[1] {
                        continue;
                    }
                    for ix in c[0] - ring..=c[0] + ring {
                        if ix < 0 || ix as usize >= self.dims[0] {
                            continue;
                        }
                        // Shell only: skip the interior already visited.
                        let on_shell = (ix - c[0]).abs() == ring
                            || (iy - c[1]).abs() == ring
                            || (iz - c[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        let b = (iz as usize * self.dims[1] + iy as usize) * self.dims[0]
                            + ix as usize;
                        for &q in &self.buckets[b] {
                            let d2 = dist_sq(p, q);
                            if d2 < best {
                                best = d2;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Symmetric Hausdorff distance over boundary voxels in millimeters, using a
/// grid-bucket accelerator. Agrees exactly with [`hausdorff_brute`]: per-pair
/// distances are computed by the same expression, and min/max range over the
/// same sets. Errors when either boundary set is empty.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64> {
    check_dims(a.dims, b.dims)?;
    let pa: Vec<[f64; 3]> = boundary_voxels(a, class)
        .into_iter()
        .map(|p| to_mm(p, a.spacing))
        .collect();
    let pb: Vec<[f64; 3]> = boundary_voxels(b, class)
        .into_iter()
        .map(|p| to_mm(p, b.spacing))
        .collect();
    if pa.is_empty() {
        return Err(Error::EmptySet("first"));
    }
    if pb.is_empty() {
        return Err(Error::EmptySet("second"));
    }
    let cell = [
        a.spacing.sx.max(a.spacing.sy).max(a.spacing.sz) * 2.0,
        1e-6,
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    let grid_a = BucketGrid::build(&pa, cell);
    let grid_b = BucketGrid::build(&pb, cell);
    let mut worst = 0.0f64;
    for &p in &pa {
        worst = worst.max(grid_b.min_dist_sq(p));
    }
    for &q in &pb {
        worst = worst.max(grid_a.min_dist_sq(q));
    }
    Ok(worst.sqrt())
}

/// Mean Euclidean norm of the per-voxel difference between two fields, in
/// voxels.
pub fn endpoint_error(f: &DeformationField, truth: &DeformationField) -> Result<f64> {
    if f.dims != truth.dims {
        return Err(Error::ShapeMismatch(format!(
            "field extents differ: {:?} vs {:?}",
            f.dims, truth.dims
        )));
    }
    let n = f.dims.voxel_count();
    let (a, b) = (f.data(), truth.data());
    let mut acc = 0.0f64;
    for i in 0..n {
        let dx = (a[i] - b[i]) as f64;
        let dy = (a[n + i] - b[n + i]) as f64;
        let dz = (a[2 * n + i] - b[2 * n + i]) as f64;
        acc += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    Ok(acc / n as f64)
}

/// Aggregate statistics over records of one class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub class_id: u8,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub jaccard_mean: f64,
    pub jaccard_std: f64,
    /// Mean/std over records whose Hausdorff was defined.
    pub hausdorff_mean: Option<f64>,
    pub hausdorff_std: Option<f64>,
    /// Records skipped by the Hausdorff aggregation (empty boundary sets).
    pub hausdorff_skipped: usize,
    pub records: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One record per (time index, foreground class) comparing predictions to
/// ground truth. Hausdorff-undefined phases (an empty prediction or truth)
/// yield a record with `hausdorff_mm: None`.
pub fn per_phase_report(
    study_id: &str,
    predictions: &[LabelMask],
    truths: &[LabelMask],
) -> Result<Vec<MetricRecord>> {
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut records = Vec::new();
    for (t, (pred, truth)) in predictions.iter().zip(truths).enumerate() {
        let num_classes = truth.num_classes.max(pred.num_classes);
        for class in 1..num_classes {
            let dice_v = dice(pred, truth, class)?;
            let jaccard_v = jaccard(pred, truth, class)?;
            let hausdorff_mm = match hausdorff(pred, truth, class) {
                Ok(v) => Some(v),
                Err(Error::EmptySet(_)) => None,
                Err(e) => return Err(e),
            };
            records.push(MetricRecord {
                study_id: study_id.to_string(),
                time_index: t,
                class_id: class,
                dice: dice_v,
                jaccard: jaccard_v,
                hausdorff_mm,
                epe_voxels: None,
            });
        }
    }
    Ok(records)
}

/// Per-class mean/std aggregation of a record list.
pub fn summarize(records: &[MetricRecord]) -> Vec<MetricSummary> {
    let mut classes: Vec<u8> = records.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class_id| {
            let of_class: Vec<&MetricRecord> =
                records.iter().filter(|r| r.class_id == class_id).collect();
            let dices: Vec<f64> = of_class.iter().map(|r| r.dice).collect();
            let jaccards: Vec<f64> = of_class.iter().map(|r| r.jaccard).collect();
            let hds: Vec<f64> = of_class.iter().filter_map(|r| r.hausdorff_mm).collect();
            let (dice_mean, dice_std) = mean_std(&dices);
            let (jaccard_mean, jaccard_std) = mean_std(&jaccards);
            let (hausdorff_mean, hausdorff_std) = if hds.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&hds);
                (Some(m), Some(s))
            };
            MetricSummary {
                class_id,
                dice_mean,
                dice_std,
                jaccard_mean,
                jaccard_std,
                hausdorff_mean,
                hausdorff_std,
                hausdorff_skipped: of_class.len() - hds.len(),
                records: of_class.len(),
            }
        })
        .collect()
}

/// CSV with a stable column order, one record per row. `hausdorff_mm` and
/// `epe_voxels` cells are empty when undefined.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("study_id,time_index,class_id,dice,jaccard,hausdorff_mm,epe_voxels\n");
    for r in records {
        let hd = r.hausdorff_mm.map(|v| v.to_string()).unwrap_or_default();
        let epe = r.epe_voxels.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.study_id, r.time_index, r.class_id, r.dice, r.jaccard, hd, epe
        ));
    }
    out
}

/// Parse a CSV produced by [`records_to_csv`].
pub fn records_from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Invalid("empty metrics csv".into()))?;
    if header != "study_id,time_index,class_id,dice,jaccard,hausdorff_mm,epe_voxels" {
        return Err(Error::Invalid(format!("unexpected csv header: {header}")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Invalid(format!(
                "csv line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Invalid(format!("csv line {}: bad {what}: {s}", lineno + 2))
            })
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s, what).map(Some)
            }
        };
        records.push(MetricRecord {
            study_id: fields[0].to_string(),
            time_index: parse_f64(fields[1], "time_index")? as usize,
            class_id: parse_f64(fields[2], "class_id")? as u8,
            dice: parse_f64(fields[3], "dice")?,
            jaccard: parse_f64(fields[4], "jaccard")?,
            hausdorff_mm: opt(fields[5], "hausdorff_mm")?,
            epe_voxels: opt(fields[6], "epe_voxels")?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask_from(dims: Dims, voxels: &[[usize; 3]]) -> LabelMask {
        let mut data = vec![0u8; dims.voxel_count()];
        for &[x, y, z] in voxels {
            data[dims.index(x, y, z)] = 1;
        }
        LabelMask::new(dims, Spacing::isotropic(1.0), 2, data).unwrap()
    }

    fn random_mask(dims: Dims, rng: &mut Rng, fill: f64) -> LabelMask {
        let data: Vec<u8> = (0..dims.voxel_count())
            .map(|_| (rng.next_f64() < fill) as u8)
            .collect();
        LabelMask::new(dims, Spacing::isotropic(1.0), 2, data).unwrap()
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let d = Dims::new(4, 4, 4);
        let a = mask_from(d, &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        let b = mask_from(d, &[[3, 3, 3]]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap_case() {
        // |A| = |B| = 100, |A∩B| = 50 → Dice 0.5, Jaccard 1/3.
        let d = Dims::new(10, 10, 10);
        let mut data_a = vec![0u8; 1000];
        let mut data_b = vec![0u8; 1000];
        for i in 0..100 {
            data_a[i] = 1;
            data_b[i + 50] = 1;
        }
        let a = LabelMask::new(d, Spacing::isotropic(1.0), 2, data_a).unwrap();
        let b = LabelMask::new(d, Spacing::isotropic(1.0), 2, data_b).unwrap();
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert!((jaccard(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_set_conventions() {
        let d = Dims::new(3, 3, 3);
        let empty = mask_from(d, &[]);
        let some = mask_from(d, &[[1, 1, 1]]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &some, 1).unwrap(), 0.0);
        assert!(matches!(
            hausdorff(&empty, &some, 1),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn dice_jaccard_duality_on_random_masks() {
        let d = Dims::new(6, 6, 6);
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let a = random_mask(d, &mut rng, 0.3);
            let b = random_mask(d, &mut rng, 0.3);
            let dv = dice(&a, &b, 1).unwrap();
            let jv = jaccard(&a, &b, 1).unwrap();
            assert!((jv - dv / (2.0 - dv)).abs() < 1e-9, "J={jv} D={dv}");
        }
    }

    #[test]
    fn metrics_symmetric_and_relabel_invariant() {
        let d = Dims::new(5, 5, 5);
        let mut rng = Rng::new(6);
        let a = random_mask(d, &mut rng, 0.25);
        let b = random_mask(d, &mut rng, 0.25);
        assert_eq!(dice(&a, &b, 1).unwrap(), dice(&b, &a, 1).unwrap());
        assert_eq!(jaccard(&a, &b, 1).unwrap(), jaccard(&b, &a, 1).unwrap());
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), hausdorff(&b, &a, 1).unwrap());

        // Relabeling non-target classes must not change class-1 metrics.
        let relabel = |m: &LabelMask| {
            let data: Vec<u8> = m.data().iter().map(|&l| if l == 0 { 2 } else { l }).collect();
            LabelMask::new(d, Spacing::isotropic(1.0), 3, data).unwrap()
        };
        assert_eq!(
            dice(&a, &b, 1).unwrap(),
            dice(&relabel(&a), &relabel(&b), 1).unwrap()
        );
    }

    #[test]
    fn hausdorff_three_four_five() {
        let d = Dims::new(8, 8, 8);
        let a = mask_from(d, &[[0, 0, 0]]);
        let b = mask_from(d, &[[3, 4, 0]]);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), 5.0);
        assert_eq!(hausdorff_brute(&a, &b, 1).unwrap(), 5.0);
    }

    #[test]
    fn hausdorff_identical_masks_is_zero() {
        let d = Dims::new(6, 6, 6);
        let mut rng = Rng::new(9);
        let a = random_mask(d, &mut rng, 0.2);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_respects_anisotropic_spacing() {
        let d = Dims::new(4, 4, 4);
        let spacing = Spacing::new(0.5, 1.0, 2.0);
        let mk = |voxels: &[[usize; 3]]| {
            let mut data = vec![0u8; d.voxel_count()];
            for &[x, y, z] in voxels {
                data[d.index(x, y, z)] = 1;
            }
            LabelMask::new(d, spacing, 2, data).unwrap()
        };
        let a = mk(&[[0, 0, 0]]);
        let b = mk(&[[2, 0, 1]]);
        // dx = 2·0.5 = 1 mm, dz = 1·2 = 2 mm.
        let expect = (1.0f64 + 4.0).sqrt();
        assert!((hausdorff(&a, &b, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn accelerated_hausdorff_equals_brute_force() {
        let d = Dims::new(7, 6, 5);
        let mut rng = Rng::new(11);
        for round in 0..30 {
            let a = random_mask(d, &mut rng, 0.15);
            let b = random_mask(d, &mut rng, 0.15);
            if a.count(1) == 0 || b.count(1) == 0 {
                continue;
            }
            let fast = hausdorff(&a, &b, 1).unwrap();
            let brute = hausdorff_brute(&a, &b, 1).unwrap();
            assert_eq!(fast, brute, "round {round}");
        }
    }

    #[test]
    fn hausdorff_monotone_under_far_point_dilation() {
        let d = Dims::new(10, 4, 4);
        let a = mask_from(d, &[[0, 0, 0]]);
        let b1 = mask_from(d, &[[5, 0, 0]]);
        let b2 = mask_from(d, &[[5, 0, 0], [8, 0, 0]]);
        let h1 = hausdorff(&a, &b1, 1).unwrap();
        let h2 = hausdorff(&a, &b2, 1).unwrap();
        assert!(h2 >= h1, "dilating the far set decreased HD: {h2} < {h1}");
    }

    #[test]
    fn endpoint_error_values() {
        let d = Dims::new(4, 4, 4);
        let zero = DeformationField::zeros(d, Spacing::isotropic(1.0));
        assert_eq!(endpoint_error(&zero, &zero).unwrap(), 0.0);

        let n = d.voxel_count();
        let mut data = vec![0.0f32; 3 * n];
        data[..n].fill(3.0);
        data[n..2 * n].fill(4.0);
        let f = DeformationField::new(d, Spacing::isotropic(1.0), data).unwrap();
        assert_eq!(endpoint_error(&f, &zero).unwrap(), 5.0);

        // Random pair against a scalar loop.
        let mut rng = Rng::new(13);
        let da: Vec<f32> = (0..3 * n).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let db: Vec<f32> = (0..3 * n).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let fa = DeformationField::new(d, Spacing::isotropic(1.0), da.clone()).unwrap();
        let fb = DeformationField::new(d, Spacing::isotropic(1.0), db.clone()).unwrap();
        let mut expect = 0.0f64;
        for i in 0..n {
            let dx = (da[i] - db[i]) as f64;
            let dy = (da[n + i] - db[n + i]) as f64;
            let dz = (da[2 * n + i] - db[2 * n + i]) as f64;
            expect += (dx * dx + dy * dy + dz * dz).sqrt();
        }
        expect /= n as f64;
        assert!((endpoint_error(&fa, &fb).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn per_phase_report_identical_lists() {
        let d = Dims::new(5, 5, 5);
        let mut rng = Rng::new(15);
        let masks: Vec<LabelMask> = (0..3).map(|_| random_mask(d, &mut rng, 0.2)).collect();
        let records = per_phase_report("s0", &masks, &masks).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.dice == 1.0 && r.jaccard == 1.0));
        assert!(records
            .iter()
            .all(|r| r.hausdorff_mm == Some(0.0) || r.hausdorff_mm.is_none()));
    }

    #[test]
    fn per_phase_report_two_phase_hand_case() {
        let d = Dims::new(4, 4, 4);
        let pred0 = mask_from(d, &[[1, 1, 1], [2, 1, 1]]);
        let truth0 = mask_from(d, &[[1, 1, 1]]);
        let pred1 = mask_from(d, &[[0, 0, 0]]);
        let truth1 = mask_from(d, &[[0, 0, 0]]);
        let records =
            per_phase_report("s1", &[pred0, pred1], &[truth0, truth1]).unwrap();
        // Phase 0: |A|=2, |B|=1, inter=1 → Dice 2/3, Jaccard 1/2, HD 1mm.
        assert!((records[0].dice - 2.0 / 3.0).abs() < 1e-12);
        assert!((records[0].jaccard - 0.5).abs() < 1e-12);
        assert_eq!(records[0].hausdorff_mm, Some(1.0));
        assert_eq!(records[1].dice, 1.0);
    }

    #[test]
    fn empty_prediction_marks_hausdorff_undefined_and_aggregation_skips() {
        let d = Dims::new(4, 4, 4);
        let empty = mask_from(d, &[]);
        let full = mask_from(d, &[[1, 1, 1]]);
        let records = per_phase_report("s2", &[empty, full.clone()], &[full.clone(), full]).unwrap();
        assert_eq!(records[0].hausdorff_mm, None);
        assert_eq!(records[0].dice, 0.0);
        let summary = summarize(&records);
        assert_eq!(summary[0].hausdorff_skipped, 1);
        assert_eq!(summary[0].records, 2);
        assert_eq!(summary[0].hausdorff_mean, Some(0.0));
    }

    #[test]
    fn csv_has_stable_columns() {
        let records = vec![MetricRecord {
            study_id: "s".into(),
            time_index: 0,
            class_id: 1,
            dice: 1.0,
            jaccard: 1.0,
            hausdorff_mm: None,
            epe_voxels: Some(0.25),
        }];
        let csv = records_to_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "study_id,time_index,class_id,dice,jaccard,hausdorff_mm,epe_voxels"
        );
        assert_eq!(lines.next().unwrap(), "s,0,1,1,1,,0.25");
    }

    #[test]
    fn csv_round_trips() {
        let records = vec![
            MetricRecord {
                study_id: "a".into(),
                time_index: 3,
                class_id: 1,
                dice: 0.875,
                jaccard: 0.7777777777777778,
                hausdorff_mm: Some(2.25),
                epe_voxels: None,
            },
            MetricRecord {
                study_id: "b".into(),
                time_index: 0,
                class_id: 2,
                dice: 0.5,
                jaccard: 1.0 / 3.0,
                hausdorff_mm: None,
                epe_voxels: Some(0.125),
            },
        ];
        let back = records_from_csv(&records_to_csv(&records)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].dice, records[0].dice);
        assert_eq!(back[0].hausdorff_mm, records[0].hausdorff_mm);
        assert_eq!(back[1].jaccard, records[1].jaccard);
        assert_eq!(back[1].epe_voxels, records[1].epe_voxels);
    }
}
