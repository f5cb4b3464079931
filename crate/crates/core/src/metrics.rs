//! Volumetric segmentation metrics: DSC, Hausdorff distance (max and 95th
//! percentile), sensitivity and specificity, plus per-region evaluation.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mask = Array3<bool>;

/// Hausdorff penalty used when exactly one of the two masks is empty
/// (BraTS evaluation convention, mm).
pub const EMPTY_MASK_HD_PENALTY: f64 = 373.13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mask shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_same_shape(pred, gt)?;
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, false) => c.tn += 1,
        (false, true) => c.fn_ += 1,
    });
    Ok(c)
}

/// `2tp / (fp + 2tp + fn)`; both-empty returns 1.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let denom = c.fp + 2 * c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    if c.tn + c.fp == 0 {
        1.0
    } else {
        c.tn as f64 / (c.tn + c.fp) as f64
    }
}

/// Foreground voxels with at least one background 6-neighbor. Voxels outside
/// the volume count as background.
pub fn boundary(mask: &Mask) -> Mask {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let bg = |dx: isize, dy: isize, dz: isize| {
            let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                return true;
            }
            !mask[[a as usize, b as usize, c as usize]]
        };
        bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1)
    })
}

const FAR: i64 = i64::MAX / 4;

/// Exact 1D lower envelope of parabolas `(x - i)^2 + f[i]` in integer
/// arithmetic.
fn envelope_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let cost = |x: usize, i: usize| {
        let d = x as i64 - i as i64;
        d * d + f[i]
    };
    let sep = |i: usize, u: usize| {
        let (i64_, u64_) = (i as i64, u as i64);
        (u64_ * u64_ - i64_ * i64_ + f[u] - f[i]).div_euclid(2 * (u64_ - i64_))
    };
    let mut s = vec![0usize; n];
    let mut t = vec![0i64; n];
    let mut q: isize = 0;
    for u in 1..n {
        while q >= 0
            && cost(t[q as usize] as usize, s[q as usize]) > cost(t[q as usize] as usize, u)
        {
            q -= 1;
        }
        if q < 0 {
            q = 0;
            s[0] = u;
        } else {
            let w = 1 + sep(s[q as usize], u);
            if w < n as i64 {
                q += 1;
                s[q as usize] = u;
                t[q as usize] = w;
            }
        }
    }
    for u in (0..n).rev() {
        out[u] = cost(u, s[q as usize]).min(FAR);
        if u as i64 == t[q as usize] {
            q -= 1;
        }
    }
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest
/// `true` voxel of `sites`. Exact; `None` when `sites` is empty.
pub fn squared_distance_transform(sites: &Mask) -> Option<Array3<i64>> {
    if !sites.iter().any(|&b| b) {
        return None;
    }
    let mut d = sites.mapv(|b| if b { 0 } else { FAR });
    for axis in 0..3 {
        let len = d.shape()[axis];
        let mut buf_in = vec![0i64; len];
        let mut buf_out = vec![0i64; len];
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in buf_in.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            envelope_1d(&buf_in, &mut buf_out);
            for (v, b) in lane.iter_mut().zip(&buf_out) {
                *v = *b;
            }
        }
    }
    Some(d)
}

/// Boundary-to-boundary distances in both directions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfaceDistanceSet {
    pub d_g_to_p: Vec<f64>,
    pub d_p_to_g: Vec<f64>,
}

/// `None` when either boundary set is empty.
pub fn surface_distances(
    pred: &Mask,
    gt: &Mask,
    voxel_mm: f64,
) -> Result<Option<SurfaceDistanceSet>> {
    check_same_shape(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    let (Some(dt_p), Some(dt_g)) = (
        squared_distance_transform(&bp),
        squared_distance_transform(&bg),
    ) else {
        return Ok(None);
    };
    let gather = |from: &Mask, dt: &Array3<i64>| -> Vec<f64> {
        Zip::from(from).and(dt).fold(Vec::new(), |mut acc, &b, &d| {
            if b {
                acc.push((d as f64).sqrt() * voxel_mm);
            }
            acc
        })
    };
    Ok(Some(SurfaceDistanceSet {
        d_g_to_p: gather(&bg, &dt_p),
        d_p_to_g: gather(&bp, &dt_g),
    }))
}

pub fn hausdorff(s: &SurfaceDistanceSet) -> f64 {
    s.d_g_to_p
        .iter()
        .chain(&s.d_p_to_g)
        .fold(0.0f64, |a, &b| a.max(b))
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Max over both directions of the per-direction 95th percentile.
pub fn hausdorff95(s: &SurfaceDistanceSet) -> f64 {
    percentile(&s.d_g_to_p, 95.0).max(percentile(&s.d_p_to_g, 95.0))
}

/// Values substituted when one or both masks are empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmptyMaskConvention {
    pub both_empty_dsc: f64,
    pub both_empty_hd: f64,
    pub one_empty_dsc: f64,
    pub one_empty_hd: f64,
}

impl Default for EmptyMaskConvention {
    fn default() -> Self {
        Self {
            both_empty_dsc: 1.0,
            both_empty_hd: 0.0,
            one_empty_dsc: 0.0,
            one_empty_hd: EMPTY_MASK_HD_PENALTY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub dsc: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn evaluate_region(pred: &Mask, gt: &Mask) -> Result<RegionScores> {
    evaluate_region_with(pred, gt, &EmptyMaskConvention::default(), 1.0)
}

pub fn evaluate_region_with(
    pred: &Mask,
    gt: &Mask,
    conv: &EmptyMaskConvention,
    voxel_mm: f64,
) -> Result<RegionScores> {
    let c = confusion(pred, gt)?;
    let pred_empty = c.tp + c.fp == 0;
    let gt_empty = c.tp + c.fn_ == 0;
    let (dsc_v, hd95) = match (pred_empty, gt_empty) {
        (true, true) => (conv.both_empty_dsc, conv.both_empty_hd),
        (true, false) | (false, true) => (conv.one_empty_dsc, conv.one_empty_hd),
        (false, false) => {
            let s = surface_distances(pred, gt, voxel_mm)?.expect("nonempty masks have boundaries");
            (dsc(&c), hausdorff95(&s))
        }
    };
    Ok(RegionScores {
        dsc: dsc_v,
        hd95,
        sensitivity: sensitivity(&c),
        specificity: specificity(&c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(shape: (usize, usize, usize), p: f64, seed: u64) -> Mask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mask::from_shape_fn(shape, |_| rng.random_bool(p))
    }

    fn brute_force_directed(from: &Mask, to: &Mask) -> Vec<f64> {
        let to_pts: Vec<_> = to
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        from.indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((a, b, c), _)| {
                to_pts
                    .iter()
                    .map(|&(x, y, z)| {
                        let d = (a as f64 - x as f64).powi(2)
                            + (b as f64 - y as f64).powi(2)
                            + (c as f64 - z as f64).powi(2);
                        d.sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn confusion_identity_and_complement() {
        let gt = random_mask((5, 6, 7), 0.3, 1);
        let k = gt.iter().filter(|&&b| b).count() as u64;
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: k,
                fp: 0,
                tn: 210 - k,
                fn_: 0
            }
        );
        let c = confusion(&gt.mapv(|b| !b), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&gt, &Mask::from_elem((5, 6, 6), false)).is_err());
    }

    #[test]
    fn dsc_values() {
        assert!(
            (dsc(&ConfusionCounts {
                tp: 2,
                fp: 1,
                tn: 0,
                fn_: 1
            }) - 4.0 / 6.0)
                .abs()
                < 1e-15
        );
        assert_eq!(dsc(&ConfusionCounts::default()), 1.0);
        let c = ConfusionCounts {
            tp: 8,
            fp: 0,
            tn: 5,
            fn_: 2,
        };
        assert_eq!(sensitivity(&c), 0.8);
        assert_eq!(specificity(&c), 1.0);
    }

    #[test]
    fn hausdorff_single_points() {
        let mut g = Mask::from_elem((6, 6, 2), false);
        let mut p = g.clone();
        g[[0, 0, 0]] = true;
        p[[3, 4, 0]] = true;
        let s = surface_distances(&p, &g, 1.0).unwrap().unwrap();
        assert_eq!(hausdorff(&s), 5.0);
        let s = surface_distances(&g, &g, 1.0).unwrap().unwrap();
        assert_eq!(hausdorff(&s), 0.0);
        assert_eq!(hausdorff95(&s), 0.0);
    }

    #[test]
    fn percentile_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 95.0) - 95.05).abs() < 1e-12);
    }

    #[test]
    fn full_volume_boundary_is_faces() {
        let m = Mask::from_elem((4, 5, 6), true);
        let b = boundary(&m);
        for ((x, y, z), &v) in b.indexed_iter() {
            let face = x == 0 || y == 0 || z == 0 || x == 3 || y == 4 || z == 5;
            assert_eq!(v, face);
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        for seed in 0..20 {
            let sites = random_mask((9, 7, 8), 0.03, seed);
            let Some(dt) = squared_distance_transform(&sites) else {
                continue;
            };
            let all = Mask::from_elem((9, 7, 8), true);
            let brute = brute_force_directed(&all, &sites);
            for (d, b) in dt.iter().zip(brute) {
                assert_eq!((*d as f64).sqrt(), b);
            }
        }
    }

    #[test]
    fn region_conventions() {
        let gt = random_mask((8, 8, 8), 0.2, 3);
        let s = evaluate_region(&gt, &gt).unwrap();
        assert_eq!(
            (s.dsc, s.hd95, s.sensitivity, s.specificity),
            (1.0, 0.0, 1.0, 1.0)
        );
        let empty = Mask::from_elem((8, 8, 8), false);
        let s = evaluate_region(&empty, &gt).unwrap();
        assert_eq!((s.dsc, s.hd95), (0.0, 373.13));
        let s = evaluate_region(&empty, &empty).unwrap();
        assert_eq!((s.dsc, s.hd95), (1.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn metric_ranges_and_symmetry(seed in 0u64..10_000, p in 0.05f64..0.6) {
            let a = random_mask((6, 7, 5), p, seed);
            let b = random_mask((6, 7, 5), p, seed ^ 0xdead);
            let ab = confusion(&a, &b).unwrap();
            let ba = confusion(&b, &a).unwrap();
            prop_assert_eq!(dsc(&ab), dsc(&ba));
            for v in [dsc(&ab), sensitivity(&ab), specificity(&ab)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(s) = surface_distances(&a, &b, 1.0).unwrap() {
                let hd = hausdorff(&s);
                let hd95 = hausdorff95(&s);
                prop_assert!(0.0 <= hd95 && hd95 <= hd);
                let rev = surface_distances(&b, &a, 1.0).unwrap().unwrap();
                prop_assert_eq!(hausdorff(&rev), hd);
            }
        }
    }
}
