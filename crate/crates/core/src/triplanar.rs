//! Planar slicing, per-plane inference, restacking and cross-plane fusion.
//!
//! Volumes are indexed `(x, y, z)`: sagittal slices fix `x`, coronal slices
//! fix `y`, axial slices fix `z`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{CaseBundle, LabelConvention, LabelVolume, Modality};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::preprocess::CropManifest;
use crate::tensor::FeatureMap;

/// Number of tissue classes predicted by the network.
pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    /// Volume axis held fixed within one slice.
    pub fn axis(self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }

    /// `(slice count, H, W)` for a volume of `shape`.
    pub fn slice_geometry(self, shape: [usize; 3]) -> (usize, usize, usize) {
        let a = self.axis();
        let rest: Vec<usize> = (0..3).filter(|&d| d != a).map(|d| shape[d]).collect();
        (shape[a], rest[0], rest[1])
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(Plane::Sagittal),
            "coronal" => Ok(Plane::Coronal),
            "axial" => Ok(Plane::Axial),
            other => Err(Error::Config(format!("unknown plane '{other}'"))),
        }
    }
}

/// A run of contiguous slices along one plane, network-ready.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarSlab {
    pub plane: Plane,
    pub start_index: usize,
    /// `(slices, 3, H, W)` in channel order T1ce, T2, FLAIR.
    pub data: Array4<f32>,
    /// `(slices, H, W)` canonical labels.
    pub labels: Option<Array3<u8>>,
}

fn require_preprocessed(case: &CaseBundle) -> Result<()> {
    match &case.crop {
        Some(m) if m.crop_shape == case.shape() => Ok(()),
        Some(m) => Err(Error::GeometryMismatch(format!(
            "case {} has shape {:?} but its crop manifest says {:?}",
            case.case_id,
            case.shape(),
            m.crop_shape
        ))),
        None => Err(Error::GeometryMismatch(format!(
            "case {} has not been preprocessed (no crop manifest)",
            case.case_id
        ))),
    }
}

fn input_views(case: &CaseBundle) -> Result<[ArrayView3<'_, f32>; 3]> {
    let [a, b, c] = Modality::NETWORK_INPUTS;
    Ok([
        case.volume(a)?.voxels.view(),
        case.volume(b)?.voxels.view(),
        case.volume(c)?.voxels.view(),
    ])
}

/// All slices of `case` along `plane`, each `(3, H, W)`.
pub fn slice_plane(case: &CaseBundle, plane: Plane) -> Result<Vec<Array3<f32>>> {
    require_preprocessed(case)?;
    let views = input_views(case)?;
    let (n, h, w) = plane.slice_geometry(case.shape());
    Ok((0..n)
        .map(|k| {
            let mut out = Array3::zeros((3, h, w));
            for (c, v) in views.iter().enumerate() {
                out.index_axis_mut(Axis(0), c)
                    .assign(&v.index_axis(Axis(plane.axis()), k));
            }
            out
        })
        .collect())
}

/// `size` contiguous slices starting at `start`.
pub fn extract_slab(
    case: &CaseBundle,
    plane: Plane,
    start: usize,
    size: usize,
) -> Result<PlanarSlab> {
    let views = input_views(case)?;
    let (n, h, w) = plane.slice_geometry(case.shape());
    if size == 0 || start + size > n {
        return Err(Error::GeometryMismatch(format!(
            "slab [{start}, {}) exceeds the {n} {plane} slices of case {}",
            start + size,
            case.case_id
        )));
    }
    let ax = Axis(plane.axis());
    let mut data = Array4::zeros((size, 3, h, w));
    for (c, v) in views.iter().enumerate() {
        for i in 0..size {
            data.slice_mut(s![i, c, .., ..])
                .assign(&v.index_axis(ax, start + i));
        }
    }
    let labels = case.labels.as_ref().map(|l| {
        let mut out = Array3::zeros((size, h, w));
        for i in 0..size {
            out.index_axis_mut(Axis(0), i)
                .assign(&l.voxels.index_axis(ax, start + i));
        }
        out
    });
    Ok(PlanarSlab {
        plane,
        start_index: start,
        data,
        labels,
    })
}

/// Per-voxel class probabilities `(C, X, Y, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub probs: Array4<f32>,
}

pub const SIMPLEX_TOL: f64 = 1e-5;

impl ProbabilityVolume {
    pub fn new(probs: Array4<f32>) -> Result<Self> {
        let v = Self { probs };
        v.check_simplex(SIMPLEX_TOL)?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let (_, a, b, c) = self.probs.dim();
        [a, b, c]
    }

    pub fn classes(&self) -> usize {
        self.probs.dim().0
    }

    /// Largest deviation of a per-voxel channel sum from 1.
    pub fn max_simplex_error(&self) -> f64 {
        let [a, b, c] = self.shape();
        let mut worst = 0.0f64;
        for x in 0..a {
            for y in 0..b {
                for z in 0..c {
                    let s: f64 = self
                        .probs
                        .slice(s![.., x, y, z])
                        .iter()
                        .map(|&p| p as f64)
                        .sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidInput("probabilities outside [0, 1]".into()));
        }
        let err = self.max_simplex_error();
        if err > tol {
            return Err(Error::InvalidInput(format!(
                "channel sums deviate from 1 by {err:e}"
            )));
        }
        Ok(())
    }

    /// Per-plane slices `(C, H, W)`, the inverse of [`restack`].
    pub fn unstack(&self, plane: Plane) -> Vec<Array3<f32>> {
        self.probs
            .axis_iter(Axis(plane.axis() + 1))
            .map(|v| v.to_owned())
            .collect()
    }
}

/// Stacks `(C, H, W)` slices back along `plane` into a volume.
pub fn restack(plane: Plane, slices: &[Array3<f32>]) -> Result<ProbabilityVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::shape("cannot restack zero slices"))?;
    let (c, h, w) = first.dim();
    if slices.iter().any(|s| s.dim() != (c, h, w)) {
        return Err(Error::shape("restacked slices differ in shape"));
    }
    let n = slices.len();
    let shape = match plane {
        Plane::Sagittal => (c, n, h, w),
        Plane::Coronal => (c, h, n, w),
        Plane::Axial => (c, h, w, n),
    };
    let mut probs = Array4::zeros(shape);
    for (k, sl) in slices.iter().enumerate() {
        probs.index_axis_mut(Axis(plane.axis() + 1), k).assign(sl);
    }
    Ok(ProbabilityVolume { probs })
}

/// Runs every slice of `plane` through the network, `batch` slices at a time.
pub fn infer_plane(
    case: &CaseBundle,
    plane: Plane,
    params: &NetworkParams,
    batch: usize,
) -> Result<ProbabilityVolume> {
    let slices = slice_plane(case, plane)?;
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch) {
        let (_, h, w) = chunk[0].dim();
        let mut x = FeatureMap::zeros((chunk.len(), 3, h, w));
        for (i, sl) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&sl.mapv(f64::from));
        }
        let probs = params.forward(&x)?;
        out.extend(probs.axis_iter(Axis(0)).map(|p| p.mapv(|v| v as f32)));
    }
    restack(plane, &out)
}

/// How per-plane probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Voxelwise arithmetic mean of the probabilities.
    #[default]
    MeanProbability,
    /// Softmax of the mean log-probability, equivalent to averaging logits.
    MeanLogit,
}

/// Fuses any nonzero number of same-shaped volumes. The per-voxel reduction
/// sums in sorted order, so the result does not depend on argument order.
pub fn fuse(volumes: &[ProbabilityVolume]) -> Result<ProbabilityVolume> {
    fuse_with(volumes, FusionMode::MeanProbability)
}

pub fn fuse_with(volumes: &[ProbabilityVolume], mode: FusionMode) -> Result<ProbabilityVolume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::shape("fuse needs at least one volume"))?;
    let dim = first.probs.dim();
    if volumes.iter().any(|v| v.probs.dim() != dim) {
        return Err(Error::shape(format!(
            "fused volumes differ in shape: {:?}",
            volumes.iter().map(|v| v.probs.dim()).collect::<Vec<_>>()
        )));
    }
    let m = volumes.len() as f64;
    let sorted_mean = |vals: &mut Vec<f64>| {
        vals.sort_by(f64::total_cmp);
        vals.iter().sum::<f64>() / m
    };
    let mut vals = Vec::with_capacity(volumes.len());
    let mut probs = Array4::<f32>::zeros(dim);
    match mode {
        FusionMode::MeanProbability => {
            for (idx, out) in probs.indexed_iter_mut() {
                vals.clear();
                vals.extend(volumes.iter().map(|v| v.probs[idx] as f64));
                *out = sorted_mean(&mut vals) as f32;
            }
        }
        FusionMode::MeanLogit => {
            let (c, a, b, d) = dim;
            let mut logits = vec![0.0f64; c];
            for x in 0..a {
                for y in 0..b {
                    for z in 0..d {
                        for (k, l) in logits.iter_mut().enumerate() {
                            vals.clear();
                            vals.extend(
                                volumes
                                    .iter()
                                    .map(|v| (v.probs[[k, x, y, z]] as f64).max(1e-30).ln()),
                            );
                            *l = sorted_mean(&mut vals);
                        }
                        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                        for (k, l) in logits.iter().enumerate() {
                            probs[[k, x, y, z]] = ((l - mx).exp() / sum) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(ProbabilityVolume { probs })
}

/// Argmax labels (ties go to the lower class id).
pub fn argmax_labels(fused: &ProbabilityVolume) -> Array3<u8> {
    let [a, b, c] = fused.shape();
    Array3::from_shape_fn((a, b, c), |(x, y, z)| {
        let mut best = 0usize;
        for k in 1..fused.classes() {
            if fused.probs[[k, x, y, z]] > fused.probs[[best, x, y, z]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Argmax, then un-crop to the original geometry with background padding.
pub fn finalize(fused: &ProbabilityVolume, manifest: Option<&CropManifest>) -> Result<LabelVolume> {
    let labels = argmax_labels(fused);
    let voxels = match manifest {
        Some(m) => m.uncrop(&labels, 0)?,
        None => labels,
    };
    LabelVolume::new(voxels, LabelConvention::Canonical)
}

/// Full triplanar pipeline for one preprocessed case: infer each available
/// plane, fuse, finalize back to the original geometry.
pub fn segment_case(
    case: &CaseBundle,
    models: &[(Plane, &NetworkParams)],
    mode: FusionMode,
    batch: usize,
) -> Result<LabelVolume> {
    let vols = models
        .iter()
        .map(|(plane, params)| infer_plane(case, *plane, params, batch))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_with(&vols, mode)?;
    finalize(&fused, case.crop.as_ref())
}

/// One 2D label slice along `plane`.
pub fn label_slice(labels: &Array3<u8>, plane: Plane, index: usize) -> Array2<u8> {
    labels.index_axis(Axis(plane.axis()), index).to_owned()
}
