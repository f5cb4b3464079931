//! Intensity pipeline: percentile clipping, per-slice z-scoring, min-max
//! scaling and center cropping.
//!
//! Bias-field correction is not performed here; inputs are expected to be
//! corrected upstream (see [`BiasHook`]).

use std::path::Path;

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{CaseBundle, LabelVolume, Modality, ModalityVolume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BiasHook {
    None,
    /// Volumes were bias-corrected by an external tool before ingestion.
    #[default]
    ExternalPrecorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub crop_shape: [usize; 3],
    pub bias_hook: BiasHook,
    pub std_floor: f64,
    /// Axis along which slices are z-scored (2 = axial).
    pub zscore_axis: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo_pct: 0.01,
            clip_hi_pct: 0.99,
            crop_shape: [190, 190, 140],
            bias_hook: BiasHook::ExternalPrecorrected,
            std_floor: 1e-6,
            zscore_axis: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.clip_lo_pct
            && self.clip_lo_pct < self.clip_hi_pct
            && self.clip_hi_pct <= 1.0)
        {
            return Err(Error::Config(format!(
                "clip percentiles must satisfy 0 <= lo < hi <= 1, got {} / {}",
                self.clip_lo_pct, self.clip_hi_pct
            )));
        }
        if self.crop_shape.contains(&0) {
            return Err(Error::Config("crop_shape entries must be positive".into()));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::Config("std_floor must be positive".into()));
        }
        if self.zscore_axis > 2 {
            return Err(Error::Config("zscore_axis must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of sorted values.
fn quantile_sorted(sorted: &[f32], q: f64) -> f32 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    (a + (b - a) * (rank - lo as f64)) as f32
}

/// Clamps nonzero voxels to the `[lo, hi]` percentiles of the nonzero
/// intensity distribution. Background zeros stay zero.
pub fn clip_percentiles(vol: &ModalityVolume, cfg: &PreprocessConfig) -> Result<ModalityVolume> {
    let mut brain: Vec<f32> = vol.voxels.iter().copied().filter(|&v| v != 0.0).collect();
    if brain.is_empty() {
        return Err(Error::EmptyBrain);
    }
    brain.sort_by(|a, b| a.total_cmp(b));
    let lo = quantile_sorted(&brain, cfg.clip_lo_pct);
    let hi = quantile_sorted(&brain, cfg.clip_hi_pct);
    Ok(ModalityVolume {
        modality: vol.modality,
        voxels: vol
            .voxels
            .mapv(|v| if v == 0.0 { 0.0 } else { v.clamp(lo, hi) }),
    })
}

/// Standardizes every 2D slice along `axis` independently; slices whose
/// standard deviation falls below `cfg.std_floor` become all zeros.
pub fn zscore_slices(vol: &ModalityVolume, axis: usize, cfg: &PreprocessConfig) -> ModalityVolume {
    let mut out = vol.voxels.clone();
    for mut slice in out.axis_iter_mut(Axis(axis)) {
        let n = slice.len() as f64;
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = slice
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std < cfg.std_floor {
            slice.fill(0.0);
        } else {
            slice.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
        }
    }
    ModalityVolume {
        modality: vol.modality,
        voxels: out,
    }
}

/// Affine map of the whole volume onto `[0, 1]`; constant volumes map to 0.
pub fn minmax_scale(vol: &ModalityVolume) -> ModalityVolume {
    let (mn, mx) = vol
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = mx as f64 - mn as f64;
    let voxels = if range > 0.0 {
        vol.voxels
            .mapv(|v| (((v as f64 - mn as f64) / range) as f32).clamp(0.0, 1.0))
    } else {
        Array3::zeros(vol.voxels.raw_dim())
    };
    ModalityVolume {
        modality: vol.modality,
        voxels,
    }
}

/// Where a cropped volume sits inside its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropManifest {
    pub original_shape: [usize; 3],
    pub offsets: [usize; 3],
    pub crop_shape: [usize; 3],
}

impl CropManifest {
    /// Center crop with offsets `floor((src - crop) / 2)`.
    pub fn centered(source: [usize; 3], crop: [usize; 3]) -> Result<Self> {
        if (0..3).any(|i| crop[i] > source[i]) {
            return Err(Error::CropTooLarge {
                crop,
                source_shape: source,
            });
        }
        Ok(Self {
            original_shape: source,
            offsets: [0, 1, 2].map(|i| (source[i] - crop[i]) / 2),
            crop_shape: crop,
        })
    }

    pub fn crop<T: Clone>(&self, arr: &Array3<T>) -> Result<Array3<T>> {
        let (a, b, c) = arr.dim();
        if [a, b, c] != self.original_shape {
            return Err(Error::GeometryMismatch(format!(
                "crop manifest expects {:?}, volume is {:?}",
                self.original_shape,
                [a, b, c]
            )));
        }
        let [o0, o1, o2] = self.offsets;
        let [c0, c1, c2] = self.crop_shape;
        Ok(arr
            .slice(s![o0..o0 + c0, o1..o1 + c1, o2..o2 + c2])
            .to_owned())
    }

    /// Pads a cropped array back to the original geometry with `fill`.
    pub fn uncrop<T: Clone>(&self, arr: &Array3<T>, fill: T) -> Result<Array3<T>> {
        let (a, b, c) = arr.dim();
        if [a, b, c] != self.crop_shape {
            return Err(Error::GeometryMismatch(format!(
                "crop manifest expects cropped shape {:?}, got {:?}",
                self.crop_shape,
                [a, b, c]
            )));
        }
        let [s0, s1, s2] = self.original_shape;
        let mut out = Array3::from_elem((s0, s1, s2), fill);
        let [o0, o1, o2] = self.offsets;
        out.slice_mut(s![o0..o0 + a, o1..o1 + b, o2..o2 + c])
            .assign(arr);
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn crop_volume(
    vol: &ModalityVolume,
    cfg: &PreprocessConfig,
) -> Result<(ModalityVolume, CropManifest)> {
    let manifest = CropManifest::centered(vol.shape(), cfg.crop_shape)?;
    Ok((
        ModalityVolume {
            modality: vol.modality,
            voxels: manifest.crop(&vol.voxels)?,
        },
        manifest,
    ))
}

pub fn crop_labels(labels: &LabelVolume, manifest: &CropManifest) -> Result<LabelVolume> {
    Ok(LabelVolume {
        voxels: manifest.crop(&labels.voxels)?,
        convention: labels.convention,
    })
}

/// Full pipeline on the network modalities: clip, per-slice z-score along
/// `cfg.zscore_axis`, min-max, crop. Labels get the same crop.
pub fn preprocess_case(bundle: &CaseBundle, cfg: &PreprocessConfig) -> Result<CaseBundle> {
    cfg.validate()?;
    let manifest = CropManifest::centered(bundle.shape(), cfg.crop_shape)?;
    let mut volumes = Vec::with_capacity(3);
    for m in Modality::NETWORK_INPUTS {
        let v = bundle.volume(m)?;
        let v = clip_percentiles(v, cfg)?;
        let v = zscore_slices(&v, cfg.zscore_axis, cfg);
        let v = minmax_scale(&v);
        volumes.push(ModalityVolume {
            modality: m,
            voxels: manifest.crop(&v.voxels)?,
        });
    }
    let labels = bundle
        .labels
        .as_ref()
        .map(|l| crop_labels(l, &manifest))
        .transpose()?;
    let mut out = CaseBundle::new(bundle.case_id.clone(), volumes, labels)?;
    out.clinical = bundle.clinical.clone();
    out.header = bundle.header.clone();
    out.crop = Some(manifest);
    Ok(out)
}
