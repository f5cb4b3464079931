//! Synthetic BraTS-like cases: nested ellipsoidal tumors inside an
//! ellipsoidal brain with modality-dependent intensities.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_case, write_clinical_csv, CaseBundle, ClinicalInfo, LabelConvention, LabelVolume,
    Modality, ModalityVolume, SURVIVAL_CSV,
};
use crate::error::{Error, Result};

/// Tissue classes painted into a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Brain,
    Edema,
    Necrosis,
    Enhancing,
}

/// Mean intensity of each tissue for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub brain: f32,
    pub edema: f32,
    pub necrosis: f32,
    pub enhancing: f32,
}

impl IntensityProfile {
    pub fn value(&self, t: Tissue) -> f32 {
        match t {
            Tissue::Background => 0.0,
            Tissue::Brain => self.brain,
            Tissue::Edema => self.edema,
            Tissue::Necrosis => self.necrosis,
            Tissue::Enhancing => self.enhancing,
        }
    }

    /// Default contrast of `m`, roughly mimicking MRI appearance.
    pub fn default_for(m: Modality) -> Self {
        let [brain, edema, necrosis, enhancing] = match m {
            Modality::T1 => [500.0, 400.0, 300.0, 500.0],
            Modality::T1ce => [450.0, 400.0, 250.0, 950.0],
            Modality::T2 => [400.0, 800.0, 900.0, 600.0],
            Modality::Flair => [400.0, 900.0, 550.0, 700.0],
        };
        Self {
            brain,
            edema,
            necrosis,
            enhancing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub center: [f64; 3],
    /// Base radii of the enhancing core, tumor core and whole tumor.
    pub et_radius: f64,
    pub tc_radius: f64,
    pub wt_radius: f64,
    /// Per-axis stretch applied to every tumor radius.
    pub anisotropy: [f64; 3],
    pub brain_radii: [f64; 3],
    pub intensities: [IntensityProfile; 4],
    /// Noise std as a fraction of the brain intensity.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            center: [32.0, 32.0, 32.0],
            et_radius: 6.0,
            tc_radius: 9.0,
            wt_radius: 13.0,
            anisotropy: [1.0, 0.85, 0.75],
            brain_radii: [24.0, 22.0, 20.0],
            intensities: Modality::ALL.map(IntensityProfile::default_for),
            noise_std: 0.03,
            seed: 0,
        }
    }
}

fn inside(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3)
        .map(|d| ((p[d] - center[d]) / radii[d]).powi(2))
        .sum::<f64>()
        <= 1.0
}

impl PhantomSpec {
    fn radii(&self, r: f64) -> [f64; 3] {
        [0, 1, 2].map(|d| r * self.anisotropy[d])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.et_radius
            && self.et_radius < self.tc_radius
            && self.tc_radius < self.wt_radius)
        {
            return Err(Error::Config(format!(
                "phantom radii must be strictly nested, got et {} tc {} wt {}",
                self.et_radius, self.tc_radius, self.wt_radius
            )));
        }
        if self.anisotropy.iter().any(|a| !(*a > 0.0)) || self.noise_std < 0.0 {
            return Err(Error::Config(
                "anisotropy must be positive and noise_std non-negative".into(),
            ));
        }
        let wt = self.radii(self.wt_radius);
        for d in 0..3 {
            let n = self.shape[d] as f64;
            if self.center[d] - wt[d] < 0.0 || self.center[d] + wt[d] > n - 1.0 {
                return Err(Error::Config(format!(
                    "whole tumor does not fit along axis {d}"
                )));
            }
            if wt[d] > self.brain_radii[d] {
                return Err(Error::Config(format!(
                    "whole tumor exceeds the brain along axis {d}"
                )));
            }
        }
        Ok(())
    }

    /// Tissue at voxel `p` (innermost region wins).
    pub fn tissue(&self, p: [usize; 3]) -> Tissue {
        let p = p.map(|v| v as f64);
        if inside(p, self.center, self.radii(self.et_radius)) {
            Tissue::Enhancing
        } else if inside(p, self.center, self.radii(self.tc_radius)) {
            Tissue::Necrosis
        } else if inside(p, self.center, self.radii(self.wt_radius)) {
            Tissue::Edema
        } else if inside(p, self.center, self.brain_radii) {
            Tissue::Brain
        } else {
            Tissue::Background
        }
    }
}

fn canonical_label(t: Tissue) -> u8 {
    match t {
        Tissue::Background | Tissue::Brain => 0,
        Tissue::Necrosis => 1,
        Tissue::Edema => 2,
        Tissue::Enhancing => 3,
    }
}

/// Builds a four-modality phantom with canonical labels.
pub fn make_phantom(case_id: &str, spec: &PhantomSpec) -> Result<CaseBundle> {
    spec.validate()?;
    let [a, b, c] = spec.shape;
    let tissue = Array3::from_shape_fn((a, b, c), |(x, y, z)| spec.tissue([x, y, z]));
    let labels = LabelVolume::new(tissue.mapv(canonical_label), LabelConvention::Canonical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut volumes = Vec::with_capacity(4);
    for (m, profile) in Modality::ALL.iter().zip(&spec.intensities) {
        let std = spec.noise_std * profile.brain as f64;
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let voxels = tissue.mapv(|t| {
            let base = profile.value(t);
            if t == Tissue::Background || std == 0.0 {
                base
            } else {
                // keep brain voxels strictly positive so they count as brain
                (base + normal.sample(&mut rng) as f32).max(1.0)
            }
        });
        volumes.push(ModalityVolume::new(*m, voxels)?);
    }
    CaseBundle::new(case_id, volumes, Some(labels))
}

/// `n` phantoms with seeded jitter of center and radii around `base`, plus
/// synthetic clinical data (survival shortens with tumor size).
pub fn make_phantom_set(n: usize, base: &PhantomSpec) -> Result<Vec<CaseBundle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    (0..n)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = base.seed.wrapping_add(i as u64 + 1);
            let scale = rng.random_range(0.95..1.05);
            spec.et_radius *= scale;
            spec.tc_radius *= scale;
            spec.wt_radius *= scale;
            for d in 0..3 {
                spec.center[d] += rng.random_range(-2.0..=2.0);
            }
            let age = rng.random_range(35.0..80.0f64).round();
            let days = (900.0 - 35.0 * spec.wt_radius - 3.0 * age + rng.random_range(-40.0..40.0))
                .max(20.0)
                .round();
            let case = make_phantom(&format!("phantom_{i:03}"), &spec)?;
            Ok(case.with_clinical(ClinicalInfo {
                age: Some(age),
                survival_days: Some(days),
                resection_status: Some("GTR".into()),
            }))
        })
        .collect()
}

/// Writes bundles in the BraTS layout plus the survival CSV.
pub fn write_dataset(root: &Path, cases: &[CaseBundle]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for c in cases {
        write_case(root, c)?;
    }
    let rows: Vec<_> = cases
        .iter()
        .map(|c| (c.case_id.clone(), c.clinical.clone()))
        .collect();
    write_clinical_csv(&root.join(SURVIVAL_CSV), &rows)
}
