//! Case ingestion and output: BraTS-style directory layout, label
//! conventions, clinical CSV and NIfTI volume I/O.
//!
//! Volumes are kept in the file's index order, which for BraTS data is
//! `(sagittal, coronal, axial)` = `(axis0, axis1, axis2)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::CropManifest;

pub const SURVIVAL_CSV: &str = "survival_info.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];
    /// Modalities the network consumes, in channel order.
    pub const NETWORK_INPUTS: [Modality; 3] = [Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityVolume {
    pub modality: Modality,
    pub voxels: Array3<f32>,
}

impl ModalityVolume {
    pub fn new(modality: Modality, voxels: Array3<f32>) -> Result<Self> {
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{modality} volume has non-finite voxels"
            )));
        }
        if voxels.is_empty() {
            return Err(Error::shape(format!("{modality} volume is empty")));
        }
        Ok(Self { modality, voxels })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.voxels.dim();
        [a, b, c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelConvention {
    /// File convention: 0 background, 1 necrotic/non-enhancing core,
    /// 2 edema, 4 enhancing tumor.
    Raw,
    /// Contiguous ids 0..=3 (enhancing tumor = 3).
    Canonical,
}

impl LabelConvention {
    fn allows(self, id: u8) -> bool {
        match self {
            LabelConvention::Raw => matches!(id, 0 | 1 | 2 | 4),
            LabelConvention::Canonical => id <= 3,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            LabelConvention::Raw => "{0,1,2,4}",
            LabelConvention::Canonical => "{0,1,2,3}",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub voxels: Array3<u8>,
    pub convention: LabelConvention,
}

impl LabelVolume {
    pub fn new(voxels: Array3<u8>, convention: LabelConvention) -> Result<Self> {
        if let Some(&bad) = voxels.iter().find(|&&v| !convention.allows(v)) {
            return Err(Error::InvalidLabel {
                id: bad,
                allowed: convention.describe(),
            });
        }
        Ok(Self { voxels, convention })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.voxels.dim();
        [a, b, c]
    }

    pub fn class_counts(&self) -> [u64; 5] {
        let mut counts = [0u64; 5];
        for &v in &self.voxels {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Raw (`{0,1,2,4}`) to canonical (`{0,1,2,3}`). Already-canonical volumes
/// pass through unchanged.
pub fn remap_labels(raw: &LabelVolume) -> Result<LabelVolume> {
    match raw.convention {
        LabelConvention::Canonical => Ok(raw.clone()),
        LabelConvention::Raw => {
            if let Some(&bad) = raw
                .voxels
                .iter()
                .find(|&&v| !LabelConvention::Raw.allows(v))
            {
                return Err(Error::InvalidLabel {
                    id: bad,
                    allowed: LabelConvention::Raw.describe(),
                });
            }
            Ok(LabelVolume {
                voxels: raw.voxels.mapv(|v| if v == 4 { 3 } else { v }),
                convention: LabelConvention::Canonical,
            })
        }
    }
}

/// Inverse of [`remap_labels`].
pub fn to_raw_labels(canonical: &LabelVolume) -> Result<LabelVolume> {
    match canonical.convention {
        LabelConvention::Raw => Ok(canonical.clone()),
        LabelConvention::Canonical => LabelVolume::new(
            canonical.voxels.mapv(|v| if v == 3 { 4 } else { v }),
            LabelConvention::Raw,
        ),
    }
}

/// Binary whole-tumor / tumor-core / enhancing-tumor masks.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub wt: Array3<bool>,
    pub tc: Array3<bool>,
    pub et: Array3<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        })
    }
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &Array3<bool> {
        match region {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

/// WT = {1,2,3}, TC = {1,3}, ET = {3} on canonical labels.
pub fn derive_region_masks(canonical: &LabelVolume) -> Result<RegionMasks> {
    let labels = remap_labels(canonical)?;
    let v = &labels.voxels;
    Ok(RegionMasks {
        wt: v.mapv(|l| l != 0),
        tc: v.mapv(|l| l == 1 || l == 3),
        et: v.mapv(|l| l == 3),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalInfo {
    pub age: Option<f64>,
    pub survival_days: Option<f64>,
    pub resection_status: Option<String>,
}

/// Clinical rows keyed by case id.
pub type ClinicalTable = HashMap<String, ClinicalInfo>;

/// Reads `(case_id, age, survival_days, resection_status)` by column
/// position; the header row is skipped. Non-numeric survival entries
/// (e.g. "ALIVE (361 days later)") are kept with `survival_days = None`.
pub fn read_clinical_csv(path: &Path) -> Result<ClinicalTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut table = ClinicalTable::new();
    for row in reader.records() {
        let row = row?;
        let Some(id) = row.get(0).filter(|s| !s.is_empty()) else {
            continue;
        };
        let num = |i: usize| {
            row.get(i)
                .and_then(|s| f64::from_str(s).ok())
                .filter(|v| v.is_finite())
        };
        let status = row.get(3).filter(|s| !s.is_empty()).map(str::to_string);
        table.insert(
            id.to_string(),
            ClinicalInfo {
                age: num(1),
                survival_days: num(2),
                resection_status: status,
            },
        );
    }
    Ok(table)
}

pub fn write_clinical_csv(path: &Path, rows: &[(String, ClinicalInfo)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["case_id", "age", "survival_days", "resection_status"])?;
    for (id, info) in rows {
        w.write_record([
            id.clone(),
            info.age.map(|v| v.to_string()).unwrap_or_default(),
            info.survival_days
                .map(|v| v.to_string())
                .unwrap_or_default(),
            info.resection_status.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One patient: co-registered modality volumes, optional canonical labels
/// and clinical fields.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    pub case_id: String,
    pub volumes: BTreeMap<Modality, ModalityVolume>,
    /// Always in the canonical convention.
    pub labels: Option<LabelVolume>,
    pub clinical: ClinicalInfo,
    /// Geometry reference for writing outputs.
    pub header: Option<NiftiHeader>,
    /// Present once the case went through cropping.
    pub crop: Option<CropManifest>,
}

impl CaseBundle {
    pub fn new(
        case_id: impl Into<String>,
        volumes: impl IntoIterator<Item = ModalityVolume>,
        labels: Option<LabelVolume>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let volumes: BTreeMap<_, _> = volumes.into_iter().map(|v| (v.modality, v)).collect();
        for m in Modality::NETWORK_INPUTS {
            if !volumes.contains_key(&m) {
                return Err(Error::MissingModality {
                    case_id,
                    modality: m.to_string(),
                });
            }
        }
        let labels = labels.map(|l| remap_labels(&l)).transpose()?;
        let bundle = Self {
            case_id,
            volumes,
            labels,
            clinical: ClinicalInfo::default(),
            header: None,
            crop: None,
        };
        bundle.check_geometry()?;
        Ok(bundle)
    }

    pub fn with_clinical(mut self, clinical: ClinicalInfo) -> Self {
        self.clinical = clinical;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.volumes
            .values()
            .next()
            .expect("bundle has volumes")
            .shape()
    }

    pub fn volume(&self, m: Modality) -> Result<&ModalityVolume> {
        self.volumes.get(&m).ok_or_else(|| Error::MissingModality {
            case_id: self.case_id.clone(),
            modality: m.to_string(),
        })
    }

    pub fn check_geometry(&self) -> Result<()> {
        let shape = self.shape();
        for v in self.volumes.values() {
            if v.shape() != shape {
                return Err(Error::GeometryMismatch(format!(
                    "case {}: {} has shape {:?}, expected {:?}",
                    self.case_id,
                    v.modality,
                    v.shape(),
                    shape
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.shape() != shape {
                return Err(Error::GeometryMismatch(format!(
                    "case {}: labels have shape {:?}, expected {:?}",
                    self.case_id,
                    l.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

pub fn case_file(root: &Path, case_id: &str, suffix: &str) -> PathBuf {
    root.join(case_id)
        .join(format!("{case_id}_{suffix}.nii.gz"))
}

fn find_case_file(root: &Path, case_id: &str, suffix: &str) -> Option<PathBuf> {
    let gz = case_file(root, case_id, suffix);
    if gz.is_file() {
        return Some(gz);
    }
    let plain = root.join(case_id).join(format!("{case_id}_{suffix}.nii"));
    plain.is_file().then_some(plain)
}

/// Reads a NIfTI volume as a 3D float array plus its header.
pub fn read_volume(path: &Path) -> Result<(Array3<f32>, NiftiHeader)> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let data = obj.into_volume().into_ndarray::<f32>()?;
    let shape = data.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(Error::CorruptVolume {
            path: path.to_path_buf(),
            reason: format!("expected a 3D volume, got shape {shape:?}"),
        });
    }
    let mut data = data;
    while data.ndim() > 3 {
        data = data.index_axis_move(Axis(3), 0);
    }
    let data = data
        .into_dimensionality::<Ix3>()
        .expect("trailing axes removed");
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptVolume {
            path: path.to_path_buf(),
            reason: "non-finite voxel values".into(),
        });
    }
    Ok((data, header))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn map_write_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::Nifti(other),
    }
}

pub fn write_volume(
    path: &Path,
    voxels: &Array3<f32>,
    reference: Option<&NiftiHeader>,
) -> Result<()> {
    ensure_parent(path)?;
    let mut opts = nifti::writer::WriterOptions::new(path);
    if let Some(h) = reference {
        opts = opts.reference_header(h);
    }
    opts.write_nifti(voxels).map_err(|e| map_write_err(path, e))
}

pub fn write_labels(
    path: &Path,
    voxels: &Array3<u8>,
    reference: Option<&NiftiHeader>,
) -> Result<()> {
    ensure_parent(path)?;
    let mut opts = nifti::writer::WriterOptions::new(path);
    if let Some(h) = reference {
        opts = opts.reference_header(h);
    }
    opts.write_nifti(voxels).map_err(|e| map_write_err(path, e))
}

fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (data, _) = read_volume(path)?;
    let mut bad = None;
    let voxels = data.mapv(|v| {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            bad = Some(v);
            0
        } else {
            v as u8
        }
    });
    if let Some(v) = bad {
        return Err(Error::CorruptVolume {
            path: path.to_path_buf(),
            reason: format!("non-integer label value {v}"),
        });
    }
    LabelVolume::new(voxels, LabelConvention::Raw)
}

/// Loads `<root>/<case_id>/<case_id>_<modality>.nii.gz` (+ optional `_seg`)
/// and attaches clinical fields from `<root>/survival_info.csv` when present.
pub fn load_case(root: &Path, case_id: &str) -> Result<CaseBundle> {
    let csv = root.join(SURVIVAL_CSV);
    let table = if csv.is_file() {
        Some(read_clinical_csv(&csv)?)
    } else {
        None
    };
    load_case_with(root, case_id, table.as_ref())
}

pub fn load_case_with(
    root: &Path,
    case_id: &str,
    clinical: Option<&ClinicalTable>,
) -> Result<CaseBundle> {
    let mut volumes = Vec::new();
    let mut header = None;
    for m in Modality::ALL {
        match find_case_file(root, case_id, m.suffix()) {
            Some(path) => {
                let (data, h) = read_volume(&path)?;
                header.get_or_insert(h);
                volumes.push(ModalityVolume {
                    modality: m,
                    voxels: data,
                });
            }
            None if m == Modality::T1 => {}
            None => {
                return Err(Error::MissingModality {
                    case_id: case_id.to_string(),
                    modality: m.to_string(),
                })
            }
        }
    }
    let labels = find_case_file(root, case_id, "seg")
        .map(|p| read_labels(&p))
        .transpose()?;
    let mut bundle = CaseBundle::new(case_id, volumes, labels)?;
    bundle.header = header;
    if let Some(info) = clinical.and_then(|t| t.get(case_id)) {
        bundle.clinical = info.clone();
    }
    let manifest = root.join(case_id).join(format!("{case_id}_crop.json"));
    if manifest.is_file() {
        bundle.crop = Some(CropManifest::read(&manifest)?);
    }
    Ok(bundle)
}

/// Case ids under `root`: every subdirectory containing a FLAIR volume.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().to_string();
        if find_case_file(root, &id, Modality::Flair.suffix()).is_some() {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

/// Writes canonical labels in the file convention (3 -> 4) as
/// `<out_dir>/<case_id>.nii.gz`.
pub fn save_segmentation(
    case_id: &str,
    canonical: &LabelVolume,
    out_dir: &Path,
    reference: Option<&NiftiHeader>,
) -> Result<PathBuf> {
    let raw = to_raw_labels(canonical)?;
    let path = out_dir.join(format!("{case_id}.nii.gz"));
    write_labels(&path, &raw.voxels, reference)?;
    Ok(path)
}

/// Reads a segmentation written by [`save_segmentation`] back into canonical ids.
pub fn load_segmentation(path: &Path) -> Result<LabelVolume> {
    remap_labels(&read_labels(path)?)
}

/// Writes a bundle in the directory layout read by [`load_case`].
pub fn write_case(root: &Path, bundle: &CaseBundle) -> Result<()> {
    for v in bundle.volumes.values() {
        write_volume(
            &case_file(root, &bundle.case_id, v.modality.suffix()),
            &v.voxels,
            bundle.header.as_ref(),
        )?;
    }
    if let Some(l) = &bundle.labels {
        let raw = to_raw_labels(l)?;
        write_labels(
            &case_file(root, &bundle.case_id, "seg"),
            &raw.voxels,
            bundle.header.as_ref(),
        )?;
    }
    if let Some(c) = &bundle.crop {
        c.write(
            &root
                .join(&bundle.case_id)
                .join(format!("{}_crop.json", bundle.case_id)),
        )?;
    }
    Ok(())
}
