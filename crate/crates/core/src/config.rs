//! Run configuration: one TOML document that fully determines a run, plus
//! the on-disk layout of everything a run produces.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `GLIOMASEG_DATA_ROOT` environment variable, then command-line flags
//! (`--set key.path=value` and the dedicated flags of each subcommand).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::preprocess::PreprocessConfig;
use crate::survival::SurvTrainConfig;
use crate::training::{default_iterations, SegTrainConfig};
use crate::triplanar::{FusionMode, Plane};

pub const DATA_ROOT_ENV: &str = "GLIOMASEG_DATA_ROOT";
/// File name of the effective config echoed into every output directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Optimizer schedule of one planar model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneRecipe {
    pub lr: f64,
    pub batch_slabs: usize,
    pub slab_size: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
}

impl PlaneRecipe {
    pub fn for_plane(plane: Plane) -> Self {
        let d = SegTrainConfig::for_plane(plane);
        Self {
            lr: d.lr,
            batch_slabs: d.batch_slabs,
            slab_size: d.slab_size,
            iterations: default_iterations(plane),
            checkpoint_every: d.checkpoint_every,
            grad_clip: d.grad_clip,
        }
    }
}

impl Default for PlaneRecipe {
    fn default() -> Self {
        Self::for_plane(Plane::Sagittal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationRecipes {
    pub sagittal: PlaneRecipe,
    pub coronal: PlaneRecipe,
    pub axial: PlaneRecipe,
}

impl Default for SegmentationRecipes {
    fn default() -> Self {
        Self {
            sagittal: PlaneRecipe::for_plane(Plane::Sagittal),
            coronal: PlaneRecipe::for_plane(Plane::Coronal),
            axial: PlaneRecipe::for_plane(Plane::Axial),
        }
    }
}

impl SegmentationRecipes {
    pub fn get(&self, plane: Plane) -> &PlaneRecipe {
        match plane {
            Plane::Sagittal => &self.sagittal,
            Plane::Coronal => &self.coronal,
            Plane::Axial => &self.axial,
        }
    }

    pub fn get_mut(&mut self, plane: Plane) -> &mut PlaneRecipe {
        match plane {
            Plane::Sagittal => &mut self.sagittal,
            Plane::Coronal => &mut self.coronal,
            Plane::Axial => &mut self.axial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub fusion: FusionMode,
    /// Slices per forward pass.
    pub batch: usize,
    /// Planes whose models are fused; a single plane is the degenerate case.
    pub planes: Vec<Plane>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::MeanProbability,
            batch: 8,
            planes: Plane::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Raw dataset in the BraTS directory layout.
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub segmentation: SegmentationRecipes,
    pub inference: InferenceConfig,
    pub survival: SurvTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            workers: 1,
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            segmentation: SegmentationRecipes::default(),
            inference: InferenceConfig::default(),
            survival: SurvTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.inference.planes.is_empty() || self.inference.batch == 0 {
            return Err(Error::Config(
                "inference needs at least one plane and a positive batch".into(),
            ));
        }
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        for plane in Plane::ALL {
            self.seg_config(plane).validate()?;
        }
        self.survival.validate()
    }

    /// Full training config of one plane.
    pub fn seg_config(&self, plane: Plane) -> SegTrainConfig {
        let r = self.segmentation.get(plane);
        SegTrainConfig {
            plane,
            lr: r.lr,
            batch_slabs: r.batch_slabs,
            slab_size: r.slab_size,
            iterations: r.iterations,
            seed: self.seed,
            checkpoint_every: r.checkpoint_every,
            grad_clip: r.grad_clip,
            loss: self.loss.clone(),
            augment: self.augment.clone(),
        }
    }

    /// Parses a config document; keys it omits keep their defaults,
    /// including the per-plane recipe defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Toml(e.to_string()))?;
        from_table(merged_with_defaults(table)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Resolves the effective config: the file (or defaults), the data-root
    /// environment override, then `key.path=value` overrides in order.
    pub fn resolve(
        path: Option<&Path>,
        env_data_root: Option<&str>,
        overrides: &[String],
    ) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Toml(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut value = merged_with_defaults(file)?;
        if let Some(root) = env_data_root.filter(|r| !r.is_empty()) {
            value.insert("data_root".into(), toml::Value::String(root.into()));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg = from_table(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.output_dir)
    }

    /// Writes the effective config into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))
}

fn merged_with_defaults(over: toml::Table) -> Result<toml::Table> {
    let mut base =
        toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Toml(e.to_string()))?;
    merge(&mut base, over);
    Ok(base)
}

/// Recursively overlays `over` onto `base`; non-table values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key '{key}' descends into a non-table"))
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Paths of everything a run writes under its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    /// Preprocessed cases in the BraTS layout, with crop sidecars.
    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    /// Output directory of one planar model (checkpoint and log).
    pub fn plane_model(&self, plane: Plane) -> PathBuf {
        self.root.join("models").join(plane.name())
    }

    pub fn survival_model(&self) -> PathBuf {
        self.root.join("models").join("survival")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
}
