//! Per-plane segmentation training: slab sampling, batch assembly, Adam
//! updates, checkpointing and resumption.
//!
//! One iteration is one optimizer update on one batch of `batch_slabs`
//! slabs, flattened to `batch_slabs * slab_size` 2D samples. All randomness
//! of iteration `i` comes from streams forked off `(seed, i)`, so a resumed
//! run needs no saved rng state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, fork_rng, AugmentConfig};
use crate::checkpoint::{self, assign_tensors, config_hash, read_tensors, write_tensors};
use crate::data::CaseBundle;
use crate::error::{Error, Result};
use crate::losses::{one_hot, total_loss_grad, LossConfig};
use crate::network::{NetworkConfig, NetworkParams, Parameters};
use crate::tensor::FeatureMap;
use crate::triplanar::{extract_slab, PlanarSlab, Plane, N_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub plane: Plane,
    pub lr: f64,
    pub batch_slabs: usize,
    pub slab_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Checkpoint every this many iterations (and at completion).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self::for_plane(Plane::Sagittal)
    }
}

impl SegTrainConfig {
    /// Default recipe: 1300 iterations for sagittal, 800 otherwise.
    pub fn for_plane(plane: Plane) -> Self {
        Self {
            plane,
            lr: 1e-5,
            batch_slabs: 4,
            slab_size: 8,
            iterations: default_iterations(plane),
            seed: 0,
            checkpoint_every: 100,
            grad_clip: None,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_slabs == 0 || self.slab_size == 0 {
            return Err(Error::Config(
                "batch_slabs and slab_size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

pub fn default_iterations(plane: Plane) -> usize {
    match plane {
        Plane::Sagittal => 1300,
        Plane::Coronal | Plane::Axial => 800,
    }
}

/// Adam with bias correction. Moments are stored by tensor position in the
/// model's [`Parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let grads = grads.named_tensors();
        let mut targets = params.named_tensors_mut();
        if grads.len() != targets.len() || targets.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer state does not match the parameters",
            ));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, ((_, p), (_, g))) in targets.iter_mut().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "optimizer state does not match the parameters",
                ));
            }
            ndarray::Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }

    pub fn named_tensors<'a>(
        &'a self,
        names: &[String],
    ) -> Vec<(String, ndarray::ArrayViewD<'a, f64>)> {
        let m = names
            .iter()
            .zip(&self.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t.view()));
        let v = names
            .iter()
            .zip(&self.v)
            .map(|(n, t)| (format!("adam.v.{n}"), t.view()));
        m.chain(v).collect()
    }

    fn restore(
        &mut self,
        names: &[String],
        tensors: &[(String, ArrayD<f64>)],
        step: u64,
    ) -> Result<()> {
        for (kind, store) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (n, slot) in names.iter().zip(store.iter_mut()) {
                let key = format!("adam.{kind}.{n}");
                let src = tensors
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("tensor '{key}' missing from checkpoint"))
                    })?;
                if src.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{key}' has the wrong shape"
                    )));
                }
                slot.assign(src);
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Contiguous slab with a uniformly drawn start index.
pub fn sample_slab<R: Rng + ?Sized>(
    case: &CaseBundle,
    plane: Plane,
    rng: &mut R,
    slab_size: usize,
) -> Result<PlanarSlab> {
    let (n, _, _) = plane.slice_geometry(case.shape());
    if n < slab_size {
        return Err(Error::GeometryMismatch(format!(
            "case {} has {n} {plane} slices, fewer than the slab size {slab_size}",
            case.case_id
        )));
    }
    let start = rng.random_range(0..=n - slab_size);
    extract_slab(case, plane, start, slab_size)
}

/// Draws `cfg.batch_slabs` slabs (cases uniformly with replacement),
/// augments every slice and returns the flattened image batch and one-hot
/// targets.
pub fn assemble_batch(
    cases: &[CaseBundle],
    cfg: &SegTrainConfig,
    iteration: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    if cases.is_empty() {
        return Err(Error::InsufficientData("no training cases".into()));
    }
    let mut images = Vec::with_capacity(cfg.batch_slabs);
    let mut labels = Vec::with_capacity(cfg.batch_slabs);
    for b in 0..cfg.batch_slabs {
        let mut rng = fork_rng(cfg.seed, (iteration * cfg.batch_slabs + b) as u64);
        let case = &cases[rng.random_range(0..cases.len())];
        let slab = sample_slab(case, cfg.plane, &mut rng, cfg.slab_size)?;
        let slab_labels = slab.labels.as_ref().ok_or_else(|| {
            Error::InsufficientData(format!("case {} has no labels", case.case_id))
        })?;
        for i in 0..cfg.slab_size {
            let img = slab.data.index_axis(Axis(0), i).to_owned();
            let lab = slab_labels.index_axis(Axis(0), i).to_owned();
            let (img, lab) = augment_pair(&img, &lab, &cfg.augment, &mut rng)?;
            images.push(img);
            labels.push(lab);
        }
    }
    let (c, h, w) = images[0].dim();
    let mut x = FeatureMap::zeros((images.len(), c, h, w));
    let mut y = Array3::<u8>::zeros((labels.len(), h, w));
    for (i, (img, lab)) in images.iter().zip(&labels).enumerate() {
        x.slice_mut(s![i, .., .., ..]).assign(&img.mapv(f64::from));
        y.index_axis_mut(Axis(0), i).assign(lab);
    }
    Ok((x, one_hot(&y, N_CLASSES)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub dice: f64,
    pub focal: f64,
}

/// Forward, total loss, backward and one Adam update.
pub fn train_step(
    params: &mut NetworkParams,
    opt: &mut Adam,
    x: &FeatureMap,
    target: &FeatureMap,
    cfg: &SegTrainConfig,
) -> Result<StepStats> {
    let trace = params.forward_trace(x)?;
    let loss = total_loss_grad(&trace.probs, target, &cfg.loss)?;
    if !loss.value.is_finite() {
        return Err(Error::NumericalDivergence(format!(
            "loss is {} (dice {}, focal {})",
            loss.value, loss.dice, loss.focal
        )));
    }
    let mut grad = params.zeros_like();
    params.backward(&trace, &loss.grad, &mut grad);
    if !grad.all_finite() {
        return Err(Error::NumericalDivergence("non-finite gradient".into()));
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = grad.squared_norm().sqrt();
        if norm > clip {
            grad.scale(clip / norm);
        }
    }
    opt.update(params, &grad, cfg.lr)?;
    Ok(StepStats {
        loss: loss.value,
        dice: loss.dice,
        focal: loss.focal,
    })
}

/// Stored alongside the tensors; contains no timestamps, so identical runs
/// give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegManifest {
    pub format_version: u32,
    pub plane: Plane,
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    pub train: SegTrainConfig,
    pub network: NetworkConfig,
}

#[derive(Debug, Clone)]
pub struct SegCheckpoint {
    pub manifest: SegManifest,
    pub params: NetworkParams,
    pub optimizer: Adam,
}

fn hash_configs(train: &SegTrainConfig, network: &NetworkConfig) -> Result<String> {
    config_hash(&(train, network))
}

impl SegCheckpoint {
    pub fn fresh(train: &SegTrainConfig, network: &NetworkConfig) -> Result<Self> {
        let params = NetworkParams::init(network)?;
        let optimizer = Adam::new(&params);
        Ok(Self {
            manifest: SegManifest {
                format_version: checkpoint::FORMAT_VERSION,
                plane: train.plane,
                iteration: 0,
                seed: train.seed,
                config_hash: hash_configs(train, network)?,
                train: train.clone(),
                network: network.clone(),
            },
            params,
            optimizer,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_manifest(dir, &self.manifest)?;
        let names: Vec<String> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut tensors = self.params.named_tensors();
        tensors.extend(self.optimizer.named_tensors(&names));
        write_tensors(&checkpoint::tensor_path(dir), &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SegManifest = checkpoint::read_manifest(dir)?;
        if manifest.format_version != checkpoint::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let mut params = NetworkParams::init(&manifest.network)?;
        let tensors = read_tensors(&checkpoint::tensor_path(dir))?;
        assign_tensors(&mut params, "", &tensors)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut optimizer = Adam::new(&params);
        optimizer.restore(&names, &tensors, manifest.iteration as u64)?;
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub dice_component: f64,
    pub focal_component: f64,
    pub wall_time: f64,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Where `checkpoint/` and `train_log.csv` are written.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<SegCheckpoint>,
    /// Stop (and checkpoint) after this iteration even if more remain.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: SegCheckpoint,
    pub log: Vec<LogRow>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";

fn append_log(path: &Path, rows: &[LogRow], header: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(header)
        .from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains one planar model on preprocessed, labelled cases.
pub fn train_plane(
    cases: &[CaseBundle],
    cfg: &SegTrainConfig,
    network: &NetworkConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    network.validate()?;
    if cases.is_empty() {
        return Err(Error::InsufficientData(
            "no preprocessed cases to train on".into(),
        ));
    }
    let mut ckpt = match opts.resume {
        Some(c) => {
            if c.manifest.config_hash != hash_configs(cfg, network)? {
                return Err(Error::Config(
                    "resume checkpoint was produced by a different config".into(),
                ));
            }
            c
        }
        None => SegCheckpoint::fresh(cfg, network)?,
    };
    let end = opts
        .stop_after
        .map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    let log_path = opts.out_dir.as_ref().map(|d| d.join(TRAIN_LOG));
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut header = log_path.as_ref().is_some_and(|p| !p.is_file());
    let start = Instant::now();
    let mut log = Vec::new();
    let mut pending = 0;
    while ckpt.manifest.iteration < end {
        let it = ckpt.manifest.iteration;
        let (x, y) = assemble_batch(cases, cfg, it)?;
        let stats = train_step(&mut ckpt.params, &mut ckpt.optimizer, &x, &y, cfg)?;
        ckpt.manifest.iteration += 1;
        log.push(LogRow {
            iteration: it + 1,
            loss: stats.loss,
            dice_component: stats.dice,
            focal_component: stats.focal,
            wall_time: start.elapsed().as_secs_f64(),
        });
        pending += 1;
        let done = ckpt.manifest.iteration == end;
        if ckpt.manifest.iteration % cfg.checkpoint_every == 0 || done {
            if let Some(dir) = &ckpt_dir {
                ckpt.save(dir)?;
            }
            if let Some(p) = &log_path {
                append_log(p, &log[log.len() - pending..], header)?;
                header = false;
            }
            pending = 0;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

/// Human-readable progress line.
pub fn format_log_row(r: &LogRow) -> String {
    format!(
        "iter {:>5}  loss {:.5}  dice {:.5}  focal {:.5}  {:.1}s",
        r.iteration, r.loss, r.dice_component, r.focal_component, r.wall_time
    )
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_log(path, rows, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelConvention, LabelVolume, Modality, ModalityVolume};
    use crate::preprocess::CropManifest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form scalar Adam recurrence.
    fn adam_oracle(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[derive(Clone)]
    struct Pair(ArrayD<f64>);

    impl Parameters for Pair {
        fn collect<'a>(
            &'a self,
            prefix: &str,
            out: &mut Vec<(String, ndarray::ArrayViewD<'a, f64>)>,
        ) {
            out.push((format!("{prefix}w"), self.0.view()));
        }
        fn collect_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<(String, ndarray::ArrayViewMutD<'a, f64>)>,
        ) {
            out.push((format!("{prefix}w"), self.0.view_mut()));
        }
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        // minimize (a - 3)^2 + (b + 1)^2
        let mut p = Pair(ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![0.5, 2.0]).unwrap());
        let mut opt = Adam::new(&p);
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        for _ in 0..25 {
            let (a, b) = (p.0[0], p.0[1]);
            ga.push(2.0 * (a - 3.0));
            gb.push(2.0 * (b + 1.0));
            let g = Pair(
                ArrayD::from_shape_vec(
                    ndarray::IxDyn(&[2]),
                    vec![2.0 * (a - 3.0), 2.0 * (b + 1.0)],
                )
                .unwrap(),
            );
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!((p.0[0] - adam_oracle(0.5, &ga, 0.05)).abs() < 1e-10);
        assert!((p.0[1] - adam_oracle(2.0, &gb, 0.05)).abs() < 1e-10);
    }

    fn toy_case(seed: u64) -> CaseBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (16, 16, 10);
        let vols = Modality::NETWORK_INPUTS.map(|m| {
            ModalityVolume::new(
                m,
                Array3::from_shape_fn(shape, |_| rng.random_range(0.0f32..1.0)),
            )
            .unwrap()
        });
        let labels = Array3::from_shape_fn(shape, |(x, y, _)| ((x / 4 + y / 4) % 4) as u8);
        let mut c = CaseBundle::new(
            format!("toy{seed}"),
            vols,
            Some(LabelVolume::new(labels, LabelConvention::Canonical).unwrap()),
        )
        .unwrap();
        c.crop = Some(CropManifest::centered([16, 16, 10], [16, 16, 10]).unwrap());
        c
    }

    fn toy_cfg() -> SegTrainConfig {
        SegTrainConfig {
            plane: Plane::Axial,
            lr: 1e-3,
            batch_slabs: 2,
            slab_size: 2,
            iterations: 4,
            checkpoint_every: 2,
            ..SegTrainConfig::for_plane(Plane::Axial)
        }
    }

    #[test]
    fn slab_start_range_and_determinism() {
        let case = toy_case(1);
        let mut rng = fork_rng(3, 0);
        for _ in 0..200 {
            let s = sample_slab(&case, Plane::Axial, &mut rng, 8).unwrap();
            assert!(s.start_index <= 2);
        }
        let full = sample_slab(&case, Plane::Axial, &mut rng, 10).unwrap();
        assert_eq!(full.start_index, 0);
        assert!(sample_slab(&case, Plane::Axial, &mut rng, 11).is_err());
        let a = sample_slab(&case, Plane::Coronal, &mut fork_rng(1, 1), 8).unwrap();
        let b = sample_slab(&case, Plane::Coronal, &mut fork_rng(1, 1), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cases = [toy_case(2)];
        let cfg = SegTrainConfig {
            lr: 0.0,
            ..toy_cfg()
        };
        let net = NetworkConfig::tiny();
        let mut params = NetworkParams::init(&net).unwrap();
        let before = params.clone();
        let mut opt = Adam::new(&params);
        let (x, y) = assemble_batch(&cases, &cfg, 0).unwrap();
        let stats = train_step(&mut params, &mut opt, &x, &y, &cfg).unwrap();
        assert!(stats.loss.is_finite());
        assert_eq!(params, before);
    }

    #[test]
    fn rejects_zero_iterations() {
        let cfg = SegTrainConfig {
            iterations: 0,
            ..toy_cfg()
        };
        assert!(matches!(
            train_plane(
                &[toy_case(3)],
                &cfg,
                &NetworkConfig::tiny(),
                TrainOptions::default()
            ),
            Err(Error::Config(_))
        ));
        assert_eq!(SegTrainConfig::for_plane(Plane::Sagittal).iterations, 1300);
        assert_eq!(SegTrainConfig::for_plane(Plane::Coronal).iterations, 800);
        assert_eq!(SegTrainConfig::for_plane(Plane::Axial).iterations, 800);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cases = [toy_case(4), toy_case(5)];
        let cfg = toy_cfg();
        let net = NetworkConfig::tiny();
        let full = train_plane(&cases, &cfg, &net, TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let half = train_plane(
            &cases,
            &cfg,
            &net,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                stop_after: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(half.checkpoint.manifest.iteration, 2);
        let loaded = SegCheckpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(loaded.params, half.checkpoint.params);
        assert_eq!(loaded.optimizer, half.checkpoint.optimizer);
        let resumed = train_plane(
            &cases,
            &cfg,
            &net,
            TrainOptions {
                resume: Some(loaded),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
        assert_eq!(
            resumed.log.last().unwrap().loss,
            full.log.last().unwrap().loss
        );
        let rows = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert!(rows.starts_with("iteration,loss,dice_component,focal_component,wall_time"));
        assert_eq!(rows.lines().count(), 3);
    }
}
