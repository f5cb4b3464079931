//! Survival-days regression from frozen encoder bottlenecks.
//!
//! Per plane, a two-conv feature head reduces the bottleneck to 64 channels
//! and global-average-pools over every slab of the volume. The three plane
//! vectors are concatenated (sagittal, coronal, axial) into 192 features and
//! fed to a 192 -> 64 -> 64 -> 28 ANN; the 28 activations are joined with the
//! z-scored age and mapped to one output, the z-scored survival in days.

use std::fmt;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::fork_rng;
use crate::checkpoint::{self, assign_tensors, read_tensors, write_tensors};
use crate::data::CaseBundle;
use crate::error::{Error, Result};
use crate::network::{Conv2d, NetworkParams, Parameters};
use crate::tensor::{self, FeatureMap};
use crate::training::Adam;
use crate::triplanar::{slice_plane, Plane};

pub const PLANE_FEATURES: usize = 64;
pub const FUSED_FEATURES: usize = 3 * PLANE_FEATURES;
pub const HEAD_HIDDEN: usize = 128;
/// Dense widths after fusion; the age input joins after the last one.
pub const ANN_WIDTHS: [usize; 3] = [64, 64, 28];

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Two 3x3 convolutions (bottleneck -> 128 -> 64) with ReLU, then global
/// average pooling over slices and pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

struct HeadTrace {
    input: FeatureMap,
    h1: FeatureMap,
    h2: FeatureMap,
}

impl FeatureHead {
    pub fn new<R: Rng>(bottleneck_channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(bottleneck_channels, HEAD_HIDDEN, 3, true, rng),
            conv2: Conv2d::new(HEAD_HIDDEN, PLANE_FEATURES, 3, true, rng),
        }
    }

    fn trace(&self, bottleneck: &FeatureMap) -> Result<HeadTrace> {
        let h1 = tensor::relu(&self.conv1.forward(bottleneck)?);
        let h2 = tensor::relu(&self.conv2.forward(&h1)?);
        Ok(HeadTrace {
            input: bottleneck.clone(),
            h1,
            h2,
        })
    }

    /// Pooled 64-vector of a stack of bottleneck maps `(n, c, h, w)`.
    pub fn forward(&self, bottleneck: &FeatureMap) -> Result<Array1<f64>> {
        Ok(pool(&self.trace(bottleneck)?.h2))
    }

    fn backward(&self, trace: &HeadTrace, d_pooled: &Array1<f64>, grad: &mut FeatureHead) {
        let (n, c, h, w) = trace.h2.dim();
        let scale = 1.0 / (n * h * w) as f64;
        let mut d_h2 = FeatureMap::zeros((n, c, h, w));
        for (ch, &g) in d_pooled.iter().enumerate() {
            d_h2.slice_mut(s![.., ch, .., ..]).fill(g * scale);
        }
        let d_z2 = tensor::relu_backward(&trace.h2, &d_h2);
        let d_h1 = self.conv2.backward(&trace.h1, &d_z2, &mut grad.conv2);
        let d_z1 = tensor::relu_backward(&trace.h1, &d_h1);
        self.conv1.backward(&trace.input, &d_z1, &mut grad.conv1);
    }
}

/// Mean over samples and pixels, per channel.
fn pool(x: &FeatureMap) -> Array1<f64> {
    let (n, c, h, w) = x.dim();
    let denom = (n * h * w) as f64;
    Array1::from_shape_fn(c, |ch| x.slice(s![.., ch, .., ..]).sum() / denom)
}

impl Parameters for FeatureHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
    }
}

/// Bottleneck maps of every slab tiling `plane`, stacked along the batch
/// axis. The final slab may be shorter than `slab_size`.
pub fn plane_bottlenecks(
    case: &CaseBundle,
    plane: Plane,
    seg: &NetworkParams,
    slab_size: usize,
) -> Result<FeatureMap> {
    let slices = slice_plane(case, plane)?;
    let mut parts = Vec::new();
    for chunk in slices.chunks(slab_size.max(1)) {
        let (c, h, w) = chunk[0].dim();
        let mut x = FeatureMap::zeros((chunk.len(), c, h, w));
        for (i, sl) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&sl.mapv(f64::from));
        }
        parts.push(seg.bottleneck(&x)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// One 64-vector per case and plane.
pub fn extract_plane_features(
    case: &CaseBundle,
    plane: Plane,
    seg: &NetworkParams,
    head: &FeatureHead,
    slab_size: usize,
) -> Result<Array1<f64>> {
    head.forward(&plane_bottlenecks(case, plane, seg, slab_size)?)
}

/// Concatenation in the order sagittal, coronal, axial.
pub fn fuse_features(
    sag: &Array1<f64>,
    cor: &Array1<f64>,
    ax: &Array1<f64>,
) -> Result<Array1<f64>> {
    for (name, v) in [("sagittal", sag), ("coronal", cor), ("axial", ax)] {
        if v.len() != PLANE_FEATURES {
            return Err(Error::shape(format!(
                "{name} feature vector has length {}, expected {PLANE_FEATURES}",
                v.len()
            )));
        }
    }
    Ok(concatenate(Axis(0), &[sag.view(), cor.view(), ax.view()]).expect("1D concat"))
}

/// Fully connected layer, `weight (out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((cout, cin), || dist.sample(rng)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `x` is `(batch, in)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Parameters for Dense {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// 192 -> 64 -> 64 -> 28, then (28 + age) -> 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnParams {
    pub hidden: [Dense; 3],
    pub output: Dense,
    pub dropout: f64,
}

struct AnnTrace {
    inputs: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    joined: Array2<f64>,
}

impl AnnParams {
    pub fn new<R: Rng>(dropout: f64, rng: &mut R) -> Self {
        let [a, b, c] = ANN_WIDTHS;
        let ann = Self {
            hidden: [
                Dense::new(FUSED_FEATURES, a, rng),
                Dense::new(a, b, rng),
                Dense::new(b, c, rng),
            ],
            output: Dense::new(c + 1, 1, rng),
            dropout,
        };
        assert_eq!(ann.shape_chain(), [FUSED_FEATURES, 64, 64, 28, 29, 1]);
        ann
    }

    /// Widths along the forward path, input to output.
    pub fn shape_chain(&self) -> [usize; 6] {
        [
            self.hidden[0].in_dim(),
            self.hidden[0].out_dim(),
            self.hidden[1].out_dim(),
            self.hidden[2].out_dim(),
            self.output.in_dim(),
            self.output.out_dim(),
        ]
    }

    fn trace<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        age: &Array1<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> (Array1<f64>, AnnTrace) {
        let mut h = x.clone();
        let mut inputs = Vec::with_capacity(3);
        let mut activations = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        let keep = 1.0 - self.dropout;
        for layer in &self.hidden {
            inputs.push(h.clone());
            let mut a = tensor_relu2(&layer.forward(&h));
            let mask = (mode == Mode::Train && self.dropout > 0.0).then(|| {
                Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            activations.push(a.clone());
            if let Some(m) = &mask {
                a *= m;
            }
            masks.push(mask);
            h = a;
        }
        let age_col = age.view().insert_axis(Axis(1));
        let joined = concatenate(Axis(1), &[h.view(), age_col]).expect("matching rows");
        let out = self.output.forward(&joined).column(0).to_owned();
        (
            out,
            AnnTrace {
                inputs,
                activations,
                masks,
                joined,
            },
        )
    }

    /// Batch forward; `features` is `(batch, 192)`, `age` is z-scored.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        features: &Array2<f64>,
        age: &Array1<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Array1<f64> {
        self.trace(features, age, mode, rng).0
    }

    fn backward(&self, trace: &AnnTrace, d_out: &Array1<f64>, grad: &mut AnnParams) -> Array2<f64> {
        let d_out = d_out.view().insert_axis(Axis(1)).to_owned();
        let d_joined = self
            .output
            .backward(&trace.joined, &d_out, &mut grad.output);
        let width = ANN_WIDTHS[2];
        let mut d_h = d_joined.slice(s![.., ..width]).to_owned();
        for l in (0..3).rev() {
            if let Some(m) = &trace.masks[l] {
                d_h *= m;
            }
            let d_z = &d_h * &trace.activations[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            d_h = self.hidden[l].backward(&trace.inputs[l], &d_z, &mut grad.hidden[l]);
        }
        d_h
    }
}

fn tensor_relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Single-sample forward. Rejects non-finite inputs.
pub fn ann_forward<R: Rng + ?Sized>(
    features: &Array1<f64>,
    age_z: f64,
    params: &AnnParams,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    if features.len() != FUSED_FEATURES {
        return Err(Error::shape(format!(
            "expected {FUSED_FEATURES} features, got {}",
            features.len()
        )));
    }
    if !age_z.is_finite() || features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite survival input".into()));
    }
    let x = features.view().insert_axis(Axis(0)).to_owned();
    Ok(params.forward_batch(&x, &Array1::from_elem(1, age_z), mode, rng)[0])
}

impl Parameters for AnnParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        for (i, d) in self.hidden.iter().enumerate() {
            d.collect(&join(prefix, &format!("dense{i}")), out);
        }
        self.output.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        for (i, d) in self.hidden.iter_mut().enumerate() {
            d.collect_mut(&join(prefix, &format!("dense{i}")), out);
        }
        self.output.collect_mut(&join(prefix, "out"), out);
    }
}

/// Feature heads (one per plane, sagittal/coronal/axial) plus the ANN.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalNet {
    pub heads: Option<[FeatureHead; 3]>,
    pub ann: AnnParams,
}

impl Parameters for SurvivalNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        if let Some(heads) = &self.heads {
            for (p, h) in Plane::ALL.iter().zip(heads) {
                h.collect(&join(prefix, &format!("head.{p}")), out);
            }
        }
        self.ann.collect(&join(prefix, "ann"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        if let Some(heads) = &mut self.heads {
            for (p, h) in Plane::ALL.iter().zip(heads.iter_mut()) {
                h.collect_mut(&join(prefix, &format!("head.{p}")), out);
            }
        }
        self.ann.collect_mut(&join(prefix, "ann"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population statistics; a zero spread falls back to 1.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalThresholds {
    /// Below this many days: short-term.
    pub short_below: f64,
    /// Above this many days: long-term.
    pub long_above: f64,
}

impl Default for SurvivalThresholds {
    fn default() -> Self {
        Self {
            short_below: 300.0,
            long_above: 450.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalClass {
    Short,
    Mid,
    Long,
}

impl fmt::Display for SurvivalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurvivalClass::Short => "short",
            SurvivalClass::Mid => "mid",
            SurvivalClass::Long => "long",
        })
    }
}

pub fn classify_survival(days: f64, t: &SurvivalThresholds) -> Result<SurvivalClass> {
    if !(days >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "survival days must be non-negative, got {days}"
        )));
    }
    Ok(if days < t.short_below {
        SurvivalClass::Short
    } else if days <= t.long_above {
        SurvivalClass::Mid
    } else {
        SurvivalClass::Long
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMetrics {
    pub mse: f64,
    pub spearman_r: f64,
    pub accuracy: f64,
}

pub fn evaluate_survival(
    preds: &[f64],
    targets: &[f64],
    t: &SurvivalThresholds,
) -> Result<SurvivalMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / n;
    let mut hits = 0usize;
    for (p, y) in preds.iter().zip(targets) {
        // negative predictions count as short-term
        if classify_survival(p.max(0.0), t)? == classify_survival(*y, t)? {
            hits += 1;
        }
    }
    Ok(SurvivalMetrics {
        mse,
        spearman_r: spearman(preds, targets),
        accuracy: hits as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurvTrainConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub thresholds: SurvivalThresholds,
    /// Seeds weight init, shuffling and dropout.
    pub seed: u64,
    /// Slices per slab when tiling a plane for feature extraction.
    pub slab_size: usize,
}

impl Default for SurvTrainConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.85,
            split_seed: 0,
            epochs: 400,
            lr: 1e-4,
            batch_size: 16,
            dropout: 0.3,
            thresholds: SurvivalThresholds::default(),
            seed: 0,
            slab_size: 8,
        }
    }
}

impl SurvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.slab_size == 0 {
            return Err(Error::Config(
                "epochs, batch_size and slab_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(
                "lr must be positive and dropout in [0, 1)".into(),
            ));
        }
        if !(0.0 <= self.thresholds.short_below
            && self.thresholds.short_below < self.thresholds.long_above)
        {
            return Err(Error::Config(
                "survival thresholds must be increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic shuffled split: `floor(train_fraction * n)` training
/// indices (at least one on each side), the rest held out.
pub fn split_indices(n: usize, cfg: &SurvTrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train = ((cfg.train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// One patient for the cached-feature path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    pub case_id: String,
    pub features: Vec<f64>,
    pub age: f64,
    pub survival_days: Option<f64>,
}

/// One patient for joint head + ANN training: per-plane bottleneck stacks.
#[derive(Debug, Clone)]
pub struct BottleneckSample {
    pub case_id: String,
    pub bottlenecks: [FeatureMap; 3],
    pub age: f64,
    pub survival_days: Option<f64>,
}

/// Trained regressor plus the statistics needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalModel {
    pub net: SurvivalNet,
    pub age_norm: Standardizer,
    pub target_norm: Standardizer,
    pub config: SurvTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train: SurvivalMetrics,
    pub test: SurvivalMetrics,
    /// Training-split MSE in days^2 after each epoch.
    pub epoch_mse: Vec<f64>,
}

impl SurvivalModel {
    /// Predicted days from fused features (inference mode).
    pub fn predict(&self, features: &Array1<f64>, age: f64) -> Result<f64> {
        let z = ann_forward(
            features,
            self.age_norm.apply(age),
            &self.net.ann,
            Mode::Infer,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        Ok(self.target_norm.invert(z))
    }

    /// Fused features of one case from its per-plane bottleneck stacks.
    pub fn features_from_bottlenecks(&self, bottlenecks: &[FeatureMap; 3]) -> Result<Array1<f64>> {
        let heads = self
            .net
            .heads
            .as_ref()
            .ok_or_else(|| Error::MissingModel("survival model has no feature heads".into()))?;
        let v: Vec<Array1<f64>> = heads
            .iter()
            .zip(bottlenecks)
            .map(|(h, b)| h.forward(b))
            .collect::<Result<_>>()?;
        fuse_features(&v[0], &v[1], &v[2])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = SurvManifest {
            format_version: checkpoint::FORMAT_VERSION,
            config: self.config.clone(),
            age_norm: self.age_norm,
            target_norm: self.target_norm,
            head_input_channels: self.net.heads.as_ref().map(|h| h[0].conv1.in_channels()),
        };
        checkpoint::write_manifest(dir, &manifest)?;
        write_tensors(&checkpoint::tensor_path(dir), &self.net.named_tensors())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: SurvManifest = checkpoint::read_manifest(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = m
            .head_input_channels
            .map(|c| [0, 1, 2].map(|_| FeatureHead::new(c, &mut rng)));
        let mut net = SurvivalNet {
            heads,
            ann: AnnParams::new(m.config.dropout, &mut rng),
        };
        assign_tensors(&mut net, "", &read_tensors(&checkpoint::tensor_path(dir))?)?;
        Ok(Self {
            net,
            age_norm: m.age_norm,
            target_norm: m.target_norm,
            config: m.config,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SurvManifest {
    format_version: u32,
    config: SurvTrainConfig,
    age_norm: Standardizer,
    target_norm: Standardizer,
    head_input_channels: Option<usize>,
}

/// Per-sample model input for the shared training loop.
enum Inputs<'a> {
    Cached(&'a [SurvivalSample]),
    Bottlenecks(&'a [BottleneckSample]),
}

impl Inputs<'_> {
    fn len(&self) -> usize {
        match self {
            Inputs::Cached(s) => s.len(),
            Inputs::Bottlenecks(s) => s.len(),
        }
    }

    fn meta(&self, i: usize) -> (&str, f64, Option<f64>) {
        match self {
            Inputs::Cached(s) => (&s[i].case_id, s[i].age, s[i].survival_days),
            Inputs::Bottlenecks(s) => (&s[i].case_id, s[i].age, s[i].survival_days),
        }
    }
}

struct BatchTrace {
    head_traces: Vec<[HeadTrace; 3]>,
    ann: AnnTrace,
}

fn batch_forward<R: Rng + ?Sized>(
    net: &SurvivalNet,
    inputs: &Inputs<'_>,
    rows: &[usize],
    age_norm: &Standardizer,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array1<f64>, BatchTrace)> {
    let mut x = Array2::zeros((rows.len(), FUSED_FEATURES));
    let mut head_traces = Vec::new();
    for (r, &i) in rows.iter().enumerate() {
        match inputs {
            Inputs::Cached(s) => {
                if s[i].features.len() != FUSED_FEATURES {
                    return Err(Error::shape(format!(
                        "case {} has {} features, expected {FUSED_FEATURES}",
                        s[i].case_id,
                        s[i].features.len()
                    )));
                }
                x.row_mut(r).assign(&Array1::from(s[i].features.clone()));
            }
            Inputs::Bottlenecks(s) => {
                let heads = net.heads.as_ref().expect("joint training has heads");
                let traces = [0, 1, 2].map(|p| heads[p].trace(&s[i].bottlenecks[p]));
                let [a, b, c] = traces;
                let traces = [a?, b?, c?];
                for (p, t) in traces.iter().enumerate() {
                    x.slice_mut(s![r, p * PLANE_FEATURES..(p + 1) * PLANE_FEATURES])
                        .assign(&pool(&t.h2));
                }
                head_traces.push(traces);
            }
        }
    }
    let age = Array1::from_iter(rows.iter().map(|&i| age_norm.apply(inputs.meta(i).1)));
    let (out, ann) = net.ann.trace(&x, &age, mode, rng);
    Ok((out, BatchTrace { head_traces, ann }))
}

fn fit(
    mut net: SurvivalNet,
    inputs: Inputs<'_>,
    cfg: &SurvTrainConfig,
) -> Result<(SurvivalModel, SurvivalReport)> {
    cfg.validate()?;
    let labelled: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs.meta(i).2.is_some_and(|d| d.is_finite() && d > 0.0))
        .collect();
    for &i in &labelled {
        let (id, age, _) = inputs.meta(i);
        if !(age.is_finite() && age > 0.0) {
            return Err(Error::InvalidInput(format!(
                "case {id} has invalid age {age}"
            )));
        }
    }
    let (tr, te) = split_indices(labelled.len(), cfg)?;
    let train: Vec<usize> = tr.iter().map(|&k| labelled[k]).collect();
    let test: Vec<usize> = te.iter().map(|&k| labelled[k]).collect();
    let days = |i: usize| inputs.meta(i).2.expect("labelled");
    let age_norm = Standardizer::fit(&train.iter().map(|&i| inputs.meta(i).1).collect::<Vec<_>>());
    let target_norm = Standardizer::fit(&train.iter().map(|&i| days(i)).collect::<Vec<_>>());

    let mut opt = Adam::new(&net);
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    let predict_days = |net: &SurvivalNet, rows: &[usize]| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, _) = batch_forward(net, &inputs, rows, &age_norm, Mode::Infer, &mut rng)?;
        Ok(z.iter().map(|&v| target_norm.invert(v)).collect())
    };
    for epoch in 0..cfg.epochs {
        let mut rng = fork_rng(cfg.seed, epoch as u64);
        let mut order = train.clone();
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let (z, trace) = batch_forward(&net, &inputs, rows, &age_norm, Mode::Train, &mut rng)?;
            let y = Array1::from_iter(rows.iter().map(|&i| target_norm.apply(days(i))));
            let n = rows.len() as f64;
            let d_out = (&z - &y) * (2.0 / n);
            let mut grad = net.zeros_like();
            let d_x = net.ann.backward(&trace.ann, &d_out, &mut grad.ann);
            if let (Some(heads), Some(gheads)) = (&net.heads, &mut grad.heads) {
                for (r, traces) in trace.head_traces.iter().enumerate() {
                    for p in 0..3 {
                        let d = d_x
                            .slice(s![r, p * PLANE_FEATURES..(p + 1) * PLANE_FEATURES])
                            .to_owned();
                        heads[p].backward(&traces[p], &d, &mut gheads[p]);
                    }
                }
            }
            if !grad.all_finite() {
                return Err(Error::NumericalDivergence(format!(
                    "survival gradient at epoch {epoch}"
                )));
            }
            opt.update(&mut net, &grad, cfg.lr)?;
        }
        let preds = predict_days(&net, &train)?;
        let mse = preds
            .iter()
            .zip(&train)
            .map(|(p, &i)| (p - days(i)).powi(2))
            .sum::<f64>()
            / train.len() as f64;
        epoch_mse.push(mse);
    }
    let t = &cfg.thresholds;
    let targets = |rows: &[usize]| rows.iter().map(|&i| days(i)).collect::<Vec<_>>();
    let report = SurvivalReport {
        train_ids: train
            .iter()
            .map(|&i| inputs.meta(i).0.to_string())
            .collect(),
        test_ids: test.iter().map(|&i| inputs.meta(i).0.to_string()).collect(),
        train: evaluate_survival(&predict_days(&net, &train)?, &targets(&train), t)?,
        test: evaluate_survival(&predict_days(&net, &test)?, &targets(&test), t)?,
        epoch_mse,
    };
    Ok((
        SurvivalModel {
            net,
            age_norm,
            target_norm,
            config: cfg.clone(),
        },
        report,
    ))
}

/// ANN-only training on cached 192-feature vectors.
pub fn train_survival(
    samples: &[SurvivalSample],
    cfg: &SurvTrainConfig,
) -> Result<(SurvivalModel, SurvivalReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = SurvivalNet {
        heads: None,
        ann: AnnParams::new(cfg.dropout, &mut rng),
    };
    fit(net, Inputs::Cached(samples), cfg)
}

/// Joint training of the three feature heads and the ANN on frozen
/// per-plane bottleneck stacks.
pub fn train_survival_joint(
    samples: &[BottleneckSample],
    cfg: &SurvTrainConfig,
) -> Result<(SurvivalModel, SurvivalReport)> {
    let channels = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("no survival samples".into()))?
        .bottlenecks[0]
        .shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let heads = [0, 1, 2].map(|_| FeatureHead::new(channels, &mut rng));
    let net = SurvivalNet {
        heads: Some(heads),
        ann: AnnParams::new(cfg.dropout, &mut rng),
    };
    fit(net, Inputs::Bottlenecks(samples), cfg)
}

/// Cached features of a model with heads, one sample per case.
pub fn cache_features(
    model: &SurvivalModel,
    samples: &[BottleneckSample],
) -> Result<Vec<SurvivalSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(SurvivalSample {
                case_id: s.case_id.clone(),
                features: model.features_from_bottlenecks(&s.bottlenecks)?.to_vec(),
                age: s.age,
                survival_days: s.survival_days,
            })
        })
        .collect()
}

/// Writes `case_id, age, survival_days, f0..f191`.
pub fn write_feature_cache(path: &Path, samples: &[SurvivalSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["case_id".to_string(), "age".into(), "survival_days".into()];
    header.extend((0..FUSED_FEATURES).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.case_id.clone(),
            s.age.to_string(),
            s.survival_days.map(|d| d.to_string()).unwrap_or_default(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<SurvivalSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number '{s}' in {}", path.display())))
        };
        let days = row.get(2).filter(|s| !s.is_empty()).map(num).transpose()?;
        out.push(SurvivalSample {
            case_id: row.get(0).unwrap_or_default().to_string(),
            age: num(row.get(1).unwrap_or_default())?,
            survival_days: days,
            features: row.iter().skip(3).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
