//! Training-time 2D slice augmentation.
//!
//! Transforms fire independently in a fixed order: horizontal flip, elastic,
//! rotate, shift-scale-rotate, Gaussian noise, Gaussian blur. Spatial
//! transforms resample the image bilinearly and the labels by nearest
//! neighbour, filling out-of-bounds regions with zero.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_elastic: f64,
    pub p_rotate: f64,
    pub p_shift_scale_rotate: f64,
    pub p_gauss_noise: f64,
    pub p_gauss_blur: f64,
    /// Max rotation angle in degrees (both rotate transforms).
    pub rotate_deg: f64,
    /// Max shift as a fraction of the slice extent.
    pub shift_frac: f64,
    /// Max relative scale change.
    pub scale_frac: f64,
    /// Max elastic displacement as a fraction of the smaller slice extent.
    pub elastic_max_disp_frac: f64,
    /// Smoothing of the elastic displacement field, in pixels.
    pub elastic_sigma: f64,
    pub noise_std_max: f64,
    pub blur_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.4,
            p_elastic: 0.3,
            p_rotate: 0.4,
            p_shift_scale_rotate: 0.3,
            p_gauss_noise: 0.2,
            p_gauss_blur: 0.2,
            rotate_deg: 15.0,
            shift_frac: 0.06,
            scale_frac: 0.10,
            elastic_max_disp_frac: 0.05,
            elastic_sigma: 4.0,
            noise_std_max: 0.05,
            blur_sigma: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_elastic: 0.0,
            p_rotate: 0.0,
            p_shift_scale_rotate: 0.0,
            p_gauss_noise: 0.0,
            p_gauss_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn probabilities(&self) -> [f64; 6] {
        [
            self.p_hflip,
            self.p_elastic,
            self.p_rotate,
            self.p_shift_scale_rotate,
            self.p_gauss_noise,
            self.p_gauss_blur,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .probabilities()
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config(
                "augmentation probabilities must lie in [0, 1]".into(),
            ));
        }
        let nonneg = [
            self.rotate_deg,
            self.shift_frac,
            self.scale_frac,
            self.elastic_max_disp_frac,
            self.noise_std_max,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || self.scale_frac >= 1.0 {
            return Err(Error::Config(
                "augmentation ranges must be non-negative (scale_frac < 1)".into(),
            ));
        }
        if !(self.elastic_sigma > 0.0)
            || !(0.0 < self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1)
        {
            return Err(Error::Config(
                "elastic_sigma and blur_sigma must be positive, blur range ordered".into(),
            ));
        }
        Ok(())
    }
}

/// Independent deterministic stream per `(seed, index)`.
pub fn fork_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Which transforms fired on one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub hflip: bool,
    pub elastic: bool,
    pub rotate: bool,
    pub shift_scale_rotate: bool,
    pub gauss_noise: bool,
    pub gauss_blur: bool,
}

impl AugmentTrace {
    pub fn as_array(&self) -> [bool; 6] {
        [
            self.hflip,
            self.elastic,
            self.rotate,
            self.shift_scale_rotate,
            self.gauss_noise,
            self.gauss_blur,
        ]
    }
}

/// `image` is `(C, H, W)`, `label` is `(H, W)`.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Array3<f32>,
    label: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<u8>)> {
    augment_pair_traced(image, label, cfg, rng).map(|(i, l, _)| (i, l))
}

pub fn augment_pair_traced<R: Rng + ?Sized>(
    image: &Array3<f32>,
    label: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<u8>, AugmentTrace)> {
    let (_, h, w) = image.dim();
    if label.dim() != (h, w) {
        return Err(Error::GeometryMismatch(format!(
            "image slice is {h}x{w} but label slice is {:?}",
            label.dim()
        )));
    }
    let mut img = image.clone();
    let mut lab = label.clone();
    let mut trace = AugmentTrace::default();

    let mut stages = Vec::new();
    if rng.random_bool(cfg.p_hflip) {
        trace.hflip = true;
        stages.push(Stage::Flip);
    }
    if rng.random_bool(cfg.p_elastic) {
        trace.elastic = true;
        stages.push(Stage::Elastic(elastic_field(h, w, cfg, rng)));
    }
    if rng.random_bool(cfg.p_rotate) {
        trace.rotate = true;
        let angle = rng
            .random_range(-cfg.rotate_deg..=cfg.rotate_deg)
            .to_radians();
        stages.push(Stage::Affine {
            angle,
            scale: 1.0,
            shift: (0.0, 0.0),
        });
    }
    if rng.random_bool(cfg.p_shift_scale_rotate) {
        trace.shift_scale_rotate = true;
        let shift = (
            rng.random_range(-cfg.shift_frac..=cfg.shift_frac) * h as f64,
            rng.random_range(-cfg.shift_frac..=cfg.shift_frac) * w as f64,
        );
        let scale = 1.0 + rng.random_range(-cfg.scale_frac..=cfg.scale_frac);
        let angle = rng
            .random_range(-cfg.rotate_deg..=cfg.rotate_deg)
            .to_radians();
        stages.push(Stage::Affine {
            angle,
            scale,
            shift,
        });
    }
    if !stages.is_empty() {
        // One resampling of the composed map keeps labels and image aligned.
        let map = |i: usize, j: usize| {
            let mut p = Some((i as f64, j as f64));
            for st in stages.iter().rev() {
                p = p.and_then(|q| st.source(q, h, w));
            }
            p
        };
        (img, lab) = resample(&img, &lab, map);
    }
    if rng.random_bool(cfg.p_gauss_noise) {
        trace.gauss_noise = true;
        let std = rng.random_range(0.0..=cfg.noise_std_max);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            img.mapv_inplace(|v| v + normal.sample(rng) as f32);
        }
    }
    if rng.random_bool(cfg.p_gauss_blur) {
        trace.gauss_blur = true;
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        for mut ch in img.axis_iter_mut(Axis(0)) {
            let blurred = gaussian_blur(&ch.to_owned().mapv(f64::from), sigma);
            ch.zip_mut_with(&blurred, |d, &s| *d = s as f32);
        }
    }
    Ok((img, lab, trace))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with edge clamping.
pub fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = x.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp: Array2<f64> = Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * x[[i, clamp(j as isize + t as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * tmp[[clamp(i as isize + t as isize - r, h), j]])
            .sum()
    })
}

fn elastic_field<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> [Array2<f64>; 2] {
    let max_disp = cfg.elastic_max_disp_frac * h.min(w) as f64;
    let magnitude = rng.random_range(0.0..=1.0) * max_disp;
    let mut field = [0, 1].map(|_| {
        let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..=1.0));
        gaussian_blur(&raw, cfg.elastic_sigma)
    });
    let peak = field
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for f in field.iter_mut() {
            f.mapv_inplace(|v| v / peak * magnitude);
        }
    }
    field
}

/// One spatial transform, stored as its inverse coordinate map.
enum Stage {
    Flip,
    Elastic([Array2<f64>; 2]),
    /// Rotation by `angle` and isotropic `scale` about the slice center,
    /// followed by a translation of `shift` pixels.
    Affine {
        angle: f64,
        scale: f64,
        shift: (f64, f64),
    },
}

impl Stage {
    /// Source position of output position `p`; `None` once it leaves the slice.
    fn source(&self, p: (f64, f64), h: usize, w: usize) -> Option<(f64, f64)> {
        let q = match self {
            Stage::Flip => (p.0, w as f64 - 1.0 - p.1),
            Stage::Elastic(field) => (
                p.0 + sample_field(&field[0], p),
                p.1 + sample_field(&field[1], p),
            ),
            Stage::Affine {
                angle,
                scale,
                shift,
            } => {
                let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let (s, c) = angle.sin_cos();
                let y = (p.0 - ci - shift.0) / scale;
                let x = (p.1 - cj - shift.1) / scale;
                (c * y + s * x + ci, -s * y + c * x + cj)
            }
        };
        let within = |v: f64, n: usize| v >= -0.5 && v <= n as f64 - 0.5;
        (within(q.0, h) && within(q.1, w)).then_some(q)
    }
}

/// Bilinear lookup with edge clamping.
fn sample_field(f: &Array2<f64>, p: (f64, f64)) -> f64 {
    let (h, w) = f.dim();
    let y = p.0.clamp(0.0, (h - 1) as f64);
    let x = p.1.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * f[[y0, x0]] + fx * f[[y0, x1]])
        + fy * ((1.0 - fx) * f[[y1, x0]] + fx * f[[y1, x1]])
}

fn resample(
    img: &Array3<f32>,
    lab: &Array2<u8>,
    map: impl Fn(usize, usize) -> Option<(f64, f64)>,
) -> (Array3<f32>, Array2<u8>) {
    let (ch, h, w) = img.dim();
    let mut out = Array3::<f32>::zeros((ch, h, w));
    let mut out_lab = Array2::<u8>::zeros((h, w));
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
    for i in 0..h {
        for j in 0..w {
            let Some((si, sj)) = map(i, j) else {
                continue;
            };
            let (ni, nj) = (si.round() as isize, sj.round() as isize);
            if inside(ni, nj) {
                out_lab[[i, j]] = lab[[ni as usize, nj as usize]];
            }
            let (i0, j0) = (si.floor() as isize, sj.floor() as isize);
            let (fi, fj) = (si - i0 as f64, sj - j0 as f64);
            let taps = [
                (i0, j0, (1.0 - fi) * (1.0 - fj)),
                (i0, j0 + 1, (1.0 - fi) * fj),
                (i0 + 1, j0, fi * (1.0 - fj)),
                (i0 + 1, j0 + 1, fi * fj),
            ];
            for k in 0..ch {
                let mut acc = 0.0f64;
                for &(r, c, wt) in &taps {
                    if wt != 0.0 && inside(r, c) {
                        acc += wt * img[[k, r as usize, c as usize]] as f64;
                    }
                }
                out[[k, i, j]] = acc as f32;
            }
        }
    }
    (out, out_lab)
}
