//! Dense NCHW feature-map kernels and their backward passes.
//!
//! Everything here works on `Array4<f64>` in standard (row-major) layout
//! with axes `(batch, channel, height, width)`. Convolutions are lowered to
//! a single GEMM over the whole batch via im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};

pub type FeatureMap = Array4<f64>;

/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

fn dims(x: &FeatureMap) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn contiguous(x: &FeatureMap) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Unfolds `k x k` same-padded patches into a `(c*k*k, n*h*w)` matrix.
pub fn im2col(x: &FeatureMap, k: usize) -> Array2<f64> {
    let (n, c, h, w) = dims(x);
    let pad = (k / 2) as isize;
    let src = contiguous(x);
    let cols_n = n * h * w;
    let mut cols = Array2::<f64>::zeros((c * k * k, cols_n));
    let dst = cols.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut dst[row * cols_n..(row + 1) * cols_n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let base = (ni * h + y) * w;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1.min(w) {
                            out[base + xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), k: usize) -> FeatureMap {
    let (n, c, h, w) = shape;
    let pad = (k / 2) as isize;
    let cols_n = n * h * w;
    let src = cols.as_slice().expect("col matrix is contiguous");
    let mut x = FeatureMap::zeros((n, c, h, w));
    let dst = x.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let inp = &src[row * cols_n..(row + 1) * cols_n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let plane = &mut dst[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = (ni * h + y) * w;
                        let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1.min(w) {
                            drow[(xx as isize + dx) as usize] += inp[base + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(n, c, h, w)` -> `(c, n*h*w)`.
fn channels_major(x: &FeatureMap) -> Array2<f64> {
    let (n, c, h, w) = dims(x);
    let src = contiguous(x);
    let mut out = Array2::<f64>::zeros((c, n * h * w));
    let dst = out.as_slice_mut().unwrap();
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let s = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            dst[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// `(c, n*h*w)` -> `(n, c, h, w)`.
fn batch_major(m: &Array2<f64>, n: usize, h: usize, w: usize) -> FeatureMap {
    let c = m.nrows();
    let hw = h * w;
    let src = m.as_slice().expect("contiguous");
    let mut out = FeatureMap::zeros((n, c, h, w));
    let dst = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            dst[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&src[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]);
        }
    }
    out
}

fn weight_matrix(weight: &Array4<f64>) -> ArrayView2<'_, f64> {
    let s = weight.shape();
    weight
        .view()
        .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
        .expect("conv weight is contiguous")
}

/// Same-padded, stride-1 convolution. `weight` is `(out, in, k, k)` with odd `k`.
pub fn conv2d(x: &FeatureMap, weight: &Array4<f64>, bias: Option<&Array1<f64>>) -> FeatureMap {
    let (n, _, h, w) = dims(x);
    let k = weight.shape()[2];
    let out_c = weight.shape()[0];
    let cols = if k == 1 {
        channels_major(x)
    } else {
        im2col(x, k)
    };
    let mut y = Array2::<f64>::zeros((out_c, n * h * w));
    general_mat_mul(1.0, &weight_matrix(weight), &cols, 0.0, &mut y);
    if let Some(b) = bias {
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    batch_major(&y, n, h, w)
}

/// Backward of [`conv2d`]. Accumulates into `dweight`/`dbias` and returns the
/// input gradient.
pub fn conv2d_backward(
    x: &FeatureMap,
    weight: &Array4<f64>,
    dy: &FeatureMap,
    dweight: &mut Array4<f64>,
    dbias: Option<&mut Array1<f64>>,
) -> FeatureMap {
    let (n, c, h, w) = dims(x);
    let k = weight.shape()[2];
    let cols = if k == 1 {
        channels_major(x)
    } else {
        im2col(x, k)
    };
    let dy_m = channels_major(dy);
    {
        let s = dweight.shape().to_vec();
        let mut dw = dweight
            .view_mut()
            .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
            .expect("grad weight contiguous");
        general_mat_mul(1.0, &dy_m, &cols.t(), 1.0, &mut dw);
    }
    if let Some(db) = dbias {
        *db += &dy_m.sum_axis(Axis(1));
    }
    let mut dcols = Array2::<f64>::zeros(cols.raw_dim());
    general_mat_mul(1.0, &weight_matrix(weight).t(), &dy_m, 0.0, &mut dcols);
    if k == 1 {
        batch_major(&dcols, n, h, w)
    } else {
        col2im(&dcols, (n, c, h, w), k)
    }
}

/// Transposed convolution with kernel 2 and stride 2. `weight` is `(in, out, 2, 2)`.
pub fn conv_transpose2x2(x: &FeatureMap, weight: &Array4<f64>, bias: &Array1<f64>) -> FeatureMap {
    let (n, cin, h, w) = dims(x);
    let cout = weight.shape()[1];
    let xm = channels_major(x); // (cin, n*h*w)
    let wm = weight
        .view()
        .into_shape_with_order((cin, cout * 4))
        .expect("contiguous");
    let mut ym = Array2::<f64>::zeros((cout * 4, n * h * w));
    general_mat_mul(1.0, &wm.t(), &xm, 0.0, &mut ym);
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = FeatureMap::zeros((n, cout, oh, ow));
    let src = ym.as_slice().unwrap();
    let dst = y.as_slice_mut().unwrap();
    let nhw = n * h * w;
    for o in 0..cout {
        let bv = bias[o];
        for a in 0..2 {
            for b in 0..2 {
                let row = &src[(o * 4 + a * 2 + b) * nhw..(o * 4 + a * 2 + b + 1) * nhw];
                for ni in 0..n {
                    for i in 0..h {
                        let drow = ((ni * cout + o) * oh + 2 * i + a) * ow;
                        for j in 0..w {
                            dst[drow + 2 * j + b] = row[(ni * h + i) * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose2x2_backward(
    x: &FeatureMap,
    weight: &Array4<f64>,
    dy: &FeatureMap,
    dweight: &mut Array4<f64>,
    dbias: &mut Array1<f64>,
) -> FeatureMap {
    let (n, cin, h, w) = dims(x);
    let cout = weight.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let nhw = n * h * w;
    let mut dym = Array2::<f64>::zeros((cout * 4, nhw));
    {
        let src = contiguous(dy);
        let dst = dym.as_slice_mut().unwrap();
        for o in 0..cout {
            for a in 0..2 {
                for b in 0..2 {
                    let row = &mut dst[(o * 4 + a * 2 + b) * nhw..(o * 4 + a * 2 + b + 1) * nhw];
                    for ni in 0..n {
                        for i in 0..h {
                            let srow = ((ni * cout + o) * oh + 2 * i + a) * ow;
                            for j in 0..w {
                                row[(ni * h + i) * w + j] = src[srow + 2 * j + b];
                            }
                        }
                    }
                }
            }
        }
    }
    for o in 0..cout {
        dbias[o] += (0..4).map(|r| dym.row(o * 4 + r).sum()).sum::<f64>();
    }
    let xm = channels_major(x);
    {
        let mut dw = dweight
            .view_mut()
            .into_shape_with_order((cin, cout * 4))
            .expect("contiguous");
        general_mat_mul(1.0, &xm, &dym.t(), 1.0, &mut dw);
    }
    let wm = weight
        .view()
        .into_shape_with_order((cin, cout * 4))
        .expect("contiguous");
    let mut dxm = Array2::<f64>::zeros((cin, nhw));
    general_mat_mul(1.0, &wm, &dym, 0.0, &mut dxm);
    batch_major(&dxm, n, h, w)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled map and the flat input index of each selected maximum.
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (n, c, h, w) = dims(x);
    let (oh, ow) = (h / 2, w / 2);
    let src = contiguous(x);
    let mut y = FeatureMap::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let dst = y.as_slice_mut().unwrap();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + a) * w + 2 * j + b;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[(p * oh + i) * ow + j] = src[best];
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(
    dy: &FeatureMap,
    argmax: &[usize],
    in_shape: (usize, usize, usize, usize),
) -> FeatureMap {
    let mut dx = FeatureMap::zeros(in_shape);
    let dst = dx.as_slice_mut().unwrap();
    for (g, &idx) in contiguous(dy).iter().zip(argmax) {
        dst[idx] += g;
    }
    dx
}

/// Separable bilinear resampling (half-pixel centers, edge clamped).
#[derive(Debug, Clone)]
pub struct Resize {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl Resize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            in_hw,
            out_hw,
            rows: axis_table(in_hw.0, out_hw.0),
            cols: axis_table(in_hw.1, out_hw.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_hw == self.out_hw
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (n, c, h, w) = dims(x);
        debug_assert_eq!((h, w), self.in_hw);
        let (oh, ow) = self.out_hw;
        let src = contiguous(x);
        let mut y = FeatureMap::zeros((n, c, oh, ow));
        let dst = y.as_slice_mut().unwrap();
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    dst[(p * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        y
    }

    pub fn backward(&self, dy: &FeatureMap) -> FeatureMap {
        let (n, c, oh, ow) = dims(dy);
        let (h, w) = self.in_hw;
        let src = contiguous(dy);
        let mut dx = FeatureMap::zeros((n, c, h, w));
        let dst = dx.as_slice_mut().unwrap();
        for p in 0..n * c {
            let plane = &mut dst[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let g = src[(p * oh + oy) * ow + ox];
                    plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                    plane[y1 * w + x0] += g * fy * (1.0 - fx);
                    plane[y1 * w + x1] += g * fy * fx;
                }
            }
        }
        dx
    }
}

/// Per-(sample, channel) spatial standardization. Returns the normalized map
/// and the `1/sqrt(var + eps)` factors, shaped `(n, c)`.
pub fn instance_norm(x: &FeatureMap) -> (FeatureMap, Array2<f64>) {
    let (n, c, h, w) = dims(x);
    let hw = (h * w) as f64;
    let src = contiguous(x);
    let mut y = FeatureMap::zeros((n, c, h, w));
    let mut inv = Array2::<f64>::zeros((n, c));
    let dst = y.as_slice_mut().unwrap();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let mean = s.iter().sum::<f64>() / hw;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[[p / c, p % c]] = is;
        for (d, v) in dst[p * h * w..(p + 1) * h * w].iter_mut().zip(s) {
            *d = (v - mean) * is;
        }
    }
    (y, inv)
}

/// Backward of [`instance_norm`] given its normalized output.
pub fn instance_norm_backward(
    normed: &FeatureMap,
    inv_std: &Array2<f64>,
    dy: &FeatureMap,
) -> FeatureMap {
    let (n, c, h, w) = dims(normed);
    let hw = h * w;
    let xs = contiguous(normed);
    let gs = contiguous(dy);
    let mut dx = FeatureMap::zeros((n, c, h, w));
    let dst = dx.as_slice_mut().unwrap();
    for p in 0..n * c {
        let xh = &xs[p * hw..(p + 1) * hw];
        let g = &gs[p * hw..(p + 1) * hw];
        let mean_g = g.iter().sum::<f64>() / hw as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        let is = inv_std[[p / c, p % c]];
        for i in 0..hw {
            dst[p * hw + i] = is * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    dx
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(x: &FeatureMap) -> FeatureMap {
    let (n, c, h, w) = dims(x);
    let hw = h * w;
    let src = contiguous(x);
    let mut y = FeatureMap::zeros((n, c, h, w));
    let dst = y.as_slice_mut().unwrap();
    for ni in 0..n {
        let base = ni * c * hw;
        for i in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(src[base + ci * hw + i]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (src[base + ci * hw + i] - mx).exp();
                dst[base + ci * hw + i] = e;
                sum += e;
            }
            for ci in 0..c {
                dst[base + ci * hw + i] /= sum;
            }
        }
    }
    y
}

/// Backward of [`softmax_channels`] given its output probabilities.
pub fn softmax_channels_backward(probs: &FeatureMap, dprobs: &FeatureMap) -> FeatureMap {
    let (n, c, h, w) = dims(probs);
    let hw = h * w;
    let p = contiguous(probs);
    let g = contiguous(dprobs);
    let mut dz = FeatureMap::zeros((n, c, h, w));
    let dst = dz.as_slice_mut().unwrap();
    for ni in 0..n {
        let base = ni * c * hw;
        for i in 0..hw {
            let dot: f64 = (0..c)
                .map(|ci| p[base + ci * hw + i] * g[base + ci * hw + i])
                .sum();
            for ci in 0..c {
                let idx = base + ci * hw + i;
                dst[idx] = p[idx] * (g[idx] - dot);
            }
        }
    }
    dz
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("concat operands share batch and spatial dims")
        .as_standard_layout()
        .into_owned()
}

pub fn split_channels(x: &FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let a = x.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: (usize, usize, usize, usize), seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &FeatureMap, w: &Array4<f64>, b: Option<&Array1<f64>>) -> FeatureMap {
        let (n, c, h, wd) = dims(x);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        FeatureMap::from_shape_fn((n, o, h, wd), |(ni, oi, y, xx)| {
            let mut acc = b.map_or(0.0, |b| b[oi]);
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w[[oi, ci, ky, kx]] * x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_loop_nest() {
        let x = random_map((2, 3, 5, 7), 1);
        for k in [1, 3, 5] {
            let w = random_map((4, 3, k, k), 2);
            let b = Array1::from(vec![0.1, -0.2, 0.3, 0.0]);
            let fast = conv2d(&x, &w, Some(&b));
            let slow = naive_conv(&x, &w, Some(&b));
            let err = (&fast - &slow)
                .mapv(f64::abs)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "k={k} err={err}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> and the weight gradient matches the
        // linear functional w -> <conv_w(x), g>.
        let x = random_map((2, 3, 6, 5), 3);
        let w = random_map((4, 3, 3, 3), 4);
        let g = random_map((2, 4, 6, 5), 5);
        let y = conv2d(&x, &w, None);
        let mut dw = Array4::zeros(w.raw_dim());
        let dx = conv2d_backward(&x, &w, &g, &mut dw, None);
        let lhs = (&y * &g).sum();
        assert!((lhs - (&x * &dx).sum()).abs() < 1e-10);
        assert!((lhs - (&w * &dw).sum()).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_adjoint() {
        let x = random_map((2, 3, 4, 3), 6);
        let w = random_map((3, 2, 2, 2), 7);
        let b = Array1::zeros(2);
        let g = random_map((2, 2, 8, 6), 8);
        let y = conv_transpose2x2(&x, &w, &b);
        let mut dw = Array4::zeros(w.raw_dim());
        let mut db = Array1::zeros(2);
        let dx = conv_transpose2x2_backward(&x, &w, &g, &mut dw, &mut db);
        let lhs = (&y * &g).sum();
        assert!((lhs - (&x * &dx).sum()).abs() < 1e-10);
        assert!((lhs - (&w * &dw).sum()).abs() < 1e-10);
        // direct scatter definition
        let v = y[[1, 1, 5, 2]];
        let direct: f64 = (0..3).map(|c| x[[1, c, 2, 1]] * w[[c, 1, 1, 0]]).sum();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn pool_floors_odd_dims() {
        let x = random_map((1, 2, 19, 9), 9);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), &[1, 2, 9, 4]);
        assert_eq!(arg.len(), 72);
        assert_eq!(y[[0, 1, 3, 2]], {
            let mut m = f64::NEG_INFINITY;
            for a in 0..2 {
                for b in 0..2 {
                    m = m.max(x[[0, 1, 6 + a, 4 + b]]);
                }
            }
            m
        });
    }

    #[test]
    fn resize_identity_and_adjoint() {
        let x = random_map((1, 2, 9, 11), 10);
        let id = Resize::new((9, 11), (9, 11));
        assert_eq!(id.forward(&x), x);
        let r = Resize::new((9, 11), (19, 23));
        let g = random_map((1, 2, 19, 23), 11);
        let lhs = (&r.forward(&x) * &g).sum();
        let rhs = (&x * &r.backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // constants stay constant
        let c = FeatureMap::from_elem((1, 1, 9, 11), 2.5);
        assert!(r.forward(&c).iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = random_map((2, 4, 3, 3), 12).mapv(|v| v * 30.0);
        let p = softmax_channels(&x);
        for v in p.sum_axis(Axis(1)).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
