use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{join, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{self, FeatureMap, Resize};

fn he_normal<R: Rng>(
    shape: (usize, usize, usize, usize),
    fan_in: usize,
    rng: &mut R,
) -> Array4<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array4::from_shape_simple_fn(shape, || dist.sample(rng))
}

fn check_channels(x: &FeatureMap, expected: usize, what: &str) -> Result<()> {
    if x.shape()[1] != expected {
        return Err(Error::shape(format!(
            "{what}: expected {expected} input channels, got {}",
            x.shape()[1]
        )));
    }
    Ok(())
}

/// Same-padded stride-1 convolution, weight `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "same-padded conv needs an odd kernel");
        Self {
            weight: he_normal((cout, cin, k, k), cin * k * k, rng),
            bias: bias.then(|| Array1::zeros(cout)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        check_channels(x, self.in_channels(), "conv2d")?;
        Ok(tensor::conv2d(x, &self.weight, self.bias.as_ref()))
    }

    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        tensor::conv2d_backward(x, &self.weight, dy, &mut grad.weight, grad.bias.as_mut())
    }
}

impl Parameters for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.view().into_dyn()));
        }
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b.view_mut().into_dyn()));
        }
    }
}

/// Kernel-2 stride-2 transposed convolution, weight `(in, out, 2, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl UpConv {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            weight: he_normal((cin, cout, 2, 2), cin, rng),
            bias: Array1::zeros(cout),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        check_channels(x, self.weight.shape()[0], "transposed conv")?;
        Ok(tensor::conv_transpose2x2(x, &self.weight, &self.bias))
    }

    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut UpConv) -> FeatureMap {
        tensor::conv_transpose2x2_backward(x, &self.weight, dy, &mut grad.weight, &mut grad.bias)
    }
}

impl Parameters for UpConv {
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

/// Recurrent convolutional layer.
///
/// `Z(t) = conv(w_f, u) + conv(w_k, x(t-1)) + b_k`, `x(t) = relu(inorm(Z(t)))`,
/// with `x(-1) = 0`. The feedforward term is computed once and reused across
/// steps; `b_k` lives on the feedforward conv.
#[derive(Debug, Clone, PartialEq)]
pub struct Rcl {
    pub feedforward: Conv2d,
    pub recurrent: Conv2d,
    pub t_steps: usize,
}

/// Per-step state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RclTrace {
    pub input: FeatureMap,
    /// Pre-normalization net input `Z(t)` for `t = 0..=t_steps`.
    pub net_input: Vec<FeatureMap>,
    normed: Vec<FeatureMap>,
    inv_std: Vec<Array2<f64>>,
    /// States `x(t)` for `t = 0..=t_steps`.
    pub states: Vec<FeatureMap>,
}

impl Rcl {
    pub fn new<R: Rng>(cin: usize, cout: usize, t_steps: usize, rng: &mut R) -> Self {
        Self {
            feedforward: Conv2d::new(cin, cout, 3, true, rng),
            recurrent: Conv2d::new(cout, cout, 3, false, rng),
            t_steps,
        }
    }

    pub fn forward(&self, u: &FeatureMap) -> Result<FeatureMap> {
        Ok(self
            .forward_trace(u)?
            .states
            .pop()
            .expect("at least one step"))
    }

    pub fn forward_trace(&self, u: &FeatureMap) -> Result<RclTrace> {
        let ff = self.feedforward.forward(u)?;
        let steps = self.t_steps + 1;
        let mut trace = RclTrace {
            input: u.clone(),
            net_input: Vec::with_capacity(steps),
            normed: Vec::with_capacity(steps),
            inv_std: Vec::with_capacity(steps),
            states: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let z = if t == 0 {
                ff.clone()
            } else {
                &ff + &self.recurrent.forward(&trace.states[t - 1])?
            };
            let (normed, inv_std) = tensor::instance_norm(&z);
            let state = tensor::relu(&normed);
            trace.net_input.push(z);
            trace.normed.push(normed);
            trace.inv_std.push(inv_std);
            trace.states.push(state);
        }
        Ok(trace)
    }

    pub fn backward(&self, trace: &RclTrace, dy: &FeatureMap, grad: &mut Rcl) -> FeatureMap {
        let steps = trace.states.len();
        let mut d_state = dy.clone();
        let mut d_ff = FeatureMap::zeros(dy.raw_dim());
        for t in (0..steps).rev() {
            let d_norm = tensor::relu_backward(&trace.states[t], &d_state);
            let dz = tensor::instance_norm_backward(&trace.normed[t], &trace.inv_std[t], &d_norm);
            d_ff += &dz;
            if t > 0 {
                d_state = self
                    .recurrent
                    .backward(&trace.states[t - 1], &dz, &mut grad.recurrent);
            }
        }
        self.feedforward
            .backward(&trace.input, &d_ff, &mut grad.feedforward)
    }
}

impl Parameters for Rcl {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.feedforward.collect(&join(prefix, "w_f"), out);
        self.recurrent.collect(&join(prefix, "w_k"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.feedforward.collect_mut(&join(prefix, "w_f"), out);
        self.recurrent.collect_mut(&join(prefix, "w_k"), out);
    }
}

/// Two stacked RCLs around a residual shortcut: `F(x~) + x~`, where `x~` is a
/// 1x1 projection of `x` when the channel counts differ.
#[derive(Debug, Clone, PartialEq)]
pub struct RrcnnBlock {
    pub projection: Option<Conv2d>,
    pub rcl: [Rcl; 2],
}

#[derive(Debug, Clone)]
pub struct RrcnnTrace {
    input: FeatureMap,
    shortcut: FeatureMap,
    first: RclTrace,
    second: RclTrace,
}

impl RrcnnBlock {
    pub fn new<R: Rng>(cin: usize, cout: usize, t_steps: usize, rng: &mut R) -> Self {
        let projection = (cin != cout).then(|| Conv2d::new(cin, cout, 1, true, rng));
        Self {
            projection,
            rcl: [
                Rcl::new(cout, cout, t_steps, rng),
                Rcl::new(cout, cout, t_steps, rng),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        match &self.projection {
            Some(p) => p.in_channels(),
            None => self.rcl[0].feedforward.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.rcl[1].feedforward.out_channels()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (y, _) = self.forward_trace(x)?;
        Ok(y)
    }

    pub fn forward_trace(&self, x: &FeatureMap) -> Result<(FeatureMap, RrcnnTrace)> {
        check_channels(x, self.in_channels(), "rrcnn block")?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        let first = self.rcl[0].forward_trace(&shortcut)?;
        let second = self.rcl[1].forward_trace(first.states.last().unwrap())?;
        let y = second.states.last().unwrap() + &shortcut;
        Ok((
            y,
            RrcnnTrace {
                input: x.clone(),
                shortcut,
                first,
                second,
            },
        ))
    }

    pub fn backward(
        &self,
        trace: &RrcnnTrace,
        dy: &FeatureMap,
        grad: &mut RrcnnBlock,
    ) -> FeatureMap {
        let d_mid = self.rcl[1].backward(&trace.second, dy, &mut grad.rcl[1]);
        let mut d_short = self.rcl[0].backward(&trace.first, &d_mid, &mut grad.rcl[0]);
        d_short += dy;
        match (&self.projection, &mut grad.projection) {
            (Some(p), Some(gp)) => p.backward(&trace.input, &d_short, gp),
            _ => {
                debug_assert_eq!(trace.shortcut.shape(), trace.input.shape());
                d_short
            }
        }
    }
}

impl Parameters for RrcnnBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        if let Some(p) = &self.projection {
            p.collect(&join(prefix, "proj"), out);
        }
        self.rcl[0].collect(&join(prefix, "rcl0"), out);
        self.rcl[1].collect(&join(prefix, "rcl1"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        if let Some(p) = &mut self.projection {
            p.collect_mut(&join(prefix, "proj"), out);
        }
        let [a, b] = &mut self.rcl;
        a.collect_mut(&join(prefix, "rcl0"), out);
        b.collect_mut(&join(prefix, "rcl1"), out);
    }
}

/// Additive attention gate on a skip connection.
///
/// The skip map is bilinearly resampled to the gating signal's grid, the
/// scalar-per-pixel coefficient is computed there, then resampled back to
/// the skip's exact dims (odd sizes included) and multiplied in.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate {
    pub w_x: Conv2d,
    pub w_g: Conv2d,
    pub psi: Conv2d,
}

#[derive(Debug, Clone)]
pub struct GateTrace {
    skip: FeatureMap,
    gate: FeatureMap,
    skip_coarse: FeatureMap,
    hidden: FeatureMap,
    alpha_coarse: FeatureMap,
    /// Attention coefficients at the skip resolution, shape `(n, 1, h, w)`.
    pub alpha: FeatureMap,
    down: Resize,
    up: Resize,
}

impl AttentionGate {
    pub fn new<R: Rng>(skip_channels: usize, gate_channels: usize, rng: &mut R) -> Self {
        let inter = (skip_channels / 2).max(1);
        Self {
            w_x: Conv2d::new(skip_channels, inter, 1, false, rng),
            w_g: Conv2d::new(gate_channels, inter, 1, true, rng),
            psi: Conv2d::new(inter, 1, 1, true, rng),
        }
    }

    pub fn forward(&self, skip: &FeatureMap, gate: &FeatureMap) -> Result<FeatureMap> {
        let (y, _) = self.forward_trace(skip, gate)?;
        Ok(y)
    }

    pub fn forward_trace(
        &self,
        skip: &FeatureMap,
        gate: &FeatureMap,
    ) -> Result<(FeatureMap, GateTrace)> {
        if skip.shape()[0] != gate.shape()[0] {
            return Err(Error::shape("attention gate: batch sizes differ"));
        }
        let skip_hw = (skip.shape()[2], skip.shape()[3]);
        let gate_hw = (gate.shape()[2], gate.shape()[3]);
        let down = Resize::new(skip_hw, gate_hw);
        let up = Resize::new(gate_hw, skip_hw);
        let skip_coarse = down.forward(skip);
        let pre = &self.w_x.forward(&skip_coarse)? + &self.w_g.forward(gate)?;
        let hidden = tensor::relu(&pre);
        let alpha_coarse = self.psi.forward(&hidden)?.mapv(tensor::sigmoid);
        let alpha = up.forward(&alpha_coarse);
        let y = skip * &alpha;
        Ok((
            y,
            GateTrace {
                skip: skip.clone(),
                gate: gate.clone(),
                skip_coarse,
                hidden,
                alpha_coarse,
                alpha,
                down,
                up,
            },
        ))
    }

    /// Returns `(d_skip, d_gate)`.
    pub fn backward(
        &self,
        trace: &GateTrace,
        dy: &FeatureMap,
        grad: &mut AttentionGate,
    ) -> (FeatureMap, FeatureMap) {
        let mut d_skip = dy * &trace.alpha;
        let d_alpha = (dy * &trace.skip)
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        let d_alpha_coarse = trace.up.backward(&d_alpha);
        let d_logit = &d_alpha_coarse * &trace.alpha_coarse.mapv(|a| a * (1.0 - a));
        let d_hidden = self.psi.backward(&trace.hidden, &d_logit, &mut grad.psi);
        let d_pre = tensor::relu_backward(&trace.hidden, &d_hidden);
        let d_gate = self.w_g.backward(&trace.gate, &d_pre, &mut grad.w_g);
        let d_skip_coarse = self.w_x.backward(&trace.skip_coarse, &d_pre, &mut grad.w_x);
        d_skip += &trace.down.backward(&d_skip_coarse);
        (d_skip, d_gate)
    }
}

impl Parameters for AttentionGate {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.w_x.collect(&join(prefix, "w_x"), out);
        self.w_g.collect(&join(prefix, "w_g"), out);
        self.psi.collect(&join(prefix, "psi"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.w_x.collect_mut(&join(prefix, "w_x"), out);
        self.w_g.collect_mut(&join(prefix, "w_g"), out);
        self.psi.collect_mut(&join(prefix, "psi"), out);
    }
}
