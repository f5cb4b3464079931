use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AttentionGate, Conv2d, GateTrace, RrcnnBlock, RrcnnTrace, UpConv};
use super::params::{join, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{self, FeatureMap, Resize};

/// Multiplier on the He-normal init of the 1x1 classifier.
pub const HEAD_INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleKind {
    #[default]
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub level_filters: Vec<usize>,
    pub t_steps: usize,
    pub norm: NormKind,
    pub upsample: UpsampleKind,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_classes: 4,
            level_filters: vec![64, 128, 256, 512],
            t_steps: 2,
            norm: NormKind::Instance,
            upsample: UpsampleKind::TransposedConv,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Reduced-width variant used for desk-scale training and gradient checks.
    pub fn tiny() -> Self {
        Self {
            level_filters: vec![4, 8, 16, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_filters.len() < 2 {
            return Err(Error::Config("need at least two encoder levels".into()));
        }
        if self.level_filters.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "level_filters must be strictly increasing, got {:?}",
                self.level_filters
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.in_channels == 0 || self.level_filters[0] == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Smallest accepted slice height/width.
    pub fn min_spatial(&self) -> usize {
        1 << self.level_filters.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.level_filters.last().unwrap()
    }
}

/// All learnable tensors of one planar model.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    /// One block per level; the last one is the bottleneck.
    pub encoder: Vec<RrcnnBlock>,
    /// `up[l]` maps level `l + 1` features to level `l` channels.
    pub up: Vec<UpConv>,
    pub gates: Vec<AttentionGate>,
    pub decoder: Vec<RrcnnBlock>,
    pub head: Conv2d,
}

impl NetworkParams {
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let f = &config.level_filters;
        let levels = f.len();
        let mut encoder = Vec::with_capacity(levels);
        let mut cin = config.in_channels;
        for &cout in f {
            encoder.push(RrcnnBlock::new(cin, cout, config.t_steps, &mut rng));
            cin = cout;
        }
        let mut up = Vec::with_capacity(levels - 1);
        let mut gates = Vec::with_capacity(levels - 1);
        let mut decoder = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            up.push(UpConv::new(f[l + 1], f[l], &mut rng));
            gates.push(AttentionGate::new(f[l], f[l + 1], &mut rng));
            decoder.push(RrcnnBlock::new(2 * f[l], f[l], config.t_steps, &mut rng));
        }
        let mut head = Conv2d::new(f[0], config.n_classes, 1, true, &mut rng);
        head.weight.mapv_inplace(|w| w * HEAD_INIT_SCALE);
        Ok(Self {
            config: config.clone(),
            encoder,
            up,
            gates,
            decoder,
            head,
        })
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let s = x.shape();
        if s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, s[1]
            )));
        }
        let min = self.config.min_spatial();
        if s[2] < min || s[3] < min {
            return Err(Error::shape(format!(
                "slice {}x{} smaller than the minimum {min}x{min}",
                s[2], s[3]
            )));
        }
        if s[0] == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Per-pixel class probabilities, `(n, n_classes, h, w)`.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_trace(x)?.probs)
    }

    /// Deepest encoder activation, `(n, filters[last], h / 2^(L-1), w / 2^(L-1))`.
    pub fn bottleneck(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.encoder.len() - 1;
        for (l, block) in self.encoder.iter().enumerate() {
            h = block.forward(&h)?;
            if l < last {
                h = tensor::max_pool2(&h).0;
            }
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &FeatureMap) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let levels = self.encoder.len();
        let mut enc_out = Vec::with_capacity(levels);
        let mut enc_traces = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            let (y, tr) = block.forward_trace(&h)?;
            enc_traces.push(tr);
            if l + 1 < levels {
                let (p, arg) = tensor::max_pool2(&y);
                pools.push(arg);
                h = p;
            }
            enc_out.push(y);
        }

        let mut dec_steps: Vec<Option<DecoderStep>> = (0..levels - 1).map(|_| None).collect();
        let mut deeper = enc_out[levels - 1].clone();
        for l in (0..levels - 1).rev() {
            let skip = &enc_out[l];
            let skip_hw = (skip.shape()[2], skip.shape()[3]);
            let upsampled = self.up[l].forward(&deeper)?;
            let resize = Resize::new((upsampled.shape()[2], upsampled.shape()[3]), skip_hw);
            let matched = if resize.is_identity() {
                upsampled
            } else {
                resize.forward(&upsampled)
            };
            let (attended, gate_trace) = self.gates[l].forward_trace(skip, &deeper)?;
            let cat = tensor::concat_channels(&attended, &matched);
            let (out, block_trace) = self.decoder[l].forward_trace(&cat)?;
            dec_steps[l] = Some(DecoderStep {
                deeper: deeper.clone(),
                resize,
                gate: gate_trace,
                block: block_trace,
            });
            deeper = out;
        }
        let logits = self.head.forward(&deeper)?;
        let probs = tensor::softmax_channels(&logits);
        Ok(ForwardTrace {
            input_shape: x.dim(),
            bottleneck: enc_out[levels - 1].clone(),
            enc_out,
            enc_traces,
            pools,
            dec_steps: dec_steps.into_iter().map(|s| s.unwrap()).collect(),
            head_input: deeper,
            probs,
        })
    }

    /// Backpropagates a gradient w.r.t. the output probabilities. Gradients
    /// are accumulated into `grad` (same structure as `self`).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_probs: &FeatureMap,
        grad: &mut NetworkParams,
    ) -> FeatureMap {
        let levels = self.encoder.len();
        let d_logits = tensor::softmax_channels_backward(&trace.probs, d_probs);
        let mut d_deeper = self
            .head
            .backward(&trace.head_input, &d_logits, &mut grad.head);
        let mut d_enc: Vec<FeatureMap> = trace
            .enc_out
            .iter()
            .map(|e| FeatureMap::zeros(e.raw_dim()))
            .collect();
        for l in 0..levels - 1 {
            let step = &trace.dec_steps[l];
            let skip_c = trace.enc_out[l].shape()[1];
            let d_cat = self.decoder[l].backward(&step.block, &d_deeper, &mut grad.decoder[l]);
            let (d_att, d_matched) = tensor::split_channels(&d_cat, skip_c);
            let d_up = if step.resize.is_identity() {
                d_matched
            } else {
                step.resize.backward(&d_matched)
            };
            let (d_skip, d_gate) = self.gates[l].backward(&step.gate, &d_att, &mut grad.gates[l]);
            d_enc[l] += &d_skip;
            let mut d_prev = self.up[l].backward(&step.deeper, &d_up, &mut grad.up[l]);
            d_prev += &d_gate;
            d_deeper = d_prev;
        }
        // d_deeper now holds the gradient of the bottleneck output.
        d_enc[levels - 1] += &d_deeper;
        let mut d_h = FeatureMap::zeros(trace.input_shape);
        for l in (0..levels).rev() {
            let d_in =
                self.encoder[l].backward(&trace.enc_traces[l], &d_enc[l], &mut grad.encoder[l]);
            if l == 0 {
                d_h = d_in;
            } else {
                let prev = trace.enc_out[l - 1].dim();
                d_enc[l - 1] += &tensor::max_pool2_backward(&d_in, &trace.pools[l - 1], prev);
            }
        }
        d_h
    }
}

#[derive(Debug, Clone)]
struct DecoderStep {
    deeper: FeatureMap,
    resize: Resize,
    gate: GateTrace,
    block: RrcnnTrace,
}

/// Everything a forward pass produced that the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input_shape: (usize, usize, usize, usize),
    pub bottleneck: FeatureMap,
    enc_out: Vec<FeatureMap>,
    enc_traces: Vec<RrcnnTrace>,
    pools: Vec<Vec<usize>>,
    dec_steps: Vec<DecoderStep>,
    head_input: FeatureMap,
    pub probs: FeatureMap,
}

impl Parameters for NetworkParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        for (l, b) in self.encoder.iter().enumerate() {
            b.collect(&join(prefix, &format!("enc{l}")), out);
        }
        for l in 0..self.decoder.len() {
            self.up[l].collect(&join(prefix, &format!("up{l}")), out);
            self.gates[l].collect(&join(prefix, &format!("gate{l}")), out);
            self.decoder[l].collect(&join(prefix, &format!("dec{l}")), out);
        }
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        for (l, b) in self.encoder.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("enc{l}")), out);
        }
        for (l, ((u, g), d)) in self
            .up
            .iter_mut()
            .zip(self.gates.iter_mut())
            .zip(self.decoder.iter_mut())
            .enumerate()
        {
            u.collect_mut(&join(prefix, &format!("up{l}")), out);
            g.collect_mut(&join(prefix, &format!("gate{l}")), out);
            d.collect_mut(&join(prefix, &format!("dec{l}")), out);
        }
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}
