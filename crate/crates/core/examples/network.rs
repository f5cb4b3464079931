//! Runs the attention-gated recurrent-residual U-Net on a random batch,
//! including an odd-sized input, and prints the bottleneck shape.

use gliomaseg::network::{network_forward, NetworkConfig, NetworkParams, Parameters};
use gliomaseg::tensor::FeatureMap;
use ndarray::Axis;

fn main() -> gliomaseg::Result<()> {
    let params = NetworkParams::init(&NetworkConfig::default())?;
    println!("default network: {} parameters", params.param_count());

    let tiny = NetworkParams::init(&NetworkConfig::tiny())?;
    for (h, w) in [(32, 32), (19, 27)] {
        let x = FeatureMap::from_shape_fn((2, 3, h, w), |(n, c, i, j)| {
            ((n + c + i * j) % 7) as f64 / 7.0
        });
        let probs = network_forward(&x, &tiny)?;
        let worst = probs
            .sum_axis(Axis(1))
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
        let trace = tiny.forward_trace(&x)?;
        println!(
            "{h}x{w}: probs {:?}, bottleneck {:?}, max |sum-1| {worst:.1e}",
            probs.shape(),
            trace.bottleneck.shape()
        );
    }
    Ok(())
}
