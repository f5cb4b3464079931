//! Evaluates the Dice, focal and combined losses with their gradients.

use gliomaseg::losses::{dice_loss_grad, focal_loss_grad, one_hot, total_loss_grad, LossConfig};
use gliomaseg::tensor::{softmax_channels, FeatureMap};
use ndarray::{s, Array3};

fn main() -> gliomaseg::Result<()> {
    let labels = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| ((i / 2 + j / 3) % 4) as u8);
    let target = one_hot(&labels, 4)?;
    let logits = FeatureMap::from_shape_fn((1, 4, 8, 8), |(_, c, i, j)| {
        ((c * 5 + i * 3 + j) % 11) as f64 / 4.0
    });
    let probs = softmax_channels(&logits);
    let cfg = LossConfig::default();

    let dice = dice_loss_grad(&probs, &target, &cfg)?;
    let focal = focal_loss_grad(&probs, &target, &cfg)?;
    let total = total_loss_grad(&probs, &target, &cfg)?;
    println!(
        "dice {:.4}  focal {:.4}  total {:.4}",
        dice.value, focal.value, total.value
    );
    println!(
        "dL/dp at (0,0,0,0..4): {:?}",
        total.grad.slice(s![0, .., 0, 0]).to_vec()
    );

    let perfect = total_loss_grad(&target, &target, &cfg)?;
    println!(
        "perfect prediction: dice {:.2e}, focal {:.2e}",
        perfect.dice, perfect.focal
    );
    Ok(())
}
