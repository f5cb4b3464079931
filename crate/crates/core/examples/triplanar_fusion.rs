//! Slices a probability volume along each plane, restacks it and fuses
//! three planar predictions.

use gliomaseg::triplanar::{
    argmax_labels, fuse_with, restack, FusionMode, Plane, ProbabilityVolume,
};
use ndarray::{Array4, Axis};

fn volume(bias: usize) -> ProbabilityVolume {
    let mut p = Array4::<f32>::from_shape_fn((4, 6, 5, 4), |(c, x, y, z)| {
        1.0 + ((c + bias) * (x + y + z) % 5) as f32
    });
    for mut lane in p.lanes_mut(Axis(0)) {
        let s: f32 = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    ProbabilityVolume::new(p).expect("normalized")
}

fn main() -> gliomaseg::Result<()> {
    let planes = [volume(0), volume(1), volume(2)];
    for plane in Plane::ALL {
        let slices = planes[0].unstack(plane);
        let back = restack(plane, &slices)?;
        println!(
            "{plane}: {} slices of {:?}, round trip exact: {}",
            slices.len(),
            slices[0].dim(),
            back == planes[0]
        );
    }
    for mode in [FusionMode::MeanProbability, FusionMode::MeanLogit] {
        let fused = fuse_with(&planes, mode)?;
        let labels = argmax_labels(&fused);
        let tumor = labels.iter().filter(|&&l| l != 0).count();
        println!(
            "{mode:?}: simplex error {:.1e}, tumor voxels {tumor}",
            fused.max_simplex_error()
        );
    }
    Ok(())
}
