//! Scores a shifted sphere against a reference sphere with DSC, HD95,
//! sensitivity and specificity.

use gliomaseg::metrics::{evaluate_region, hausdorff, surface_distances, Mask};

fn sphere(center: [f64; 3], r: f64) -> Mask {
    Mask::from_shape_fn((32, 32, 32), |(x, y, z)| {
        let d = [
            x as f64 - center[0],
            y as f64 - center[1],
            z as f64 - center[2],
        ];
        d.iter().map(|v| v * v).sum::<f64>() <= r * r
    })
}

fn main() -> gliomaseg::Result<()> {
    let gt = sphere([16.0, 16.0, 16.0], 8.0);
    for shift in [0.0, 1.0, 3.0] {
        let pred = sphere([16.0 + shift, 16.0, 16.0], 8.0);
        let s = evaluate_region(&pred, &gt)?;
        let hd = surface_distances(&pred, &gt, 1.0)?
            .map(|d| hausdorff(&d))
            .unwrap_or(0.0);
        println!(
            "shift {shift}: dsc {:.3} hd95 {:.2} hd {hd:.2} sens {:.3} spec {:.4}",
            s.dsc, s.hd95, s.sensitivity, s.specificity
        );
    }
    let empty = Mask::from_elem((32, 32, 32), false);
    println!("empty prediction: {:?}", evaluate_region(&empty, &gt)?);
    Ok(())
}
