//! Applies the stochastic augmentation pipeline to one labelled slice and
//! reports which transforms fired.

use gliomaseg::augment::{augment_pair_traced, fork_rng, AugmentConfig};
use gliomaseg::phantoms::{make_phantom, PhantomSpec};
use gliomaseg::preprocess::{preprocess_case, PreprocessConfig};
use gliomaseg::triplanar::{extract_slab, Plane};
use ndarray::Axis;

fn main() -> gliomaseg::Result<()> {
    let raw = make_phantom("demo", &PhantomSpec::default())?;
    let case = preprocess_case(
        &raw,
        &PreprocessConfig {
            crop_shape: [48, 48, 40],
            ..Default::default()
        },
    )?;
    let slab = extract_slab(&case, Plane::Axial, 20, 1)?;
    let image = slab.data.index_axis(Axis(0), 0).to_owned();
    let label = slab
        .labels
        .expect("labelled case")
        .index_axis(Axis(0), 0)
        .to_owned();

    let cfg = AugmentConfig::default();
    for draw in 0..5 {
        let mut rng = fork_rng(7, draw);
        let (img, lab, trace) = augment_pair_traced(&image, &label, &cfg, &mut rng)?;
        let tumor = lab.iter().filter(|&&l| l != 0).count();
        println!(
            "draw {draw}: fired {:?}, image {:?}, tumor pixels {tumor}",
            trace.as_array(),
            img.dim()
        );
    }
    Ok(())
}
