//! Clips, normalizes and center-crops one phantom case, then undoes the crop.

use gliomaseg::phantoms::{make_phantom, PhantomSpec};
use gliomaseg::preprocess::{preprocess_case, PreprocessConfig};

fn main() -> gliomaseg::Result<()> {
    let raw = make_phantom("demo", &PhantomSpec::default())?;
    let cfg = PreprocessConfig {
        crop_shape: [48, 48, 40],
        ..Default::default()
    };
    let case = preprocess_case(&raw, &cfg)?;
    let manifest = case.crop.as_ref().expect("preprocessing records the crop");
    println!(
        "raw {:?} -> cropped {:?} at offset {:?}",
        raw.shape(),
        case.shape(),
        manifest.offsets
    );

    for (m, v) in &case.volumes {
        let v = &v.voxels;
        let (lo, hi) = v
            .iter()
            .fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        println!("{m}: range [{lo:.3}, {hi:.3}]");
    }

    let labels = &case.labels.as_ref().expect("phantoms are labelled").voxels;
    let restored = manifest.uncrop(labels, 0)?;
    println!("uncropped labels back to {:?}", restored.dim());
    Ok(())
}
