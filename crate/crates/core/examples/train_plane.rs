//! Trains a small axial model on phantoms, checkpoints halfway, resumes and
//! segments a case with the result.
//!
//! `cargo run --release --example train_plane`

use gliomaseg::augment::AugmentConfig;
use gliomaseg::data::derive_region_masks;
use gliomaseg::metrics::{confusion, dsc};
use gliomaseg::network::NetworkConfig;
use gliomaseg::phantoms::{make_phantom_set, PhantomSpec};
use gliomaseg::preprocess::{preprocess_case, PreprocessConfig};
use gliomaseg::training::{
    format_log_row, train_plane, SegCheckpoint, SegTrainConfig, TrainOptions, CHECKPOINT_DIR,
};
use gliomaseg::triplanar::{segment_case, FusionMode, Plane};

fn main() -> gliomaseg::Result<()> {
    let cfg_pre = PreprocessConfig {
        crop_shape: [32; 3],
        ..Default::default()
    };
    let cases = make_phantom_set(2, &PhantomSpec::default())?
        .iter()
        .map(|c| preprocess_case(c, &cfg_pre))
        .collect::<gliomaseg::Result<Vec<_>>>()?;
    let network = NetworkConfig::tiny();
    let cfg = SegTrainConfig {
        iterations: 60,
        checkpoint_every: 20,
        batch_slabs: 2,
        lr: 1e-3,
        augment: AugmentConfig::disabled(),
        ..SegTrainConfig::for_plane(Plane::Axial)
    };
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = |resume| TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume,
        stop_after: None,
    };

    let first = train_plane(
        &cases,
        &cfg,
        &network,
        TrainOptions {
            stop_after: Some(30),
            ..opts(None)
        },
    )?;
    println!(
        "stopped at {}",
        format_log_row(first.log.last().expect("ran"))
    );
    let resumed = SegCheckpoint::load(&dir.path().join(CHECKPOINT_DIR))?;
    let done = train_plane(&cases, &cfg, &network, opts(Some(resumed)))?;
    println!(
        "finished at {}",
        format_log_row(done.log.last().expect("ran"))
    );

    let model = done.checkpoint.params;
    let labels = segment_case(
        &cases[0],
        &[(Plane::Axial, &model)],
        FusionMode::MeanProbability,
        8,
    )?;
    let (p, g) = (
        derive_region_masks(&labels)?,
        derive_region_masks(cases[0].labels.as_ref().expect("labelled"))?,
    );
    let g_wt = cases[0]
        .crop
        .as_ref()
        .expect("cropped")
        .uncrop(&g.wt, false)?;
    println!(
        "whole-tumor dsc after 60 iterations: {:.3}",
        dsc(&confusion(&p.wt, &g_wt)?)
    );
    Ok(())
}
