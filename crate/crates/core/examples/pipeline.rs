//! Runs the whole command pipeline on phantoms with a tiny configuration:
//! preprocess, train three planes, infer, evaluate, train and apply the
//! survival model.
//!
//! `cargo run --release --example pipeline -- /tmp/run`

use gliomaseg::cli;
use gliomaseg::config::RunConfig;
use gliomaseg::phantoms::PhantomSpec;
use gliomaseg::report::format_summary;
use gliomaseg::triplanar::Plane;

fn main() -> gliomaseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "pipeline_run".into());
    let data = format!("{out}/data");
    let mut overrides = vec![
        format!("data_root={data:?}"),
        format!("output_dir={:?}", format!("{out}/run")),
        "preprocess.crop_shape=[32, 32, 32]".to_string(),
        "network.level_filters=[4, 8, 16, 32]".to_string(),
        "survival.epochs=50".to_string(),
    ];
    for plane in Plane::ALL {
        overrides.push(format!("segmentation.{plane}.iterations=40"));
        overrides.push(format!("segmentation.{plane}.lr=1e-3"));
        overrides.push(format!("segmentation.{plane}.checkpoint_every=10"));
    }
    let cfg = RunConfig::resolve(None, None, &overrides)?;

    cli::cmd_make_phantoms(cfg.data_root.as_ref(), 6, &PhantomSpec::default())?;
    let pre = cli::cmd_preprocess(&cfg, &[])?;
    println!("preprocessed {} cases", pre.written.len());
    for plane in Plane::ALL {
        let t = cli::cmd_train_seg(&cfg, plane, false, None)?;
        println!(
            "{plane}: final loss {:.4}",
            t.log.last().map_or(f64::NAN, |r| r.loss)
        );
    }
    let written = cli::cmd_infer(&cfg, &[])?;
    println!("wrote {} segmentations", written.len());
    let eval = cli::cmd_evaluate(
        &cfg,
        &cfg.layout().predictions(),
        &cfg.data_root,
        &[Plane::Axial],
    )?;
    print!("{}", format_summary(&eval.summary));

    let surv = cli::cmd_train_surv(&cfg)?;
    println!(
        "survival train mse {:.0}, held-out {:?}",
        surv.train.mse, surv.test_ids
    );
    let pred = cli::cmd_predict_surv(&cfg, &[], true)?;
    for r in &pred.rows {
        match (r.predicted_days, &r.error) {
            (Some(d), _) => println!("{}: {d:.0} days", r.case_id),
            (None, e) => println!("{}: {}", r.case_id, e.as_deref().unwrap_or("no prediction")),
        }
    }
    Ok(())
}
