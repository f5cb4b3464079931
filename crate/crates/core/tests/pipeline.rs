//! End-to-end smoke test of the command pipeline on small phantoms.

use std::path::Path;
use std::process::Command;

use gliomaseg::cli;
use gliomaseg::config::{RunConfig, EFFECTIVE_CONFIG};
use gliomaseg::data::list_cases;
use gliomaseg::network::{NetworkConfig, NetworkParams, Parameters};
use gliomaseg::triplanar::Plane;

const BIN: &str = env!("CARGO_BIN_EXE_gliomaseg");

fn small_spec_overrides(data: &Path, out: &Path) -> Vec<String> {
    let mut o = vec![
        format!("data_root={:?}", data.to_string_lossy()),
        format!("output_dir={:?}", out.to_string_lossy()),
        "preprocess.crop_shape=[16, 16, 16]".into(),
        "network.level_filters=[4, 8, 16, 32]".into(),
        "survival.epochs=5".into(),
        "survival.slab_size=4".into(),
    ];
    for p in Plane::ALL {
        o.push(format!("segmentation.{p}.iterations=2"));
        o.push(format!("segmentation.{p}.batch_slabs=1"));
        o.push(format!("segmentation.{p}.slab_size=4"));
    }
    o
}

fn gliomaseg(args: &[&str], overrides: &[String]) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for o in overrides {
        cmd.arg("--set").arg(o);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn default_parameter_count_matches_golden() {
    let golden: usize = include_str!("golden/param_count.txt")
        .trim()
        .parse()
        .unwrap();
    let params = NetworkParams::init(&NetworkConfig::default()).unwrap();
    assert_eq!(params.param_count(), golden);
}

#[test]
fn command_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let overrides = small_spec_overrides(&data, &out);

    let spec = gliomaseg::phantoms::PhantomSpec {
        shape: [24, 24, 24],
        center: [12.0; 3],
        et_radius: 2.5,
        tc_radius: 4.0,
        wt_radius: 6.0,
        brain_radii: [10.0, 9.0, 8.0],
        ..Default::default()
    };
    cli::cmd_make_phantoms(&data, 3, &spec).unwrap();
    assert_eq!(list_cases(&data).unwrap().len(), 3);

    let first = gliomaseg(&["preprocess"], &overrides);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert!(String::from_utf8_lossy(&first.stdout).contains("preprocessed 3 cases, 0 up to date"));
    let second = gliomaseg(&["preprocess"], &overrides);
    assert!(String::from_utf8_lossy(&second.stdout).contains("preprocessed 0 cases, 3 up to date"));
    assert!(out.join("preprocessed").join(EFFECTIVE_CONFIG).is_file());

    for p in ["sagittal", "coronal", "axial"] {
        let o = gliomaseg(&["train-seg", "--plane", p], &overrides);
        assert!(
            o.status.success(),
            "{p}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = gliomaseg(&["infer"], &overrides);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    let cfg = RunConfig::resolve(None, None, &overrides).unwrap();
    let eval = cli::cmd_evaluate(&cfg, &data, &data, &[Plane::Axial]).unwrap();
    for row in &eval.summary {
        assert_eq!((row.dsc, row.hd95), (1.0, 0.0), "{:?}", row.region);
    }
    assert_eq!(eval.overlays.len(), 3);
    let o = gliomaseg(&["evaluate"], &overrides);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("region"));

    let o = gliomaseg(&["train-surv"], &overrides);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = gliomaseg(&["predict-surv", "--evaluate"], &overrides);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("phantom_")).count(),
        3
    );
    assert!(stdout.contains("spearman"));
}

#[test]
fn missing_case_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let overrides = small_spec_overrides(&tmp.path().join("nothing"), &tmp.path().join("run"));
    let o = gliomaseg(&["preprocess", "nope"], &overrides);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
