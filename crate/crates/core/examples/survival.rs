//! Fits the survival regressor on synthetic fused features and classifies
//! held-out predictions into short, mid and long survivors.

use gliomaseg::survival::{
    classify_survival, train_survival, SurvTrainConfig, SurvivalSample, FUSED_FEATURES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gliomaseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let weights: Vec<f64> = (0..FUSED_FEATURES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let samples: Vec<SurvivalSample> = (0..40)
        .map(|i| {
            let features: Vec<f64> = (0..FUSED_FEATURES)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let age = rng.random_range(30.0..80.0);
            let signal: f64 = features.iter().zip(&weights).map(|(f, w)| f * w).sum();
            SurvivalSample {
                case_id: format!("case_{i:03}"),
                features,
                age,
                survival_days: Some((400.0 + 60.0 * signal - 3.0 * (age - 55.0)).max(10.0)),
            }
        })
        .collect();

    let cfg = SurvTrainConfig::default();
    let (model, report) = train_survival(&samples, &cfg)?;
    println!(
        "train mse {:.0} rho {:.2} acc {:.2} | held-out mse {:.0} rho {:.2} acc {:.2}",
        report.train.mse,
        report.train.spearman_r,
        report.train.accuracy,
        report.test.mse,
        report.test.spearman_r,
        report.test.accuracy
    );
    for id in &report.test_ids {
        let s = samples
            .iter()
            .find(|s| &s.case_id == id)
            .expect("held-out id");
        let days = model
            .predict(&ndarray::Array1::from(s.features.clone()), s.age)?
            .max(0.0);
        println!(
            "{id}: predicted {days:.0} days ({}), actual {:.0}",
            classify_survival(days, &cfg.thresholds)?,
            s.survival_days.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
