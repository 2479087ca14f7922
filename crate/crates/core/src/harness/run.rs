//! One end-to-end experiment: range calibration, training, evaluation.

use std::io::Write;

use crate::data::{BiasRegime, Splits};
use crate::error::Result;

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalReport};
use super::train::{calibrate, train, TrainHistory};
use super::variant::VariantKind;

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub history: TrainHistory,
    /// Evaluation of the best checkpoint on the three test regimes.
    pub report: EvalReport,
    /// The configuration actually used, ranges included.
    pub config: ExperimentConfig,
}

/// Fills in `(C1, C2)` for every supervised depth that has none, by
/// calibrating on the training split.
pub fn ensure_ranges(cfg: &mut ExperimentConfig, splits: &Splits) -> Result<()> {
    if cfg.variant.kind == VariantKind::Standard {
        return Ok(());
    }
    let depths = if cfg.variant.lds { cfg.loss.depths() } else { vec![0] };
    if depths.iter().all(|d| cfg.loss.ranges.contains_key(d)) {
        return Ok(());
    }
    let capture: Vec<usize> = depths.iter().copied().filter(|&d| d != 0).collect();
    let model = cfg.build_model(10)?;
    let cal = calibrate(&cfg.variant, model, &splits.train, &cfg.train, cfg.calibration_epochs, &capture)?;
    for d in depths {
        if let Some(r) = cal.ranges.get(&d) {
            cfg.loss.ranges.entry(d).or_insert(*r);
        }
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, splits: &Splits, log: Option<&mut dyn Write>) -> Result<ExperimentOutcome> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    ensure_ranges(&mut cfg, splits)?;
    let model = cfg.build_model(10)?;
    let history = train(&cfg.variant, model, &splits.train, &splits.biased_validation, &cfg.train, &cfg.loss, log)?;
    let seconds: Vec<f64> = history.epochs.iter().map(|e| e.seconds).collect();
    let tests: Vec<(BiasRegime, &crate::data::Dataset)> = [BiasRegime::IidTest, BiasRegime::OodTest, BiasRegime::DeceivingTest]
        .into_iter()
        .map(|r| (r, splits.test(r)))
        .collect();
    let report = evaluate(&history.best, &tests, &seconds)?;
    Ok(ExperimentOutcome {
        history,
        report,
        config: cfg,
    })
}
