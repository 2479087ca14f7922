//! Accuracy on the bias regimes and report files.

use std::io::Write;

use crate::data::{BiasRegime, Dataset};
use crate::error::{Error, Result};
use crate::graph::{predict, Model};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

pub fn predictions(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let imgs: Vec<Tensor> = data.items[start..(start + CHUNK).min(data.len())]
            .iter()
            .map(|it| it.pixels.clone())
            .collect();
        out.extend(predict(model, &Tensor::stack(&imgs)?)?);
    }
    Ok(out)
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("accuracy of an empty dataset".into()));
    }
    let pred = predictions(model, data)?;
    let hits = pred.iter().zip(&data.items).filter(|(p, it)| **p == it.label).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeResult {
    pub regime: BiasRegime,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub regimes: Vec<RegimeResult>,
    pub epoch_seconds: Vec<f64>,
}

impl EvalReport {
    pub fn accuracy(&self, regime: BiasRegime) -> Option<f64> {
        self.regimes.iter().find(|r| r.regime == regime).map(|r| r.accuracy)
    }

    /// `acc_iid − acc_ood`, when both were evaluated.
    pub fn ood_drop(&self) -> Option<f64> {
        Some(self.accuracy(BiasRegime::IidTest)? - self.accuracy(BiasRegime::OodTest)?)
    }

    /// `acc_iid − acc_deceiving`, when both were evaluated.
    pub fn deceiving_drop(&self) -> Option<f64> {
        Some(self.accuracy(BiasRegime::IidTest)? - self.accuracy(BiasRegime::DeceivingTest)?)
    }

    /// `regime,accuracy` rows followed by the two drops.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "regime,accuracy")?;
        for r in &self.regimes {
            writeln!(out, "{},{}", r.regime.name(), r.accuracy)?;
        }
        if let Some(d) = self.ood_drop() {
            writeln!(out, "drop_iid_ood,{d}")?;
        }
        if let Some(d) = self.deceiving_drop() {
            writeln!(out, "drop_iid_deceiving,{d}")?;
        }
        Ok(())
    }

    /// `regime,true,predicted,count` rows.
    pub fn write_confusion_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "regime,true,predicted,count")?;
        for r in &self.regimes {
            for (t, row) in r.confusion.iter().enumerate() {
                for (p, &c) in row.iter().enumerate() {
                    writeln!(out, "{},{t},{p},{c}", r.regime.name())?;
                }
            }
        }
        Ok(())
    }
}

/// Evaluates `model` on each `(regime, dataset)` pair.
pub fn evaluate(model: &Model, tests: &[(BiasRegime, &Dataset)], epoch_seconds: &[f64]) -> Result<EvalReport> {
    let k = model.num_classes();
    let mut regimes = Vec::with_capacity(tests.len());
    for &(regime, data) in tests {
        if data.is_empty() {
            return Err(Error::Contract(format!("empty {} test set", regime.name())));
        }
        let pred = predictions(model, data)?;
        let mut confusion = vec![vec![0usize; k]; k];
        let mut hits = 0;
        for (p, it) in pred.iter().zip(&data.items) {
            if it.label >= k {
                return Err(Error::Contract(format!("label {} out of range for {k} classes", it.label)));
            }
            confusion[it.label][*p] += 1;
            hits += (*p == it.label) as usize;
        }
        regimes.push(RegimeResult {
            regime,
            accuracy: hits as f64 / data.len() as f64,
            confusion,
        });
    }
    Ok(EvalReport {
        regimes,
        epoch_seconds: epoch_seconds.to_vec(),
    })
}
