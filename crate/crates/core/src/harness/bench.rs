//! Epoch time as a function of the number of output classes.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Model, TrainConfig};
use crate::loss::HeatmapLossConfig;
use crate::par;

use super::train::time_epoch;
use super::variant::{VariantKind, VariantSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: VariantKind,
    pub classes: usize,
    pub seconds_per_epoch: f64,
    /// Heatmaps generated per training batch.
    pub maps_per_batch: usize,
}

/// Relabels every item to `label % classes`.
fn with_classes(data: &Dataset, classes: usize) -> Dataset {
    let mut d = data.clone();
    for it in &mut d.items {
        it.label %= classes;
    }
    d
}

/// Times one epoch per `(variant, class count)` on the same images, on a
/// single worker; `factory(classes)` builds the network with that many outputs.
/// Each timing is the fastest of `repeats` runs.
pub fn bench_class_scaling(
    variants: &[VariantSpec],
    class_counts: &[usize],
    data: &Dataset,
    tc: &TrainConfig,
    loss: &HeatmapLossConfig,
    repeats: usize,
    factory: &(dyn Fn(usize) -> Result<Model> + Sync),
) -> Result<Vec<BenchRow>> {
    if class_counts.iter().any(|&c| c < 2) {
        return Err(Error::Config("class counts must be at least 2".into()));
    }
    let mut loss = loss.clone();
    loss.ranges.entry(0).or_insert((1.0, 10.0));
    let mut rows = Vec::new();
    for spec in variants {
        for &classes in class_counts {
            let d = with_classes(data, classes);
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let mut model = factory(classes)?;
                let secs = par::with_single_worker(|| time_epoch(spec, &mut model, &d, tc, &loss))?;
                best = best.min(secs);
            }
            rows.push(BenchRow {
                variant: spec.kind,
                classes,
                seconds_per_epoch: best,
                maps_per_batch: spec.kind.maps_per_image(classes) * tc.batch_size.min(d.len()),
            });
        }
    }
    Ok(rows)
}

/// Epoch-time ratio between the largest and smallest class count of `variant`.
pub fn scaling_ratio(rows: &[BenchRow], variant: VariantKind) -> Option<f64> {
    let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let lo = mine.iter().min_by_key(|r| r.classes)?;
    let hi = mine.iter().max_by_key(|r| r.classes)?;
    Some(hi.seconds_per_epoch / lo.seconds_per_epoch)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    writeln!(out, "variant,classes,seconds_per_epoch,maps_per_batch")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.variant.name(), r.classes, r.seconds_per_epoch, r.maps_per_batch)?;
    }
    Ok(())
}
