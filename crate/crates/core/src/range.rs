//! Calibration of the foreground-loss range `(C1, C2)` from the relevance
//! totals of a briefly trained standard classifier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::NodeId;

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators as if their streams were concatenated.
    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb, nf) = (self.count as f64, other.count as f64, n as f64);
        Welford {
            count: n,
            mean: self.mean + delta * nb / nf,
            m2: self.m2 + other.m2 + delta * delta * na * nb / nf,
        }
    }

    /// Sample variance; 0 with fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// `C1 = max(M/5, M − 3S)`, `C2 = min(25·C1, M + 3S)`, widened to
/// `C2 = 1.05·C1` when the interval collapses.
pub fn derive_range(mean: f64, std: f64) -> Result<(f64, f64)> {
    if !mean.is_finite() || !std.is_finite() {
        return Err(Error::Numeric(format!(
            "relevance statistics are not finite (mean {mean}, std {std}); the heatmaps are unstable"
        )));
    }
    if mean <= 0.0 {
        return Err(Error::Numeric(format!(
            "mean relevance total {mean} is not positive; the heatmaps are unstable"
        )));
    }
    if std < 0.0 {
        return Err(Error::Contract(format!("negative standard deviation {std}")));
    }
    let c1 = (mean / 5.0).max(mean - 3.0 * std);
    let mut c2 = (25.0 * c1).min(mean + 3.0 * std);
    if c2 <= c1 {
        c2 = 1.05 * c1;
    }
    Ok((c1, c2))
}

/// One accumulator per supervised layer.
#[derive(Clone, Debug, Default)]
pub struct RangeCalibrator {
    pub layers: BTreeMap<NodeId, Welford>,
}

impl RangeCalibrator {
    pub fn new(layers: &[NodeId]) -> Self {
        Self {
            layers: layers.iter().map(|&l| (l, Welford::new())).collect(),
        }
    }

    /// Adds the total absolute relevance of one heatmap at `layer`.
    pub fn record(&mut self, layer: NodeId, total: f64) -> Result<()> {
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite relevance total at layer {layer}; the heatmaps are unstable"
            )));
        }
        self.layers
            .get_mut(&layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} is not being calibrated")))?
            .update(total);
        Ok(())
    }

    pub fn merge(&mut self, other: &RangeCalibrator) {
        for (l, acc) in &other.layers {
            let e = self.layers.entry(*l).or_default();
            *e = e.merge(acc);
        }
    }

    pub fn ranges(&self) -> Result<BTreeMap<NodeId, (f64, f64)>> {
        self.layers
            .iter()
            .map(|(&l, acc)| {
                if acc.count == 0 {
                    return Err(Error::State(format!("no relevance recorded for layer {l}")));
                }
                Ok((l, derive_range(acc.mean, acc.std())?))
            })
            .collect()
    }
}

/// `range.<layer>=<C1>,<C2>` lines, readable by the config parser.
pub fn format_ranges(ranges: &BTreeMap<NodeId, (f64, f64)>) -> String {
    let mut s = String::new();
    for (l, (c1, c2)) in ranges {
        let _ = writeln!(s, "range.{l}={c1:?},{c2:?}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_stream() {
        let mut w = Welford::new();
        for x in [1.0, 2.0, 3.0] {
            w.update(x);
        }
        assert_eq!(w.mean, 2.0);
        assert_eq!(w.std(), 1.0);
        let mut one = Welford::new();
        one.update(4.0);
        assert_eq!((one.count, one.std()), (1, 0.0));
    }

    #[test]
    fn range_formulas() {
        assert_eq!(derive_range(10.0, 1.0).unwrap(), (7.0, 13.0));
        assert_eq!(derive_range(10.0, 5.0).unwrap(), (2.0, 25.0));
        let (c1, c2) = derive_range(5.0, 0.0).unwrap();
        assert_eq!(c1, 5.0);
        assert!((c2 - 5.25).abs() < 1e-12);
        assert!(derive_range(0.0, 1.0).is_err());
        assert!(derive_range(-1.0, 1.0).is_err());
    }

    #[test]
    fn calibrator_reports_each_layer() {
        let mut c = RangeCalibrator::new(&[0, 3]);
        for v in [9.0, 10.0, 11.0] {
            c.record(0, v).unwrap();
            c.record(3, 2.0 * v).unwrap();
        }
        assert!(c.record(5, 1.0).is_err());
        assert!(c.record(0, f64::NAN).is_err());
        let r = c.ranges().unwrap();
        assert_eq!(r.len(), 2);
        assert!(format_ranges(&r).starts_with("range.0="));
    }

    proptest! {
        #[test]
        fn merge_equals_concatenation(a in prop::collection::vec(-1e3f64..1e3, 0..40),
                                      b in prop::collection::vec(-1e3f64..1e3, 0..40)) {
            let mut wa = Welford::new();
            a.iter().for_each(|&x| wa.update(x));
            let mut wb = Welford::new();
            b.iter().for_each(|&x| wb.update(x));
            let mut all = Welford::new();
            a.iter().chain(&b).for_each(|&x| all.update(x));
            let m = wa.merge(&wb);
            prop_assert_eq!(m.count, all.count);
            prop_assert!((m.mean - all.mean).abs() <= 1e-9 * (1.0 + all.mean.abs()));
            prop_assert!((m.m2 - all.m2).abs() <= 1e-7 * (1.0 + all.m2.abs()));
        }

        #[test]
        fn ranges_are_ordered(m in 1e-6f64..1e6, s in 0.0f64..1e6) {
            let (c1, c2) = derive_range(m, s).unwrap();
            prop_assert!(c1 > 0.0 && c2 > c1);
        }
    }
}
