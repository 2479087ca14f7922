//! Heatmap losses: the background attention loss `L1`, the foreground
//! relevance-range loss `L2`, their combination with the classification loss,
//! and aggregation over supervised depths.
//!
//! Every per-map quantity has an eager form (plain `f64` arithmetic) and a
//! recorded form on an autodiff graph; the two compute identical values.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::tensor::Tensor;

/// Floor added to the foreground mean before normalizing a map.
pub const FOREGROUND_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapLossConfig {
    pub p: f64,
    pub w1: f64,
    pub w2: f64,
    pub d: f64,
    pub e: f64,
    /// `(C1, C2)` per supervised layer id (0 = network input).
    pub ranges: BTreeMap<NodeId, (f64, f64)>,
    /// Supervised layers besides the input; empty disables deep supervision.
    pub lds_layers: Vec<NodeId>,
    pub lds_decay: f64,
}

impl Default for HeatmapLossConfig {
    fn default() -> Self {
        Self {
            p: 0.9,
            w1: 1.0,
            w2: 1.0,
            d: 0.9,
            e: 1.0,
            ranges: BTreeMap::new(),
            lds_layers: Vec::new(),
            lds_decay: 0.7,
        }
    }
}

impl HeatmapLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("P must lie in (0, 1), got {}", self.p)));
        }
        if !(self.w1 > 0.0 && self.w2 > 0.0) {
            return Err(Error::Config("w1 and w2 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.d) {
            return Err(Error::Config(format!("d must lie in [0, 1], got {}", self.d)));
        }
        if !(self.e > 0.0) {
            return Err(Error::Config(format!("E must be positive, got {}", self.e)));
        }
        if !(self.lds_decay > 0.0 && self.lds_decay <= 1.0) {
            return Err(Error::Config(format!("lds_decay must lie in (0, 1], got {}", self.lds_decay)));
        }
        for (layer, &(c1, c2)) in &self.ranges {
            if !(c1 > 0.0 && c1 < c2) {
                return Err(Error::Config(format!(
                    "range for layer {layer} must satisfy 0 < C1 < C2, got ({c1}, {c2})"
                )));
            }
        }
        Ok(())
    }

    /// Supervised depths in order: the network input first.
    pub fn depths(&self) -> Vec<NodeId> {
        let mut v = vec![0];
        v.extend(self.lds_layers.iter().copied().filter(|&l| l != 0));
        v
    }

    pub fn range(&self, layer: NodeId) -> Result<(f64, f64)> {
        self.ranges
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("no (C1, C2) range for layer {layer}")))
    }
}

/// Normalized rank weights: element `i` gets `d^rank(i) / Σ d^k`, ranks taken
/// over a stable descending sort.
pub fn gwrp_weights(values: &[f64], d: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut w = vec![0.0; values.len()];
    let mut norm = 0.0;
    let mut dk = 1.0;
    for &i in &order {
        w[i] = dk;
        norm += dk;
        dk *= d;
    }
    w.iter_mut().for_each(|x| *x /= norm);
    w
}

/// Global weighted ranked pooling: `d = 0` is max pooling, `d = 1` the mean.
pub fn gwrp(values: &[f64], d: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("gwrp of an empty slice".into()));
    }
    if d == 0.0 {
        return Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    if d == 1.0 {
        return Ok(values.iter().sum::<f64>() / values.len() as f64);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (mut num, mut den, mut dk) = (0.0, 0.0, 1.0);
    for v in sorted {
        num += dk * v;
        den += dk;
        dk *= d;
    }
    Ok(num / den)
}

/// Foreground relevance penalty: quadratic below `c1`, zero on `[c1, c2]`,
/// quadratic on `[c2, c2 + c1]`, then linear with unit slope.
pub fn foreground_penalty_f(s: f64, c1: f64, c2: f64) -> f64 {
    if s < c1 {
        (c1 - s).powi(2) / (c1 * c1)
    } else if s <= c2 {
        0.0
    } else if s <= c2 + c1 {
        (c2 - s).powi(2) / (c1 * c1)
    } else {
        1.0 + s - (c2 + c1)
    }
}

pub(crate) fn foreground_penalty_slope(s: f64, c1: f64, c2: f64) -> f64 {
    if s < c1 {
        -2.0 * (c1 - s) / (c1 * c1)
    } else if s <= c2 {
        0.0
    } else if s <= c2 + c1 {
        2.0 * (s - c2) / (c1 * c1)
    } else {
        1.0
    }
}

fn check_pair(map: &Tensor, mask: &Tensor) -> Result<()> {
    map.check_same_shape(mask)
        .map_err(|e| Error::Dimension(format!("heatmap/mask pairing: {e}")))
}

fn channels_of(map: &Tensor) -> usize {
    if map.ndim() >= 3 {
        map.shape()[0]
    } else {
        1
    }
}

/// Steps 1–6 of the background loss for one map (before the batch mean).
pub fn background_score(map: &Tensor, mask: &Tensor, d: f64, e: f64) -> Result<f64> {
    check_pair(map, mask)?;
    let abs: Vec<f64> = map.data().iter().map(|v| v.abs()).collect();
    let fg_count: f64 = mask.sum();
    let fg_sum: f64 = abs.iter().zip(mask.data()).map(|(a, m)| a * m).sum();
    let fg_mean = fg_sum / fg_count.max(1.0);
    let den = fg_mean + FOREGROUND_FLOOR;
    let seg: Vec<f64> = abs
        .iter()
        .zip(mask.data())
        .map(|(a, m)| a / den * (1.0 - m))
        .collect();
    let c = channels_of(map);
    let plane = seg.len() / c;
    let mut score = 0.0;
    for ch in seg.chunks_exact(plane) {
        let w = gwrp_weights(ch, d);
        score += ch.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    }
    score /= c as f64;
    let f = score / (score + e);
    Ok(-(1.0 - f).ln())
}

/// Mean of [`background_score`] over maps.
pub fn background_loss_l1(maps: &[(&Tensor, &Tensor)], d: f64, e: f64) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Contract("background loss of zero maps".into()));
    }
    let mut acc = 0.0;
    for (m, k) in maps {
        acc += background_score(m, k, d, e)?;
    }
    Ok(acc / maps.len() as f64)
}

/// Total absolute foreground relevance of one map.
pub fn foreground_total(map: &Tensor, mask: &Tensor) -> Result<f64> {
    check_pair(map, mask)?;
    Ok(map.data().iter().zip(mask.data()).map(|(a, m)| a.abs() * m).sum())
}

/// Mean foreground penalty over maps tagged with their layer id.
pub fn foreground_loss_l2(maps: &[(NodeId, &Tensor, &Tensor)], config: &HeatmapLossConfig) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Contract("foreground loss of zero maps".into()));
    }
    let mut acc = 0.0;
    for &(layer, m, k) in maps {
        let (c1, c2) = config.range(layer)?;
        acc += foreground_penalty_f(foreground_total(m, k)?, c1, c2);
    }
    Ok(acc / maps.len() as f64)
}

/// Background score of one recorded map; mirrors [`background_score`].
pub fn background_score_graph(g: &mut Graph, map: Var, mask: &Arc<Tensor>, d: f64, e: f64) -> Var {
    let inv = Arc::new(mask.map(|m| 1.0 - m));
    let fg_count = mask.sum().max(1.0);
    let a = g.abs(map);
    let fg = g.mul_const(a, mask.clone());
    let fg = g.sum(fg);
    let fg_mean = g.scale(fg, 1.0 / fg_count);
    let den = g.add_scalar(fg_mean, FOREGROUND_FLOOR);
    let norm = g.div_scalar_var(a, den);
    let seg = g.mul_const(norm, inv);
    let channels = channels_of(g.value(map));
    let per_channel = g.gwrp(seg, channels, d);
    let score = g.mean(per_channel);
    let f_den = g.add_scalar(score, e);
    let f = g.div_scalar_var(score, f_den);
    let neg_f = g.neg(f);
    let one_minus = g.add_scalar(neg_f, 1.0);
    let ln = g.ln(one_minus);
    g.neg(ln)
}

/// Foreground penalty of one recorded map; mirrors the per-map term of [`foreground_loss_l2`].
pub fn foreground_penalty_graph(g: &mut Graph, map: Var, mask: &Arc<Tensor>, c1: f64, c2: f64) -> Var {
    let a = g.abs(map);
    let fg = g.mul_const(a, mask.clone());
    let s = g.sum(fg);
    g.penalty(s, c1, c2)
}

/// Loss terms at one supervised depth, already averaged over maps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthLoss {
    pub l1: f64,
    pub l2: f64,
}

impl DepthLoss {
    pub fn l_lrp(&self, config: &HeatmapLossConfig) -> f64 {
        config.w1 * self.l1 + config.w2 * self.l2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub depths: Vec<(NodeId, DepthLoss)>,
    /// Normalized aggregation weight of each depth.
    pub depth_weights: Vec<f64>,
    pub l_lrp: f64,
    pub l_is: f64,
}

/// `L_IS = (1 − P)·L_C + P·L_LRP`, where `L_LRP` aggregates the per-depth
/// `w1·L1 + w2·L2` by GWRP with `lds_decay` (a single depth passes through).
pub fn isnet_loss(l_c: f64, depths: &[(NodeId, DepthLoss)], config: &HeatmapLossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    if depths.is_empty() {
        return Err(Error::Contract("isnet loss needs at least one heatmap loss".into()));
    }
    let per: Vec<f64> = depths.iter().map(|(_, d)| d.l_lrp(config)).collect();
    let weights = gwrp_weights(&per, config.lds_decay);
    let l_lrp = per.iter().zip(&weights).map(|(a, b)| a * b).sum();
    Ok(LossBreakdown {
        l_c,
        depths: depths.to_vec(),
        depth_weights: weights,
        l_lrp,
        l_is: (1.0 - config.p) * l_c + config.p * l_lrp,
    })
}

/// Append-only loss-curve log: one row per epoch and supervised depth, plus
/// an aggregate row with depth `all`.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "epoch,depth,L_C,L1,L2,L_LRP,L_IS")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, epoch: usize, b: &LossBreakdown, config: &HeatmapLossConfig) -> Result<()> {
        for (layer, d) in &b.depths {
            writeln!(
                self.out,
                "{epoch},{layer},{},{},{},{},{}",
                b.l_c,
                d.l1,
                d.l2,
                d.l_lrp(config),
                b.l_is
            )?;
        }
        let (l1, l2) = b
            .depths
            .iter()
            .zip(&b.depth_weights)
            .fold((0.0, 0.0), |(a, c), ((_, d), w)| (a + w * d.l1, c + w * d.l2));
        writeln!(self.out, "{epoch},all,{},{l1},{l2},{},{}", b.l_c, b.l_lrp, b.l_is)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::random_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gwrp_cases() {
        assert_eq!(gwrp(&[3.0, 1.0, 2.0], 0.0).unwrap(), 3.0);
        assert_eq!(gwrp(&[3.0, 1.0, 2.0], 1.0).unwrap(), 2.0);
        let v = gwrp(&[3.0, 1.0, 2.0], 0.5).unwrap();
        assert!((v - (3.0 + 0.5 * 2.0 + 0.25) / 1.75).abs() < 1e-12);
        assert!(gwrp(&[], 0.5).is_err());
    }

    #[test]
    fn gwrp_weights_agree_with_gwrp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        for d in [0.0, 0.3, 0.9, 1.0] {
            let w = gwrp_weights(&v, d);
            let s: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((s - gwrp(&v, d).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_cases() {
        assert_eq!(foreground_penalty_f(1.0, 1.0, 3.0), 0.0);
        assert_eq!(foreground_penalty_f(3.0, 1.0, 3.0), 0.0);
        assert_eq!(foreground_penalty_f(0.0, 1.0, 3.0), 1.0);
        assert_eq!(foreground_penalty_f(4.0, 1.0, 3.0), 1.0);
        assert_eq!(foreground_penalty_f(5.0, 1.0, 3.0), 2.0);
    }

    #[test]
    fn zero_background_gives_zero_l1() {
        let map = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let mask = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(background_loss_l1(&[(&map, &mask)], 0.9, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unit_background_score_gives_ln2() {
        // foreground mean 1, one background element of magnitude 1, d = 0 picks it.
        let map = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let mask = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let v = background_score(&map, &mask, 0.0, 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
    }

    /// Straight-line re-statement of the seven background-loss steps.
    fn l1_oracle(maps: &[(Tensor, Tensor)], d: f64, e: f64) -> f64 {
        let mut total = 0.0;
        for (map, mask) in maps {
            let c = map.shape()[0];
            let plane = map.len() / c;
            let mut fg = 0.0;
            let mut cnt = 0.0;
            for i in 0..map.len() {
                if mask.data()[i] == 1.0 {
                    fg += map.data()[i].abs();
                    cnt += 1.0;
                }
            }
            let mean = if cnt > 0.0 { fg / cnt } else { 0.0 };
            let mut per = 0.0;
            for ch in 0..c {
                let mut vals: Vec<f64> = (0..plane)
                    .map(|i| {
                        let k = ch * plane + i;
                        map.data()[k].abs() / (mean + 1e-10) * (1.0 - mask.data()[k])
                    })
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let (mut n, mut w) = (0.0, 0.0);
                for (r, v) in vals.iter().enumerate() {
                    n += d.powi(r as i32) * v;
                    w += d.powi(r as i32);
                }
                per += n / w;
            }
            let x = per / c as f64;
            total += -(1.0 - x / (x + e)).ln();
        }
        total / maps.len() as f64
    }

    #[test]
    fn l1_matches_step_oracle_and_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<(Tensor, Tensor)> = (0..3)
            .map(|_| {
                let m = random_tensor(&mut rng, &[2, 4, 5]);
                let k = Tensor::new(vec![2, 4, 5], (0..40).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect()).unwrap();
                (m, k)
            })
            .collect();
        let pairs: Vec<(&Tensor, &Tensor)> = maps.iter().map(|(a, b)| (a, b)).collect();
        let got = background_loss_l1(&pairs, 0.9, 1.0).unwrap();
        let want = l1_oracle(&maps, 0.9, 1.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        for (m, k) in &maps {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let s = background_score_graph(&mut g, v, &Arc::new(k.clone()), 0.9, 1.0);
            assert!((g.value(s).item() - background_score(m, k, 0.9, 1.0).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn l2_cases() {
        let mut cfg = HeatmapLossConfig::default();
        cfg.ranges.insert(0, (1.0, 3.0));
        let mask = Tensor::full(&[1, 1, 2], 1.0);
        let inside = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let zero = Tensor::zeros(&[1, 1, 2]);
        assert_eq!(foreground_loss_l2(&[(0, &inside, &mask)], &cfg).unwrap(), 0.0);
        assert_eq!(foreground_loss_l2(&[(0, &zero, &mask)], &cfg).unwrap(), 1.0);
        let big = Tensor::new(vec![1, 1, 2], vec![2.5, 2.5]).unwrap();
        let mixed = foreground_loss_l2(&[(0, &inside, &mask), (0, &zero, &mask), (0, &big, &mask)], &cfg).unwrap();
        assert!((mixed - (0.0 + 1.0 + 2.0) / 3.0).abs() < 1e-15);
        assert!(matches!(foreground_loss_l2(&[(5, &zero, &mask)], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn isnet_loss_cases() {
        let cfg = HeatmapLossConfig::default();
        let b = isnet_loss(1.0, &[(0, DepthLoss { l1: 0.2, l2: 0.1 })], &cfg).unwrap();
        assert!((b.l_is - 0.37).abs() < 1e-12);
        let same = [(0, DepthLoss { l1: 0.3, l2: 0.0 }), (3, DepthLoss { l1: 0.3, l2: 0.0 })];
        assert!((isnet_loss(0.0, &same, &cfg).unwrap().l_lrp - 0.3).abs() < 1e-15);
        let three = [
            (0, DepthLoss { l1: 0.5, l2: 0.0 }),
            (1, DepthLoss { l1: 0.1, l2: 0.0 }),
            (2, DepthLoss { l1: 0.3, l2: 0.0 }),
        ];
        let v = isnet_loss(0.0, &three, &cfg).unwrap().l_lrp;
        assert!((v - (0.5 + 0.7 * 0.3 + 0.49 * 0.1) / 2.19).abs() < 1e-12);
        let bad = HeatmapLossConfig { p: 1.0, ..cfg };
        assert!(matches!(isnet_loss(0.0, &three, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn loss_log_rows() {
        let cfg = HeatmapLossConfig::default();
        let b = isnet_loss(1.0, &[(0, DepthLoss { l1: 0.2, l2: 0.1 })], &cfg).unwrap();
        let mut log = LossLog::new(Vec::new()).unwrap();
        log.record(1, &b, &cfg).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,depth,L_C,L1,L2,L_LRP,L_IS");
        assert!(lines[1].starts_with("1,0,1,0.2,0.1,"));
        assert!(lines[2].starts_with("1,all,"));
    }

    proptest! {
        #[test]
        fn background_scaling_increases_l1(seed in any::<u64>(), t in 1.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_tensor(&mut rng, &[1, 3, 4]);
            let mask = Tensor::new(vec![1, 3, 4], (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
            let scaled = map.zip_map(&mask, |v, m| if m == 0.0 { v * t } else { v }).unwrap();
            let a = background_score(&map, &mask, 0.9, 1.0).unwrap();
            let b = background_score(&scaled, &mask, 0.9, 1.0).unwrap();
            prop_assert!(b > a);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn penalty_is_continuous(c1 in 0.1f64..10.0, gap in 0.1f64..10.0) {
            let c2 = c1 + gap;
            for s in [c1, c2, c2 + c1] {
                let below = foreground_penalty_f(s - 1e-9, c1, c2);
                let above = foreground_penalty_f(s + 1e-9, c1, c2);
                prop_assert!((below - above).abs() < 1e-6);
            }
        }
    }
}
