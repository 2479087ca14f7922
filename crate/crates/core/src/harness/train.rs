//! Training loops for every variant, and range calibration.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{downsample_mask, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::record::{forward_graph, GraphActs, ParamVars};
use crate::graph::{
    backward_classification, cross_entropy, forward, fuse_model, forward_sample, sgd_step, FusedModel, Model,
    NodeId, ParamGrads, SgdState, TrainConfig,
};
use crate::loss::{background_score_graph, foreground_penalty_graph, isnet_loss, DepthLoss, HeatmapLossConfig, LossBreakdown, LossLog};
use crate::lrp::engine::{capture_source, propagate_on_graph};
use crate::lrp::flex::flex_on_graph;
use crate::par;
use crate::range::RangeCalibrator;
use crate::tensor::Tensor;

use super::eval::accuracy;
use super::variant::{build_training_heatmaps, training_targets, Engine, VariantKind, VariantSpec};

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    pub seconds: f64,
    pub maps_per_image: usize,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    /// Checkpoint with the best biased-validation accuracy (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub last: Model,
    pub epochs: Vec<EpochRecord>,
}

/// Supervised depths: the input (0), plus the deep-supervision layers when enabled.
fn depths_for(spec: &VariantSpec, loss: &HeatmapLossConfig) -> Vec<NodeId> {
    if spec.lds {
        loss.depths()
    } else {
        vec![0]
    }
}

/// Masks matching the heatmap shape at each depth.
fn masks_for(model: &Model, item: &LabeledImage, depths: &[NodeId]) -> Result<Vec<Arc<Tensor>>> {
    depths
        .iter()
        .map(|&d| {
            if d == 0 {
                return Ok(Arc::new(item.mask.clone()));
            }
            let src = capture_source(model, d)?;
            match model.node(src).shape.as_slice() {
                [c, h, w] => Ok(Arc::new(downsample_mask(&item.mask, *c, *h, *w)?)),
                other => Err(Error::Config(format!(
                    "deep supervision at layer {d} needs a C×H×W input, found {other:?}"
                ))),
            }
        })
        .collect()
}

/// One sample's recorded objective pieces.
struct SampleGraph {
    g: Graph,
    ce: Var,
    /// Per depth: (mean background score, mean foreground penalty) over maps.
    depth_terms: Vec<(Var, Var)>,
    maps: usize,
}

fn mean_of(g: &mut Graph, vs: &[Var]) -> Var {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v);
    }
    g.scale(acc, 1.0 / vs.len() as f64)
}

fn sample_graph(
    spec: &VariantSpec,
    original: &Model,
    fused: &FusedModel,
    loss: &HeatmapLossConfig,
    depths: &[NodeId],
    item: &LabeledImage,
    u: f64,
) -> Result<SampleGraph> {
    let model = &fused.model;
    let mut g = Graph::new();
    let params = ParamVars::trainable(&mut g, original, fused, None)?;
    let x = g.constant(item.pixels.clone());
    let acts: GraphActs = forward_graph(&mut g, model, &params, x)?;
    let logits = acts.out[model.output_id()];
    let ce = g.cross_entropy(logits, item.label);
    let z = g.value(logits).data().to_vec();
    let targets = training_targets(spec.kind, &z, u);
    let capture: Vec<NodeId> = depths.iter().copied().filter(|&d| d != 0).collect();
    let masks = masks_for(model, item, depths)?;
    let mut per_depth: Vec<(Vec<Var>, Vec<Var>)> = vec![(Vec::new(), Vec::new()); depths.len()];
    for t in &targets {
        let prop = match spec.engine {
            Engine::Explicit => propagate_on_graph(&mut g, model, &params, &acts, *t, &spec.policy(*t), &capture)?,
            Engine::Flex => flex_on_graph(
                &mut g,
                model,
                &params,
                &acts,
                *t,
                spec.flex_epsilon(),
                spec.first_layer_rule(),
                &capture,
            )?,
        };
        let mut maps = vec![prop.input];
        maps.extend(prop.captured.iter().map(|&(_, v)| v));
        for (k, (&map, &depth)) in maps.iter().zip(depths).enumerate() {
            let (c1, c2) = loss.range(depth)?;
            let l1 = background_score_graph(&mut g, map, &masks[k], loss.d, loss.e);
            let l2 = foreground_penalty_graph(&mut g, map, &masks[k], c1, c2);
            per_depth[k].0.push(l1);
            per_depth[k].1.push(l2);
        }
    }
    let expected = spec.kind.maps_per_image(model.num_classes());
    if targets.len() != expected {
        return Err(Error::State(format!("{} maps for an image, expected {expected}", targets.len())));
    }
    let depth_terms = per_depth
        .iter()
        .map(|(a, b)| (mean_of(&mut g, a), mean_of(&mut g, b)))
        .collect();
    Ok(SampleGraph {
        g,
        ce,
        depth_terms,
        maps: targets.len(),
    })
}

fn grads_from(model: &Model, grads: &crate::autodiff::Gradients) -> ParamGrads {
    let mut out = ParamGrads::zeros_like(model);
    for (slot, t) in grads.params() {
        if let Some(t) = t {
            out.tensors[slot]
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    out
}

/// Gradient of the batch objective and its value breakdown. `uniforms` holds
/// one pre-drawn uniform per item (stochastic logit choice).
pub fn batch_gradient(
    spec: &VariantSpec,
    model: &Model,
    items: &[&LabeledImage],
    uniforms: &[f64],
    loss: &HeatmapLossConfig,
) -> Result<(ParamGrads, LossBreakdown)> {
    let n = items.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if spec.kind == VariantKind::Standard {
        let imgs: Vec<Tensor> = items.iter().map(|it| it.pixels.clone()).collect();
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let (z, tape) = forward(model, &Tensor::stack(&imgs)?)?;
        let k = model.num_classes();
        let l_c = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| cross_entropy(&Tensor::vector(z.data()[i * k..(i + 1) * k].to_vec()), l))
            .sum::<f64>()
            / n as f64;
        let grads = backward_classification(model, &tape, &labels)?;
        let b = LossBreakdown {
            l_c,
            depths: Vec::new(),
            depth_weights: Vec::new(),
            l_lrp: 0.0,
            l_is: l_c,
        };
        return Ok((grads, b));
    }
    let fused = fuse_model(model)?;
    let depths = depths_for(spec, loss);
    let graphs = par::try_map_indices(n, |i| sample_graph(spec, model, &fused, loss, &depths, items[i], uniforms[i]))?;
    let l_c = graphs.iter().map(|s| s.g.value(s.ce).item()).sum::<f64>() / n as f64;
    let depth_losses: Vec<(NodeId, DepthLoss)> = depths
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let (l1, l2) = graphs.iter().fold((0.0, 0.0), |(a, b), s| {
                let (v1, v2) = s.depth_terms[k];
                (a + s.g.value(v1).item(), b + s.g.value(v2).item())
            });
            (d, DepthLoss { l1: l1 / n as f64, l2: l2 / n as f64 })
        })
        .collect();
    let breakdown = isnet_loss(l_c, &depth_losses, loss)?;
    if !breakdown.l_is.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {:?}", breakdown)));
    }
    let nf = n as f64;
    let parts = par::try_map_indices(n, |i| {
        let s = &graphs[i];
        let mut seeds = vec![(s.ce, Tensor::scalar((1.0 - loss.p) / nf))];
        for (k, &(v1, v2)) in s.depth_terms.iter().enumerate() {
            let w = loss.p * breakdown.depth_weights[k] / nf;
            seeds.push((v1, Tensor::scalar(w * loss.w1)));
            seeds.push((v2, Tensor::scalar(w * loss.w2)));
        }
        let grads = s.g.backward(&seeds);
        Ok::<_, Error>(grads_from(model, &grads))
    })?;
    debug_assert!(graphs.iter().all(|s| s.maps == spec.kind.maps_per_image(model.num_classes())));
    Ok((ParamGrads::sum(model, parts), breakdown))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut out = parts[0].clone();
    out.l_c = parts.iter().map(|b| b.l_c).sum::<f64>() / n;
    out.l_lrp = parts.iter().map(|b| b.l_lrp).sum::<f64>() / n;
    out.l_is = parts.iter().map(|b| b.l_is).sum::<f64>() / n;
    for k in 0..out.depths.len() {
        out.depths[k].1.l1 = parts.iter().map(|b| b.depths[k].1.l1).sum::<f64>() / n;
        out.depths[k].1.l2 = parts.iter().map(|b| b.depths[k].1.l2).sum::<f64>() / n;
        out.depth_weights[k] = parts.iter().map(|b| b.depth_weights[k]).sum::<f64>() / n;
    }
    out
}

/// Shuffles once per epoch and draws one uniform per image, both from
/// run-seeded generators.
struct EpochStreams {
    order: ChaCha8Rng,
    logits: ChaCha8Rng,
}

impl EpochStreams {
    fn new(seed: u64) -> Self {
        Self {
            order: ChaCha8Rng::seed_from_u64(seed),
            logits: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }
}

fn run_epoch(
    spec: &VariantSpec,
    model: &mut Model,
    sgd: &mut SgdState,
    data: &Dataset,
    tc: &TrainConfig,
    loss: &HeatmapLossConfig,
    streams: &mut EpochStreams,
    epoch: usize,
) -> Result<LossBreakdown> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut streams.order);
    let mut parts = Vec::new();
    for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
        let items: Vec<&LabeledImage> = chunk.iter().map(|&i| &data.items[i]).collect();
        let uniforms: Vec<f64> = (0..items.len()).map(|_| streams.logits.random::<f64>()).collect();
        let (grads, breakdown) = batch_gradient(spec, model, &items, &uniforms, loss).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
            other => other,
        })?;
        if !breakdown.l_is.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}, batch {b}: non-finite loss or gradient (L_IS = {})",
                breakdown.l_is
            )));
        }
        sgd_step(model, &grads, sgd, tc)?;
        parts.push(breakdown);
    }
    if parts.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    Ok(mean_breakdown(&parts))
}

/// Trains `model` and keeps the checkpoint with the best accuracy on
/// `validation` (the biased hold-out set). Loss curves go to `log` if given.
pub fn train(
    spec: &VariantSpec,
    mut model: Model,
    train_set: &Dataset,
    validation: &Dataset,
    tc: &TrainConfig,
    loss: &HeatmapLossConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainHistory> {
    spec.validate()?;
    tc.validate()?;
    if spec.kind != VariantKind::Standard {
        loss.validate()?;
        for d in depths_for(spec, loss) {
            loss.range(d)?;
        }
    }
    let mut loss_log = match log {
        Some(w) => Some(LossLog::new(w)?),
        None => None,
    };
    let mut sgd = SgdState::new(&model);
    let mut streams = EpochStreams::new(tc.seed);
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let t0 = Instant::now();
        let breakdown = run_epoch(spec, &mut model, &mut sgd, train_set, tc, loss, &mut streams, epoch)?;
        let seconds = t0.elapsed().as_secs_f64();
        let val = if validation.is_empty() { 0.0 } else { accuracy(&model, validation)? };
        if val > best_val {
            best_val = val;
            best = model.clone();
            best_epoch = epoch;
        }
        if let Some(l) = loss_log.as_mut() {
            l.record(epoch, &breakdown, loss)?;
        }
        epochs.push(EpochRecord {
            epoch,
            loss: breakdown,
            val_accuracy: val,
            seconds,
            maps_per_image: spec.kind.maps_per_image(model.num_classes()),
        });
    }
    Ok(TrainHistory {
        best,
        best_epoch,
        best_val_accuracy: best_val,
        last: model,
        epochs,
    })
}

/// Seconds for one training epoch.
pub fn time_epoch(spec: &VariantSpec, model: &mut Model, data: &Dataset, tc: &TrainConfig, loss: &HeatmapLossConfig) -> Result<f64> {
    let mut sgd = SgdState::new(model);
    let mut streams = EpochStreams::new(tc.seed);
    let t0 = Instant::now();
    run_epoch(spec, model, &mut sgd, data, tc, loss, &mut streams, 1)?;
    Ok(t0.elapsed().as_secs_f64())
}

/// Calibration outcome: per-layer ranges and the raw accumulators.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub ranges: BTreeMap<NodeId, (f64, f64)>,
    pub stats: RangeCalibrator,
    /// Every recorded `(layer, Σ|R|)` in order.
    pub stream: Vec<(NodeId, f64)>,
}

/// Pre-trains a standard classifier for `epochs_pre` epochs, then trains one
/// more epoch while recording the total absolute relevance of the heatmaps
/// `spec` would supervise, at the input and each of `capture` layers.
pub fn calibrate(
    spec: &VariantSpec,
    mut model: Model,
    data: &Dataset,
    tc: &TrainConfig,
    epochs_pre: usize,
    capture: &[NodeId],
) -> Result<Calibration> {
    spec.validate()?;
    tc.validate()?;
    if spec.kind == VariantKind::Standard {
        return Err(Error::Config("the standard variant has no heatmap ranges".into()));
    }
    let standard = VariantSpec::new(VariantKind::Standard);
    let unused = HeatmapLossConfig::default();
    let mut sgd = SgdState::new(&model);
    let mut streams = EpochStreams::new(tc.seed);
    for epoch in 1..=epochs_pre {
        run_epoch(&standard, &mut model, &mut sgd, data, tc, &unused, &mut streams, epoch)?;
    }
    let mut layers = vec![0];
    layers.extend(capture.iter().copied().filter(|&l| l != 0));
    let mut stats = RangeCalibrator::new(&layers);
    let mut stream = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut streams.order);
    for chunk in order.chunks(tc.batch_size) {
        let fused = fuse_model(&model)?;
        let seeds: Vec<u64> = chunk.iter().map(|_| streams.logits.random::<u64>()).collect();
        let totals = par::try_map_indices(chunk.len(), |k| {
            let item = &data.items[chunk[k]];
            let tape = forward_sample(&fused.model, &item.pixels)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[k]);
            let maps = build_training_heatmaps(spec, &fused.model, &tape, &mut rng, capture)?;
            let mut out = Vec::new();
            for per_target in maps {
                for m in per_target {
                    out.push((m.layer_id, m.relevance.abs_sum()));
                }
            }
            Ok::<_, Error>(out)
        })?;
        for (layer, total) in totals.into_iter().flatten() {
            stats.record(layer, total)?;
            stream.push((layer, total));
        }
        let items: Vec<&LabeledImage> = chunk.iter().map(|&i| &data.items[i]).collect();
        let (grads, _) = batch_gradient(&standard, &model, &items, &vec![0.0; items.len()], &unused)?;
        sgd_step(&mut model, &grads, &mut sgd, tc)?;
    }
    Ok(Calibration {
        ranges: stats.ranges()?,
        stats,
        stream,
    })
}
