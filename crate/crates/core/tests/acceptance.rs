//! Acceptance criteria 1–13; prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{max_rel_err, random_input, random_net, Net, Op};
use isnet::data::{inject_bias, synthetic_dataset, BiasRegime, LabeledImage, SynthConfig};
use isnet::graph::{cross_entropy, forward_sample, Model, ModelBuilder};
use isnet::harness::{
    batch_gradient, bench_class_scaling, run_experiment, scaling_ratio, training_targets, ExperimentConfig, VariantKind,
    VariantSpec,
};
use isnet::loss::{
    background_loss_l1, foreground_loss_l2, foreground_penalty_f, gwrp, isnet_loss, DepthLoss, HeatmapLossConfig,
};
use isnet::lrp::{flex_explain, propagate, propagate_detached, ExplanationTarget, RulePolicy};
use isnet::range::{derive_range, Welford};
use isnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn nets(seed: u64, n: usize, bias: bool) -> Vec<Net> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_net(&mut rng, i, bias)).collect()
}

fn input_map(model: &Model, x: &Tensor, target: ExplanationTarget, policy: &RulePolicy) -> Tensor {
    let tape = forward_sample(model, x).unwrap();
    propagate(model, &tape, target, policy, &[]).unwrap().remove(0).relevance
}

fn flex_map(model: &Model, x: &Tensor, target: ExplanationTarget, eps: f64) -> Tensor {
    let tape = forward_sample(model, x).unwrap();
    flex_explain(model, &tape, target, eps, None, &[]).unwrap().remove(0).relevance
}

fn c1_cross_engine() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for net in nets(1, 50, true) {
        let x = random_input(&mut rng, &net, false);
        for c in 0..net.classes() {
            let t = ExplanationTarget::Logit(c);
            let e = input_map(&net.model, &x, t, &RulePolicy::epsilon(0.01));
            let f = flex_map(&net.model, &x, t, 0.01);
            worst = worst.max(max_rel_err(f.data(), e.data()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-6 && secs <= 60.0, format!("max rel err {worst:.2e}, {secs:.2}s"))
}

fn c2_lrp0_grad_input() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for net in nets(1, 50, true) {
        let x = random_input(&mut rng, &net, false);
        for c in 0..net.classes() {
            let g = net.input_gradient(x.data(), c);
            let oracle: Vec<f64> = g.iter().zip(x.data()).map(|(g, x)| g * x).collect();
            let t = ExplanationTarget::Logit(c);
            let e = input_map(&net.model, &x, t, &RulePolicy::epsilon(0.0));
            let f = flex_map(&net.model, &x, t, 0.0);
            worst = worst.max(max_rel_err(e.data(), &oracle)).max(max_rel_err(f.data(), &oracle));
        }
    }
    check(worst <= 1e-10, format!("max rel err {worst:.2e} (both engines)"))
}

fn c3_joint_additivity() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let policy = RulePolicy::epsilon(0.01);
    for net in nets(3, 50, true) {
        let x = random_input(&mut rng, &net, false);
        let joint = input_map(&net.model, &x, ExplanationTarget::JointEpsilon, &policy);
        let mut sum = vec![0.0; joint.len()];
        for c in 0..net.classes() {
            let m = input_map(&net.model, &x, ExplanationTarget::Logit(c), &policy);
            for (s, v) in sum.iter_mut().zip(m.data()) {
                *s += v;
            }
        }
        worst = worst.max(max_rel_err(joint.data(), &sum));
    }
    check(worst <= 1e-10, format!("max rel err {worst:.2e}"))
}

fn c4_zplus_nonnegative() -> Outcome {
    let mut lowest = f64::INFINITY;
    let mut maps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for net in nets(4, 50, true) {
        let x = random_input(&mut rng, &net, true);
        let tape = forward_sample(&net.model, &x).unwrap();
        let capture: Vec<usize> = (1..net.model.len()).collect();
        let all = propagate(&net.model, &tape, ExplanationTarget::JointZPlus, &RulePolicy::zplus(0.01), &capture).unwrap();
        for m in all {
            lowest = lowest.min(m.relevance.min());
            maps += 1;
        }
    }
    check(lowest >= -1e-12, format!("min relevance {lowest:.2e} over {maps} tensors"))
}

/// η_c = z_c − ln Σ_{k≠c} exp(z_k).
fn eta(z: &[f64], c: usize) -> f64 {
    let m = z.iter().enumerate().filter(|(k, _)| *k != c).fold(f64::NEG_INFINITY, |m, (_, v)| m.max(*v));
    let s: f64 = z.iter().enumerate().filter(|(k, _)| *k != c).map(|(_, v)| (v - m).exp()).sum();
    z[c] - m - s.ln()
}

fn c5_selective_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let k = if trial % 2 == 0 { 3 } else { 10 };
        let n = rng.random_range(3..=12);
        let w: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut mb = ModelBuilder::new(&[n]);
        let d = mb
            .dense(0, Tensor::new(vec![k, n], w.clone()).unwrap(), Tensor::vector(b.clone()))
            .unwrap();
        mb.output(d).unwrap();
        let model = mb.build().unwrap();
        let c = rng.random_range(0..k);
        let mut policy = RulePolicy::epsilon(0.01);
        policy.selective_epsilon = 0.0;
        policy.selective_mu = 1e-8;
        let r = input_map(&model, &Tensor::vector(a.clone()), ExplanationTarget::SelectiveEta(c), &policy);
        let logits = |a: &[f64]| -> Vec<f64> {
            (0..k).map(|j| b[j] + (0..n).map(|i| w[j * n + i] * a[i]).sum::<f64>()).collect()
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let mut up = a.clone();
                up[i] += h;
                let mut dn = a.clone();
                dn[i] -= h;
                (eta(&logits(&up), c) - eta(&logits(&dn), c)) / (2.0 * h)
            })
            .collect();
        let g: Vec<f64> = r.data().iter().zip(&a).map(|(r, a)| r / a).collect();
        worst = worst.max(max_rel_err(&g, &fd));
    }
    check(worst <= 1e-4, format!("max rel err {worst:.2e} over 20 layers"))
}

fn c6_conservation() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for net in nets(6, 50, false) {
        let x = random_input(&mut rng, &net, false);
        let z = net.forward(x.data()).pop().unwrap();
        for c in 0..net.classes() {
            let r = input_map(&net.model, &x, ExplanationTarget::Logit(c), &RulePolicy::epsilon(0.0));
            let err = (r.sum() - z[c]).abs() / z[c].abs().max(1e-300);
            if z[c].abs() > 1e-9 {
                worst = worst.max(err);
            }
        }
    }
    check(worst <= 1e-6, format!("max rel err {worst:.2e}"))
}

fn c7_gwrp_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let (mut num, mut den) = (0.0, 0.0);
        for (i, x) in sorted.iter().enumerate() {
            let wi = 0.5f64.powi(i as i32);
            num += wi * x;
            den += wi;
        }
        let half = num / den;
        worst = worst
            .max((gwrp(&v, 0.0).unwrap() - max).abs())
            .max((gwrp(&v, 1.0).unwrap() - mean).abs())
            .max((gwrp(&v, 0.5).unwrap() - half).abs());
    }
    check(worst <= 1e-12, format!("max abs err {worst:.2e}"))
}

fn c8_penalty_continuity() -> Outcome {
    let mut worst = 0.0f64;
    for (c1, c2) in [(1.0f64, 3.0f64), (7.0, 13.0)] {
        let below = |s: f64| (c1 - s).powi(2) / (c1 * c1);
        let inside = |_: f64| 0.0;
        let above = |s: f64| (c2 - s).powi(2) / (c1 * c1);
        let linear = |s: f64| 1.0 + s - (c2 + c1);
        let pairs: [(f64, f64, f64); 3] = [
            (c1, below(c1), inside(c1)),
            (c2, inside(c2), above(c2)),
            (c2 + c1, above(c2 + c1), linear(c2 + c1)),
        ];
        for (s, left, right) in pairs {
            let f = foreground_penalty_f(s, c1, c2);
            worst = worst.max((left - right).abs()).max((f - left).abs());
        }
    }
    check(worst <= 1e-12, format!("max branch gap {worst:.2e}"))
}

fn c9_welford() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let v: Vec<f64> = (0..10_000).map(|_| rng.random_range(-3.0..50.0)).collect();
    let mut w = Welford::new();
    for &x in &v {
        w.update(x);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    let em = (w.mean - mean).abs() / mean.abs();
    let es = (w.std() - var.sqrt()).abs() / var.sqrt();
    let r1 = derive_range(10.0, 1.0).unwrap();
    let r2 = derive_range(10.0, 5.0).unwrap();
    check(
        em <= 1e-10 && es <= 1e-10 && r1 == (7.0, 13.0) && r2 == (2.0, 25.0),
        format!("mean err {em:.1e}, std err {es:.1e}, ranges {r1:?} {r2:?}"),
    )
}

/// `L_IS` assembled from public pieces, with the bias terms inside the
/// relevance rules frozen at `reference`.
fn detached_l_is(
    spec: &VariantSpec,
    model: &Model,
    reference: &Model,
    items: &[&LabeledImage],
    uniforms: &[f64],
    loss: &HeatmapLossConfig,
) -> f64 {
    let mut l_c = 0.0;
    let mut maps = Vec::new();
    for (it, &u) in items.iter().zip(uniforms) {
        let tape = forward_sample(model, &it.pixels).unwrap();
        let logits = tape.output(model.output_id()).clone();
        l_c += cross_entropy(&logits, it.label);
        for t in training_targets(spec.kind, logits.data(), u) {
            let m = propagate_detached(model, &tape, t, &spec.policy(t), &[], Some(reference)).unwrap();
            maps.push((m[0].relevance.clone(), it.mask.clone()));
        }
    }
    l_c /= items.len() as f64;
    let pairs: Vec<(&Tensor, &Tensor)> = maps.iter().map(|(a, b)| (a, b)).collect();
    let tagged: Vec<(usize, &Tensor, &Tensor)> = maps.iter().map(|(a, b)| (0, a, b)).collect();
    let depth = DepthLoss {
        l1: background_loss_l1(&pairs, loss.d, loss.e).unwrap(),
        l2: foreground_loss_l2(&tagged, loss).unwrap(),
    };
    isnet_loss(l_c, &[(0, depth)], loss).unwrap().l_is
}

fn c10_heatmap_loss_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let net = Net::new(
        vec![1, 8, 8],
        vec![
            Op::Conv {
                w: (0..18).map(|_| rng.random_range(-0.6..0.6)).collect(),
                b: vec![0.05, -0.02],
                f: 2,
                k: 3,
                stride: 1,
                pad: 1,
            },
            Op::Relu,
            Op::Flatten,
            Op::Dense { w: (0..6 * 128).map(|_| rng.random_range(-0.15..0.15)).collect(), b: vec![0.01; 6], out: 6 },
            Op::Relu,
            Op::Dense { w: (0..18).map(|_| rng.random_range(-0.5..0.5)).collect(), b: vec![0.0; 3], out: 3 },
        ],
    );
    let items: Vec<LabeledImage> = (0..4)
        .map(|i| {
            let mut px = vec![0.0; 64];
            for y in 2..6 {
                for x in 2..6 {
                    px[y * 8 + x] = rng.random_range(0.1..1.0);
                }
            }
            px[i] = 1.0;
            LabeledImage::clean(Tensor::new(vec![1, 8, 8], px).unwrap(), i % 3).unwrap()
        })
        .collect();
    let refs: Vec<&LabeledImage> = items.iter().collect();
    let uniforms = [0.1, 0.7, 0.3, 0.95];
    let spec = VariantSpec::new(VariantKind::Stochastic);
    let mut loss = HeatmapLossConfig::default();
    loss.ranges.insert(0, (40.0, 80.0));
    let model = net.model;
    let (grads, at) = batch_gradient(&spec, &model, &refs, &uniforms, &loss).unwrap();
    let same = detached_l_is(&spec, &model, &model, &refs, &uniforms, &loss);
    if (same - at.l_is).abs() > 1e-12 * at.l_is.abs().max(1.0) {
        return Err(format!("loss mismatch at the base point: {same} vs {}", at.l_is));
    }
    let analytic: Vec<f64> = grads.tensors.iter().flat_map(|t| t.data().to_vec()).collect();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let shapes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    for (p, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[p].data_mut()[i] += delta;
                detached_l_is(&spec, &m, &model, &refs, &uniforms, &loss)
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    let err = max_rel_err(&analytic, &numeric);
    check(err <= 1e-4, format!("max rel err {err:.2e} over {} parameters", analytic.len()))
}

fn c11_bias_robustness() -> Outcome {
    let base = ExperimentConfig::desk(VariantKind::Standard);
    let splits = base.splits().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [VariantKind::Standard, VariantKind::Selective, VariantKind::Stochastic, VariantKind::Dual] {
        let cfg = ExperimentConfig::desk(kind);
        let start = Instant::now();
        let out = run_experiment(&cfg, &splits, None).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let r = &out.report;
        let iid = r.accuracy(BiasRegime::IidTest).unwrap();
        let ood = r.accuracy(BiasRegime::OodTest).unwrap();
        let dec = r.accuracy(BiasRegime::DeceivingTest).unwrap();
        let pass = secs <= 1800.0
            && if kind == VariantKind::Standard {
                iid >= 0.95 && dec <= 0.5
            } else {
                ood >= 0.9 && (iid - dec).abs() <= 0.03
            };
        ok &= pass;
        lines.push(format!("{} iid={iid:.3} ood={ood:.3} dec={dec:.3} ({secs:.0}s)", kind.name()));
    }
    check(ok, lines.join("; "))
}

fn c12_class_scaling() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::desk(VariantKind::Standard);
    let data = cfg.splits().map_err(|e| e.to_string())?.train.stratified(256, 5);
    let specs: Vec<VariantSpec> = [VariantKind::Original, VariantKind::Selective, VariantKind::Stochastic, VariantKind::Dual]
        .into_iter()
        .map(VariantSpec::new)
        .collect();
    let factory = |k: usize| cfg.build_model(k);
    let rows = bench_class_scaling(&specs, &[2, 16], &data, &cfg.train, &cfg.loss, 3, &factory).map_err(|e| e.to_string())?;
    let ratio = |k| scaling_ratio(&rows, k).unwrap();
    let (o, s, t, d) = (
        ratio(VariantKind::Original),
        ratio(VariantKind::Selective),
        ratio(VariantKind::Stochastic),
        ratio(VariantKind::Dual),
    );
    let secs = start.elapsed().as_secs_f64();
    check(
        o >= 3.0 && s <= 1.3 && t <= 1.3 && d <= 1.5 && secs <= 1200.0,
        format!("C16/C2 ratios: original {o:.2}, selective {s:.2}, stochastic {t:.2}, dual {d:.2} ({secs:.0}s)"),
    )
}

/// Indices where two images differ.
fn diff(a: &Tensor, b: &Tensor) -> Vec<usize> {
    a.data().iter().zip(b.data()).enumerate().filter(|(_, (x, y))| x.to_bits() != y.to_bits()).map(|(i, _)| i).collect()
}

fn c13_bias_injection() -> Outcome {
    let cfg = ExperimentConfig::desk(VariantKind::Standard);
    let mut corpus = synthetic_dataset(cfg.train_size + cfg.val_size, cfg.data_seed, &SynthConfig::default()).unwrap();
    corpus.items.extend(synthetic_dataset(cfg.test_size, cfg.data_seed + 1, &SynthConfig::default()).unwrap().items);
    let mut bad = 0;
    for it in &corpus.items {
        let c = it.label;
        let train = inject_bias(&it.pixels, c, BiasRegime::TrainBias).unwrap();
        let dec = inject_bias(&it.pixels, c, BiasRegime::DeceivingTest).unwrap();
        let ood = inject_bias(&it.pixels, c, BiasRegime::OodTest).unwrap();
        let dec_col = if c == 9 { 0 } else { c + 1 };
        bad += (diff(&train, &it.pixels) != vec![c] || train.data()[c] != 1.0) as usize;
        bad += (diff(&dec, &it.pixels) != vec![dec_col] || dec.data()[dec_col] != 1.0) as usize;
        bad += !diff(&ood, &it.pixels).is_empty() as usize;
    }
    let splits = cfg.splits().unwrap();
    for (iid, ood) in splits.test_iid.items.iter().zip(&splits.test_ood.items) {
        bad += (diff(&iid.pixels, &ood.pixels) != vec![iid.label]) as usize;
    }
    let zeros = corpus.items.iter().filter(|it| it.label == 0).count();
    let nines = corpus.items.iter().filter(|it| it.label == 9).count();
    check(
        bad == 0,
        format!("{} images ({zeros} zeros, {nines} nines), {bad} violations", corpus.len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 13] = [
        ("cross-engine equivalence", c1_cross_engine),
        ("LRP-0 equals gradient x input", c2_lrp0_grad_input),
        ("joint-epsilon additivity", c3_joint_additivity),
        ("z+ nonnegativity", c4_zplus_nonnegative),
        ("selective seed gradient identity", c5_selective_gradient),
        ("conservation", c6_conservation),
        ("GWRP limits", c7_gwrp_limits),
        ("foreground penalty continuity", c8_penalty_continuity),
        ("Welford and range derivation", c9_welford),
        ("heatmap-loss gradient", c10_heatmap_loss_gradient),
        ("desk-scale bias robustness", c11_bias_robustness),
        ("class-count scaling", c12_class_scaling),
        ("bias injection bit-exactness", c13_bias_injection),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|p| p == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{:.1}s]", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
