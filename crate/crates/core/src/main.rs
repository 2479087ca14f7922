//! Command-line front end: train, evaluate, explain, tune-range, bench.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use isnet::data::{BiasRegime, Dataset};
use isnet::graph::{forward_sample, fuse_model, load_model, save_model};
use isnet::harness::{
    bench_class_scaling, calibrate, evaluate, run_experiment, scaling_ratio, write_bench_csv, Engine,
    ExperimentConfig, VariantKind, VariantSpec,
};
use isnet::lrp::{self, export_heatmaps, read_pgm, ExplanationTarget};
use isnet::range::format_ranges;
use isnet::{Error, Result};

#[derive(Parser)]
#[command(name = "isnet", version, about = "Train and inspect background-bias resistant classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant on the biased training split and evaluate the best checkpoint.
    Train {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        engine: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, loss curve and reports.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on the test regimes.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of iid,ood,deceiving.
        #[arg(long, default_value = "iid,ood,deceiving")]
        regimes: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmaps for one image as PGM and CSV files.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A binary PGM file, or `test:<n>` for the n-th i.i.d. test image.
        #[arg(long)]
        image: String,
        /// logit-c<k>, joint-eps, joint-zplus, selective-c<k> or softmax-c<k>.
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "explicit")]
        engine: String,
        #[arg(long, default_value_t = lrp::DEFAULT_EPSILON)]
        epsilon: f64,
        /// Use the bounded rule on the first layer.
        #[arg(long)]
        zb: bool,
        /// Extra layer ids whose input relevance is also written.
        #[arg(long, value_delimiter = ',')]
        capture: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "heatmaps")]
        out: PathBuf,
    },
    /// Calibrate the foreground loss range and print `range.<layer>=C1,C2` lines.
    TuneRange {
        #[arg(long, default_value = "stochastic")]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epoch time against the number of output classes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "original,dual,selective,stochastic")]
        variants: Vec<String>,
        /// Training images per timed epoch.
        #[arg(long, default_value_t = 256)]
        images: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk(VariantKind::Standard)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(variant: Option<String>, engine: Option<String>, config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(v) = variant {
        let kind = VariantKind::parse(&v)?;
        let old = cfg.variant;
        cfg.variant = VariantSpec::new(kind);
        cfg.variant.zb_first_layer = old.zb_first_layer;
        cfg.variant.lds = old.lds;
        cfg.variant.epsilon = old.epsilon;
    }
    if let Some(e) = engine {
        cfg.variant.engine = Engine::parse(&e)?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&out)?;
    let splits = cfg.splits()?;
    let mut curve = create(&out.join("loss_curve.csv"))?;
    let outcome = run_experiment(&cfg, &splits, Some(&mut curve))?;
    curve.flush()?;
    save_model(&outcome.history.best, &out.join("checkpoint.txt"))?;
    std::fs::write(out.join("config.txt"), outcome.config.to_text())?;
    let mut f = create(&out.join("epochs.csv"))?;
    writeln!(f, "epoch,seconds,val_accuracy,l_c,l_lrp,l_is,maps_per_image")?;
    for e in &outcome.history.epochs {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            e.epoch, e.seconds, e.val_accuracy, e.loss.l_c, e.loss.l_lrp, e.loss.l_is, e.maps_per_image
        )?;
    }
    f.flush()?;
    let mut f = create(&out.join("report.csv"))?;
    outcome.report.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(&out.join("confusion.csv"))?;
    outcome.report.write_confusion_csv(&mut f)?;
    f.flush()?;
    println!(
        "{}: best epoch {} (biased validation {:.4})",
        cfg.variant.kind.name(),
        outcome.history.best_epoch,
        outcome.history.best_val_accuracy
    );
    outcome.report.write_csv(std::io::stdout().lock())?;
    Ok(())
}

fn cmd_evaluate(checkpoint: PathBuf, regimes: String, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let model = load_model(&checkpoint)?;
    let splits = cfg.splits()?;
    let regimes = regimes
        .split(',')
        .map(|r| BiasRegime::parse(r.trim()))
        .collect::<Result<Vec<_>>>()?;
    let tests: Vec<(BiasRegime, &Dataset)> = regimes.iter().map(|&r| (r, splits.test(r))).collect();
    let report = evaluate(&model, &tests, &[])?;
    match out {
        Some(p) => {
            let mut f = create(&p)?;
            report.write_csv(&mut f)?;
            f.flush()?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    checkpoint: PathBuf,
    image: String,
    target: String,
    engine: String,
    epsilon: f64,
    zb: bool,
    capture: Vec<usize>,
    config: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let model = load_model(&checkpoint)?;
    let target = ExplanationTarget::parse(&target)?;
    let (pixels, stem) = match image.strip_prefix("test:") {
        Some(n) => {
            let n: usize = n.parse().map_err(|_| Error::Config(format!("bad test index '{n}'")))?;
            let splits = load_config(config.as_deref())?.splits()?;
            let item = splits
                .test_iid
                .items
                .get(n)
                .ok_or_else(|| Error::Config(format!("test index {n} out of range")))?;
            (item.pixels.clone(), format!("test{n}_digit{}", item.label))
        }
        None => {
            let path = Path::new(&image);
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            (read_pgm(&std::fs::read(path)?)?, stem)
        }
    };
    let fused = fuse_model(&model)?;
    let tape = forward_sample(&fused.model, &pixels)?;
    let first = zb.then_some(lrp::LrpRule::ZB { low: 0.0, high: 1.0, eps: epsilon });
    let maps = match Engine::parse(&engine)? {
        Engine::Explicit => {
            let mut policy = match target {
                ExplanationTarget::JointZPlus => lrp::RulePolicy::zplus(epsilon),
                _ => lrp::RulePolicy::epsilon(epsilon),
            };
            policy.first_layer = first;
            lrp::propagate(&fused.model, &tape, target, &policy, &capture)?
        }
        Engine::Flex => lrp::flex_explain(&fused.model, &tape, target, epsilon, first, &capture)?,
    };
    let logits: Vec<String> = tape.output(fused.model.output_id()).data().iter().map(|v| format!("{v:.4}")).collect();
    println!("logits: {}", logits.join(" "));
    for p in export_heatmaps(&out, &stem, &maps)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_tune_range(variant: String, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    cfg.variant = VariantSpec::new(VariantKind::parse(&variant)?);
    let splits = cfg.splits()?;
    let capture: Vec<usize> = cfg.loss.lds_layers.clone();
    let cal = calibrate(&cfg.variant, cfg.build_model(10)?, &splits.train, &cfg.train, cfg.calibration_epochs, &capture)?;
    let text = format_ranges(&cal.ranges);
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_bench(
    classes: Vec<usize>,
    variants: Vec<String>,
    images: usize,
    repeats: usize,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let specs = variants
        .iter()
        .map(|v| VariantKind::parse(v.trim()).map(VariantSpec::new))
        .collect::<Result<Vec<_>>>()?;
    let data = cfg.splits()?.train.stratified(images, cfg.data_seed);
    let factory = |k: usize| cfg.build_model(k);
    let rows = bench_class_scaling(&specs, &classes, &data, &cfg.train, &cfg.loss, repeats, &factory)?;
    match out {
        Some(p) => {
            let mut f = create(&p)?;
            write_bench_csv(&rows, &mut f)?;
            f.flush()?;
        }
        None => write_bench_csv(&rows, std::io::stdout().lock())?,
    }
    for s in &specs {
        if let Some(r) = scaling_ratio(&rows, s.kind) {
            eprintln!("{}: epoch-time ratio largest/smallest class count = {r:.2}", s.kind.name());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { variant, engine, config, out } => cmd_train(variant, engine, config, out),
        Command::Evaluate { checkpoint, regimes, config, out } => cmd_evaluate(checkpoint, regimes, config, out),
        Command::Explain { checkpoint, image, target, engine, epsilon, zb, capture, config, out } => {
            cmd_explain(checkpoint, image, target, engine, epsilon, zb, capture, config, out)
        }
        Command::TuneRange { variant, config, out } => cmd_tune_range(variant, config, out),
        Command::Bench { classes, variants, images, repeats, config, out } => {
            cmd_bench(classes, variants, images, repeats, config, out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
