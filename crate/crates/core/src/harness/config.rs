//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `variant`, `engine`, `zb`, `lds`, `epsilon` | the training variant |
//! | `learning_rate`, `momentum`, `batch_size`, `epochs`, `grad_clip_norm`, `seed` | optimizer |
//! | `p`, `w1`, `w2`, `d`, `e`, `lds_layers`, `lds_decay`, `range.<layer>` | heatmap loss |
//! | `backbone`, `channels`, `calibration_epochs` | network and range calibration |
//! | `train_size`, `val_size`, `test_size`, `data_seed`, `idx_dir` | data |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_idx, make_splits, synthetic_splits, SplitSizes, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::{backbones, Model, TrainConfig};
use crate::loss::HeatmapLossConfig;

use super::variant::{Engine, VariantKind, VariantSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Cnn,
    Mlp,
    Resnet,
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Cnn => "cnn",
            Backbone::Mlp => "mlp",
            Backbone::Resnet => "resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Backbone::Cnn),
            "mlp" => Ok(Backbone::Mlp),
            "resnet" => Ok(Backbone::Resnet),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: VariantSpec,
    pub train: TrainConfig,
    pub loss: HeatmapLossConfig,
    pub backbone: Backbone,
    /// Conv channels per stage (CNN), hidden widths (MLP) or width (ResNet, first entry).
    pub channels: Vec<usize>,
    pub calibration_epochs: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    /// Directory with the four MNIST IDX files; synthetic digits when absent.
    pub idx_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale settings for `kind`.
    pub fn desk(kind: VariantKind) -> Self {
        let mut loss = HeatmapLossConfig::default();
        if kind == VariantKind::Dual {
            loss.p = 0.95;
        }
        Self {
            variant: VariantSpec::new(kind),
            train: TrainConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 32,
                epochs: 20,
                grad_clip_norm: 1.0,
                seed: 7,
            },
            loss,
            backbone: Backbone::Cnn,
            channels: vec![4, 8],
            calibration_epochs: 4,
            train_size: 5000,
            val_size: 1000,
            test_size: 1000,
            data_seed: 2024,
            idx_dir: None,
        }
    }

    pub fn build_model(&self, classes: usize) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed.wrapping_add(17));
        let input = [1, 28, 28];
        match self.backbone {
            Backbone::Cnn => backbones::cnn(&input, &self.channels, classes, &mut rng),
            Backbone::Mlp => backbones::mlp(&input, &self.channels, classes, &mut rng),
            Backbone::Resnet => {
                let w = *self.channels.first().unwrap_or(&8);
                backbones::mini_resnet(&input, w, classes, &mut rng)
            }
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            validation: self.val_size,
            test: self.test_size,
        }
    }

    /// Splits from the MNIST files in `idx_dir`, or from synthetic digits.
    pub fn splits(&self) -> Result<Splits> {
        match &self.idx_dir {
            Some(dir) => {
                let pool = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
                make_splits(&pool, &test, self.sizes(), self.data_seed)
            }
            None => synthetic_splits(self.sizes(), self.data_seed, &SynthConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.train.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive sizes".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk(VariantKind::Standard);
        let mut explicit_engine = false;
        let mut explicit_p = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> { v.parse::<f64>().map_err(|_| err(format!("'{v}' is not a number"))) };
            let int = |v: &str| -> Result<usize> { v.parse::<usize>().map_err(|_| err(format!("'{v}' is not a count"))) };
            let flag = |v: &str| -> Result<bool> {
                match v {
                    "true" | "1" | "yes" => Ok(true),
                    "false" | "0" | "no" => Ok(false),
                    _ => Err(err(format!("'{v}' is not a boolean"))),
                }
            };
            let list = |v: &str| -> Result<Vec<usize>> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|s| int(s.trim())).collect()
            };
            match key {
                "variant" => {
                    let kind = VariantKind::parse(value).map_err(|e| err(e.to_string()))?;
                    let keep = cfg.variant;
                    cfg.variant = VariantSpec::new(kind);
                    cfg.variant.zb_first_layer = keep.zb_first_layer;
                    cfg.variant.lds = keep.lds;
                    cfg.variant.epsilon = keep.epsilon;
                    if explicit_engine && kind != VariantKind::SoftmaxGradInput {
                        cfg.variant.engine = keep.engine;
                    }
                    if !explicit_p && kind == VariantKind::Dual {
                        cfg.loss.p = 0.95;
                    }
                }
                "engine" => {
                    cfg.variant.engine = Engine::parse(value).map_err(|e| err(e.to_string()))?;
                    explicit_engine = true;
                }
                "zb" => cfg.variant.zb_first_layer = flag(value)?,
                "lds" => cfg.variant.lds = flag(value)?,
                "epsilon" => cfg.variant.epsilon = num(value)?,
                "learning_rate" => cfg.train.learning_rate = num(value)?,
                "momentum" => cfg.train.momentum = num(value)?,
                "batch_size" => cfg.train.batch_size = int(value)?,
                "epochs" => cfg.train.epochs = int(value)?,
                "grad_clip_norm" => cfg.train.grad_clip_norm = num(value)?,
                "seed" => cfg.train.seed = int(value)? as u64,
                "p" => {
                    cfg.loss.p = num(value)?;
                    explicit_p = true;
                }
                "w1" => cfg.loss.w1 = num(value)?,
                "w2" => cfg.loss.w2 = num(value)?,
                "d" => cfg.loss.d = num(value)?,
                "e" => cfg.loss.e = num(value)?,
                "lds_layers" => cfg.loss.lds_layers = list(value)?,
                "lds_decay" => cfg.loss.lds_decay = num(value)?,
                "backbone" => cfg.backbone = Backbone::parse(value).map_err(|e| err(e.to_string()))?,
                "channels" => cfg.channels = list(value)?,
                "calibration_epochs" => cfg.calibration_epochs = int(value)?,
                "train_size" => cfg.train_size = int(value)?,
                "val_size" => cfg.val_size = int(value)?,
                "test_size" => cfg.test_size = int(value)?,
                "data_seed" => cfg.data_seed = int(value)? as u64,
                "idx_dir" => cfg.idx_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
                k if k.starts_with("range.") => {
                    let layer = int(&k["range.".len()..])?;
                    let (a, b) = value
                        .split_once(',')
                        .ok_or_else(|| err(format!("range needs 'C1,C2', got '{value}'")))?;
                    cfg.loss.ranges.insert(layer, (num(a.trim())?, num(b.trim())?));
                }
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let v = &self.variant;
        let t = &self.train;
        let l = &self.loss;
        let _ = writeln!(s, "variant={}", v.kind.name());
        let _ = writeln!(s, "engine={}", v.engine.name());
        let _ = writeln!(s, "zb={}", v.zb_first_layer);
        let _ = writeln!(s, "lds={}", v.lds);
        let _ = writeln!(s, "epsilon={:?}", v.epsilon);
        let _ = writeln!(s, "learning_rate={:?}", t.learning_rate);
        let _ = writeln!(s, "momentum={:?}", t.momentum);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "grad_clip_norm={:?}", t.grad_clip_norm);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "p={:?}", l.p);
        let _ = writeln!(s, "w1={:?}", l.w1);
        let _ = writeln!(s, "w2={:?}", l.w2);
        let _ = writeln!(s, "d={:?}", l.d);
        let _ = writeln!(s, "e={:?}", l.e);
        let _ = writeln!(s, "lds_layers={}", join(&l.lds_layers));
        let _ = writeln!(s, "lds_decay={:?}", l.lds_decay);
        for (layer, (c1, c2)) in &l.ranges {
            let _ = writeln!(s, "range.{layer}={c1:?},{c2:?}");
        }
        let _ = writeln!(s, "backbone={}", self.backbone.name());
        let _ = writeln!(s, "channels={}", join(&self.channels));
        let _ = writeln!(s, "calibration_epochs={}", self.calibration_epochs);
        let _ = writeln!(s, "train_size={}", self.train_size);
        let _ = writeln!(s, "val_size={}", self.val_size);
        let _ = writeln!(s, "test_size={}", self.test_size);
        let _ = writeln!(s, "data_seed={}", self.data_seed);
        if let Some(d) = &self.idx_dir {
            let _ = writeln!(s, "idx_dir={}", d.display());
        }
        s
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
