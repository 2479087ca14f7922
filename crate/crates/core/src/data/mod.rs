//! Digit datasets: IDX ingestion, the synthetic fallback, background-bias
//! regimes, foreground masks and deterministic splits.

pub mod idx;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub use synth::{synthetic_digits, SynthConfig, SIDE};

/// One grey image, its label and its foreground mask (both `1×28×28`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
    pub mask: Tensor,
}

impl LabeledImage {
    /// Wraps a clean image; the mask is derived from it.
    pub fn clean(pixels: Tensor, label: usize) -> Result<Self> {
        let mask = derive_mask(&pixels)?;
        Ok(Self { pixels, label, mask })
    }
}

/// Foreground = nonzero pixels grown by one pixel in all eight directions.
pub fn derive_mask(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(dim_err!("mask needs a C×H×W image, got {other:?}")),
    };
    let mut mask = Tensor::zeros(image.shape());
    let src = image.data();
    let dst = mask.data_mut();
    for ch in 0..c {
        let off = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                if src[off + i * w + j] <= 0.0 {
                    continue;
                }
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        dst[off + ii * w + jj] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Block-max downsampling of a `1×H×W` mask to `h×w`, repeated over
/// `channels` (any foreground in a block marks the block).
pub fn downsample_mask(mask: &Tensor, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, mh, mw) = match mask.shape() {
        [c, mh, mw] => (*c, *mh, *mw),
        other => return Err(dim_err!("mask must be C×H×W, got {other:?}")),
    };
    if h == 0 || w == 0 || h > mh || w > mw {
        return Err(dim_err!("cannot downsample a {mh}×{mw} mask to {h}×{w}"));
    }
    let mut plane = vec![0.0; h * w];
    for i in 0..mh {
        for j in 0..mw {
            if mask.data()[i * mw + j] > 0.0 {
                plane[(i * h / mh) * w + j * w / mw] = 1.0;
            }
        }
    }
    let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    Tensor::new(vec![channels, h, w], data)
}

/// Where the bias pixel goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasRegime {
    /// Pixel `(0, c)` for class `c`.
    TrainBias,
    /// Same rule as training.
    IidTest,
    /// No bias.
    OodTest,
    /// Pixel `(0, c+1)`, and `(0, 0)` for class 9.
    DeceivingTest,
}

impl BiasRegime {
    pub fn name(&self) -> &'static str {
        match self {
            BiasRegime::TrainBias => "train",
            BiasRegime::IidTest => "iid",
            BiasRegime::OodTest => "ood",
            BiasRegime::DeceivingTest => "deceiving",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(BiasRegime::TrainBias),
            "iid" => Ok(BiasRegime::IidTest),
            "ood" => Ok(BiasRegime::OodTest),
            "deceiving" => Ok(BiasRegime::DeceivingTest),
            other => Err(Error::Config(format!("unknown bias regime '{other}'"))),
        }
    }

    /// Column of the top-row pixel set for class `label`.
    pub fn column(&self, label: usize) -> Option<usize> {
        match self {
            BiasRegime::TrainBias | BiasRegime::IidTest => Some(label),
            BiasRegime::OodTest => None,
            BiasRegime::DeceivingTest => Some(if label >= 9 { 0 } else { label + 1 }),
        }
    }
}

pub fn inject_bias(image: &Tensor, label: usize, regime: BiasRegime) -> Result<Tensor> {
    if label > 9 {
        return Err(Error::Contract(format!("bias rule defined for digits 0–9, got {label}")));
    }
    let mut out = image.clone();
    if let Some(col) = regime.column(label) {
        let w = *image.shape().last().ok_or_else(|| dim_err!("scalar image"))?;
        if col >= w {
            return Err(dim_err!("bias column {col} outside an image {w} wide"));
        }
        out.data_mut()[col] = 1.0;
    }
    Ok(out)
}

/// Images of one split; masks always describe the clean images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn with_regime(&self, regime: BiasRegime) -> Result<Dataset> {
        let items = self
            .items
            .iter()
            .map(|it| {
                Ok(LabeledImage {
                    pixels: inject_bias(&it.pixels, it.label, regime)?,
                    label: it.label,
                    mask: it.mask.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { items })
    }

    /// `N×C×H×W` pixels and labels of the given items.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.items[i].pixels.clone()).collect();
        let labels = indices.iter().map(|&i| self.items[i].label).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Stratified deterministic subsample of `n` items (class proportions kept).
    pub fn stratified(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = self.items.iter().map(|it| it.label).max().map_or(0, |m| m + 1);
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, it) in self.items.iter().enumerate() {
            per_class[it.label].push(i);
        }
        let total = self.items.len().max(1);
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        let mut rest: Vec<usize> = Vec::new();
        for members in &mut per_class {
            members.shuffle(&mut rng);
            let take = members.len() * n / total;
            chosen.extend(&members[..take]);
            rest.extend(&members[take..]);
        }
        rest.shuffle(&mut rng);
        let missing = n.saturating_sub(chosen.len());
        chosen.extend(rest.into_iter().take(missing));
        chosen.sort_unstable();
        chosen.truncate(n);
        Dataset {
            items: chosen.into_iter().map(|i| self.items[i].clone()).collect(),
        }
    }
}

/// Clean images from a pair of IDX files, pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = idx::read_images_file(images_path)?;
    let labels = idx::read_labels_file(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    let shape = vec![1, images.rows, images.cols];
    let items = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let px = images.image(i).iter().map(|&v| v as f64 / 255.0).collect();
            LabeledImage::clean(Tensor::new(shape.clone(), px)?, l as usize)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { items })
}

/// Clean synthetic digits.
pub fn synthetic_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    let items = synthetic_digits(n, seed, cfg)
        .into_iter()
        .map(|(px, l)| LabeledImage::clean(Tensor::new(vec![1, SIDE, SIDE], px)?, l))
        .collect::<Result<_>>()?;
    Ok(Dataset { items })
}

/// Writes clean images and labels as IDX files.
pub fn save_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = data.items.first().ok_or_else(|| Error::Contract("empty dataset".into()))?;
    let (_, rows, cols) = first.pixels.chw();
    let pixels = data
        .items
        .iter()
        .flat_map(|it| it.pixels.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    idx::write_images_file(&idx::IdxImages { rows, cols, pixels }, images_path)?;
    let labels: Vec<u8> = data.items.iter().map(|it| it.label as u8).collect();
    idx::write_labels_file(&labels, labels_path)
}

/// Split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const FULL: SplitSizes = SplitSizes {
        train: 40_000,
        validation: 10_000,
        test: 10_000,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 5_000,
        validation: 1_000,
        test: 1_000,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Biased training images.
    pub train: Dataset,
    pub validation: Dataset,
    pub biased_validation: Dataset,
    pub test_iid: Dataset,
    pub test_ood: Dataset,
    pub test_deceiving: Dataset,
}

impl Splits {
    pub fn test(&self, regime: BiasRegime) -> &Dataset {
        match regime {
            BiasRegime::TrainBias | BiasRegime::IidTest => &self.test_iid,
            BiasRegime::OodTest => &self.test_ood,
            BiasRegime::DeceivingTest => &self.test_deceiving,
        }
    }
}

/// Shuffles `pool` into training and validation and applies the regimes;
/// the three test sets share the images of `test_pool`.
pub fn make_splits(pool: &Dataset, test_pool: &Dataset, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    let want = sizes.train + sizes.validation;
    if pool.len() < want || test_pool.len() < sizes.test {
        return Err(Error::Config(format!(
            "need {want} pool and {} test images, have {} and {}",
            sizes.test,
            pool.len(),
            test_pool.len()
        )));
    }
    let pool = if pool.len() > want { pool.stratified(want, seed) } else { pool.clone() };
    let test = if test_pool.len() > sizes.test {
        test_pool.stratified(sizes.test, seed ^ 0x5eed)
    } else {
        test_pool.clone()
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| Dataset {
        items: ix.iter().map(|&i| pool.items[i].clone()).collect(),
    };
    let train_clean = pick(&order[..sizes.train]);
    let validation = pick(&order[sizes.train..sizes.train + sizes.validation]);
    Ok(Splits {
        train: train_clean.with_regime(BiasRegime::TrainBias)?,
        biased_validation: validation.with_regime(BiasRegime::TrainBias)?,
        validation,
        test_iid: test.with_regime(BiasRegime::IidTest)?,
        test_ood: test.with_regime(BiasRegime::OodTest)?,
        test_deceiving: test.with_regime(BiasRegime::DeceivingTest)?,
    })
}

/// Desk-scale splits from synthetic digits.
pub fn synthetic_splits(sizes: SplitSizes, seed: u64, cfg: &SynthConfig) -> Result<Splits> {
    let pool = synthetic_dataset(sizes.train + sizes.validation, seed, cfg)?;
    let test = synthetic_dataset(sizes.test, seed.wrapping_add(1), cfg)?;
    make_splits(&pool, &test, sizes, seed)
}
