//! Toy backbones: a fully-connected net, a three-stage CNN, and a small
//! residual network with batch normalization.

use rand::Rng;

use super::model::{BatchNormParams, Model, ModelBuilder, NodeId};
use crate::error::Result;
use crate::tensor::ConvGeometry;

/// Flatten, then `Dense → ReLU` per hidden width, then a dense output layer.
pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, rng: &mut impl Rng) -> Result<Model> {
    let mut b = ModelBuilder::new(input_shape);
    let mut x = b.input();
    if input_shape.len() > 1 {
        x = b.flatten(x)?;
    }
    for &h in hidden {
        let d = b.dense_he(x, h, rng)?;
        x = b.relu(d)?;
    }
    let out = b.dense_he(x, classes, rng)?;
    b.output(out)?;
    b.build()
}

/// The 784-256-64-K fully-connected backbone.
pub fn mlp_784(classes: usize, rng: &mut impl Rng) -> Result<Model> {
    mlp(&[1, 28, 28], &[256, 64], classes, rng)
}

/// `(Conv3×3 → ReLU → MaxPool2)` per entry of `channels`, then a dense output layer.
pub fn cnn(input_shape: &[usize], channels: &[usize], classes: usize, rng: &mut impl Rng) -> Result<Model> {
    let mut b = ModelBuilder::new(input_shape);
    let mut x = b.input();
    for &c in channels {
        let conv = b.conv_he(x, c, 3, ConvGeometry::new(1, 1), rng)?;
        let r = b.relu(conv)?;
        x = b.maxpool(r, 2, 2)?;
    }
    let f = b.flatten(x)?;
    let out = b.dense_he(f, classes, rng)?;
    b.output(out)?;
    b.build()
}

fn conv_bn(b: &mut ModelBuilder, x: NodeId, filters: usize, kernel: usize, geom: ConvGeometry, rng: &mut impl Rng) -> Result<NodeId> {
    let c = b.conv_he(x, filters, kernel, geom, rng)?;
    b.batchnorm(c, BatchNormParams::identity(filters))
}

/// Stem, one identity-shortcut block, one downsampling block with a 1×1
/// projection shortcut, global average pooling, dense output.
pub fn mini_resnet(input_shape: &[usize], width: usize, classes: usize, rng: &mut impl Rng) -> Result<Model> {
    let mut b = ModelBuilder::new(input_shape);
    let same = ConvGeometry::new(1, 1);
    let stem = conv_bn(&mut b, 0, width, 3, same, rng)?;
    let stem = b.relu(stem)?;

    let m = conv_bn(&mut b, stem, width, 3, same, rng)?;
    let m = b.relu(m)?;
    let m = conv_bn(&mut b, m, width, 3, same, rng)?;
    let s = b.sum(m, stem)?;
    let block1 = b.relu(s)?;

    let m = conv_bn(&mut b, block1, 2 * width, 3, ConvGeometry::new(2, 1), rng)?;
    let m = b.relu(m)?;
    let m = conv_bn(&mut b, m, 2 * width, 3, same, rng)?;
    let short = conv_bn(&mut b, block1, 2 * width, 1, ConvGeometry::new(2, 0), rng)?;
    let s = b.sum(m, short)?;
    let block2 = b.relu(s)?;

    let extent = b.shape(block2)[1];
    let pooled = b.avgpool(block2, extent, extent)?;
    let f = b.flatten(pooled)?;
    let out = b.dense_he(f, classes, rng)?;
    b.output(out)?;
    b.build()
}
