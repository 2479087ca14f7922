use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ConvGeometry, Tensor};

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Six-loop cross-correlation straight from the definition.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeometry) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let oh = ((h as isize + 2 * p - kh as isize) / s + 1) as usize;
    let ow = ((wd as isize + 2 * p - kw as isize) / s + 1) as usize;
    let mut out = vec![0.0; f * oh * ow];
    for fo in 0..f {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[fo]);
                for ci in 0..c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ih = i as isize * s + ki as isize - p;
                            let iw = j as isize * s + kj as isize - p;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((fo * c + ci) * kh + ki) * kw + kj]
                                * x.data()[(ci * h + ih as usize) * wd + iw as usize];
                        }
                    }
                }
                out[(fo * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![f, oh, ow], out).unwrap()
}
