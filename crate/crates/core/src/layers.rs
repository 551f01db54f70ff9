//! Parameterized building blocks shared by every model in the crate.

use image::RgbImage;
use ndgrad::{ParamId, ParamStore64, Tape64, Tensor64, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// 3×3 convolution, stride 1, pad 1, with per-channel bias and He-uniform init.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new(store: &mut ParamStore64, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let init = Tensor64::new(vec![cout, cin, 3, 3], data).expect("shape product matches");
        let weight = store.insert(format!("{name}.weight"), init);
        let bias = store.insert_zeros(format!("{name}.bias"), &[cout]);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape64, store: &ParamStore64, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, 1, 1)?;
        Ok(tape.add_channel_bias(y, b)?)
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore64, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert_glorot(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out, rng);
        let bias = store.insert_zeros(format!("{name}.bias"), &[fan_out]);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape64, store: &ParamStore64, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row_bias(y, b)?)
    }
}

/// Stacks RGB images into `N×3×H×W` with intensities mapped to `[-1, 1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor64> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Config(format!(
                "image {n} is {}×{}, batch is {w}×{h}",
                img.width(),
                img.height()
            )));
        }
        let base = n * 3 * plane;
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = p[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(Tensor64::new(vec![images.len(), 3, h, w], data)?)
}

/// Flattens `N×C×H×W` to `N×(C·H·W)`.
pub fn flatten(tape: &mut Tape64, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n = shape[0];
    let rest = shape[1..].iter().product();
    Ok(tape.reshape(x, vec![n, rest])?)
}
