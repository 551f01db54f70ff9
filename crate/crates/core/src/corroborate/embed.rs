use image::RgbImage;
use ndgrad::{ParamStore64, Tape64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::{flatten, images_to_tensor, Conv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub widths: [usize; 2],
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { widths: [8, 16], seed: 0 }
    }
}

/// Randomly initialized, never trained convolutional feature map shared by all
/// datasets; its outputs are the coordinates in which clusters are compared.
#[derive(Clone, Debug)]
pub struct FeatureEmbedder {
    store: ParamStore64,
    convs: [Conv; 2],
}

impl FeatureEmbedder {
    pub fn new(config: &EmbedderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore64::new();
        let [c1, c2] = config.widths;
        let convs = [Conv::new(&mut store, "embed.conv1", 3, c1, &mut rng), Conv::new(&mut store, "embed.conv2", c1, c2, &mut rng)];
        Self { store, convs }
    }

    /// One feature vector per image: two conv-ReLU-pool stages, a final pool, flattened.
    pub fn features(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut tape = Tape64::new();
            let mut h = tape.constant(images_to_tensor(chunk)?);
            for conv in &self.convs {
                h = conv.forward(&mut tape, &self.store, h)?;
                h = tape.relu(h);
                h = tape.avg_pool2(h)?;
            }
            h = tape.avg_pool2(h)?;
            let h = flatten(&mut tape, h)?;
            let v = tape.value(h);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }
}
