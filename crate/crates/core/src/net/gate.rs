use ndgrad::{ParamStore64, Tape64, Tensor64, Var};
use rand::Rng;

use crate::error::Result;
use crate::layers::Linear;

/// Simplified two-path attention: a channel path (pooled descriptor → reduced
/// projection → sigmoid channel scale) followed by a spatial path (channel mean →
/// 3×3 conv → sigmoid pixel scale). Features are multiplied by twice each
/// sigmoid mask, so a gate at its initial 0.5 masks passes features unchanged.
/// Output shape equals input shape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionGate {
    squeeze: Linear,
    excite: Linear,
    spatial_weight: ndgrad::ParamId,
    spatial_bias: ndgrad::ParamId,
}

impl AttentionGate {
    /// The excitation and spatial weights start near zero so every mask starts
    /// near 0.5. Squeeze weights start non-negative: the pooled descriptor of
    /// ReLU features is non-negative, so no hidden unit starts dead.
    pub fn new(store: &mut ParamStore64, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        let squeeze = Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng);
        store.get_mut(squeeze.weight).value.data_mut().iter_mut().for_each(|w| *w = w.abs());
        let excite = Linear::new(store, &format!("{name}.excite"), hidden, channels, rng);
        let small: Vec<f64> = (0..hidden * channels).map(|_| rng.gen_range(-0.01..0.01)).collect();
        store.get_mut(excite.weight).value = Tensor64::new(vec![hidden, channels], small).expect("shape product matches");
        let spatial: Vec<f64> = (0..9).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let spatial_weight =
            store.insert(format!("{name}.spatial.weight"), Tensor64::new(vec![1, 1, 3, 3], spatial).expect("9 values"));
        let spatial_bias = store.insert_zeros(format!("{name}.spatial.bias"), &[1]);
        Self { squeeze, excite, spatial_weight, spatial_bias }
    }

    /// Gated features and the spatial mask `N×1×H×W`.
    pub fn forward(&self, tape: &mut Tape64, store: &ParamStore64, x: Var) -> Result<(Var, Var)> {
        let pooled = tape.global_avg_pool(x)?;
        let h = self.squeeze.forward(tape, store, pooled)?;
        let h = tape.relu(h);
        let s = self.excite.forward(tape, store, h)?;
        let s = tape.sigmoid(s);
        let s2 = tape.scale(s, 2.0);
        let x = tape.scale_channels(x, s2)?;
        let m = tape.channel_mean(x)?;
        let w = tape.param(store, self.spatial_weight);
        let b = tape.param(store, self.spatial_bias);
        let m = tape.conv2d(m, w, 1, 1)?;
        let m = tape.add_channel_bias(m, b)?;
        let mask = tape.sigmoid(m);
        let mask2 = tape.scale(mask, 2.0);
        let out = tape.scale_spatial(x, mask2)?;
        Ok((out, mask))
    }
}
