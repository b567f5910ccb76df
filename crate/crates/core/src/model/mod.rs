//! Residual convolutional autoencoder.
//!
//! The encoder stacks residual units and stride-2 downsampling convolutions;
//! the decoder mirrors it with nearest-neighbour upsampling, a 1x1 channel
//! projection, and residual units. Each encoder level's pre-downsample
//! activation is *added* into the decoder level at the same resolution, so
//! information can bypass the bottleneck along nested shortcuts. A final 1x1
//! linear convolution maps back to input channels; reconstructions are left
//! unclamped here and clamped to [0,1] at scoring time.
//!
//! Residual units keep the identity map exactly representable: with a unit's
//! branch parameters zeroed the unit output equals its input (no activation
//! after the addition, and a 1x1 projection appears on the skip path only when
//! the channel count changes).

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{
    add, add_backward, relu, relu_backward, upsample_nearest2x, upsample_nearest2x_backward,
    BatchNorm2d, Conv2d, Element, Parameter, Tensor,
};

fn default_input_channels() -> usize {
    3
}
fn default_input_size() -> usize {
    128
}
fn default_levels() -> usize {
    4
}
fn default_channels_per_level() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_units_per_level() -> usize {
    1
}
fn default_filter_size() -> usize {
    3
}

/// Architecture hyperparameters. The defaults give a 4-level network over
/// 128x128 RGB frames with an 8x8 spatial bottleneck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_channels_per_level")]
    pub channels_per_level: Vec<usize>,
    #[serde(default = "default_units_per_level")]
    pub units_per_level: usize,
    #[serde(default = "default_filter_size")]
    pub filter_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: default_input_channels(),
            input_size: default_input_size(),
            levels: default_levels(),
            channels_per_level: default_channels_per_level(),
            units_per_level: default_units_per_level(),
            filter_size: default_filter_size(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::InvalidConfig(detail));
        if self.input_channels == 0 {
            return fail("input_channels must be at least 1".into());
        }
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.units_per_level == 0 {
            return fail("units_per_level must be at least 1".into());
        }
        if self.channels_per_level.len() != self.levels {
            return fail(format!(
                "channels_per_level has {} entries but levels is {}",
                self.channels_per_level.len(),
                self.levels
            ));
        }
        if self.channels_per_level.iter().any(|&c| c == 0) {
            return fail("channels_per_level entries must be at least 1".into());
        }
        if self.filter_size % 2 == 0 || self.filter_size == 0 {
            return fail(format!("filter_size must be odd, got {}", self.filter_size));
        }
        let divisor = 1usize
            .checked_shl(self.levels as u32)
            .ok_or_else(|| Error::InvalidConfig(format!("levels {} is too deep", self.levels)))?;
        if self.input_size == 0 || self.input_size % divisor != 0 {
            return fail(format!(
                "input_size {} is not divisible by 2^levels = {divisor}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Spatial side length of the bottleneck: `input_size / 2^levels`.
    pub fn latent_size(&self) -> usize {
        self.input_size >> self.levels
    }

    /// Channel count at the bottleneck (innermost level width).
    pub fn latent_channels(&self) -> usize {
        *self.channels_per_level.last().expect("validated config has at least one level")
    }
}

/// Three convolutions (each batch-normalized, the first two ReLU-activated)
/// plus the unit input added back on a skip path.
#[derive(Debug, Clone)]
pub struct ResidualUnit<T: Element = f32> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    /// 1x1 skip projection, present only when in/out channel counts differ.
    projection: Option<Conv2d<T>>,
    cache: Option<UnitCache<T>>,
}

#[derive(Debug, Clone)]
struct UnitCache<T: Element> {
    bn1_out: Tensor<T>,
    bn2_out: Tensor<T>,
}

impl<T: Element> ResidualUnit<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, rng: &mut RngState) -> Self {
        let pad = k / 2;
        // The closing norm starts with zero scale so every unit begins as its
        // skip path alone; without this, stacked units compound the branch
        // variance and fresh models start far outside the stable loss region.
        let mut bn3 = BatchNorm2d::new(&format!("{name}.bn3"), out_ch);
        bn3.zero_scale();
        ResidualUnit {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, k, 1, pad, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, k, 1, pad, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            conv3: Conv2d::new(&format!("{name}.conv3"), out_ch, out_ch, k, 1, pad, rng),
            bn3,
            projection: (in_ch != out_ch)
                .then(|| Conv2d::new(&format!("{name}.proj"), in_ch, out_ch, 1, 1, 0, rng)),
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bn1_out = self.bn1.forward_train(&self.conv1.forward_train(x)?)?;
        let bn2_out = self.bn2.forward_train(&self.conv2.forward_train(&relu(&bn1_out))?)?;
        let branch = self.bn3.forward_train(&self.conv3.forward_train(&relu(&bn2_out))?)?;
        let skip = match &mut self.projection {
            Some(proj) => proj.forward_train(x)?,
            None => x.clone(),
        };
        let out = add(&branch, &skip)?;
        self.cache = Some(UnitCache { bn1_out, bn2_out });
        Ok(out)
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = relu(&self.bn1.forward_infer(&self.conv1.forward_infer(x)?)?);
        let a = relu(&self.bn2.forward_infer(&self.conv2.forward_infer(&a)?)?);
        let branch = self.bn3.forward_infer(&self.conv3.forward_infer(&a)?)?;
        let skip = match &self.projection {
            Some(proj) => proj.forward_infer(x)?,
            None => x.clone(),
        };
        add(&branch, &skip)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::arg("residual_unit", "backward without cached forward"))?;
        let (g_branch, g_skip) = add_backward(grad_out);
        let g = self.bn3.backward(&g_branch)?;
        let g = self.conv3.backward(&g)?;
        let g = relu_backward(&cache.bn2_out, &g)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = relu_backward(&cache.bn1_out, &g)?;
        let g = self.bn1.backward(&g)?;
        let gx_branch = self.conv1.backward(&g)?;
        let gx_skip = match &mut self.projection {
            Some(proj) => proj.backward(&g_skip)?,
            None => g_skip,
        };
        add(&gx_branch, &gx_skip)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = Vec::with_capacity(14);
        out.extend(self.conv1.params());
        out.extend(self.bn1.params());
        out.extend(self.conv2.params());
        out.extend(self.bn2.params());
        out.extend(self.conv3.params());
        out.extend(self.bn3.params());
        if let Some(proj) = &self.projection {
            out.extend(proj.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = Vec::with_capacity(14);
        out.extend(self.conv1.params_mut());
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        out.extend(self.conv3.params_mut());
        out.extend(self.bn3.params_mut());
        if let Some(proj) = &mut self.projection {
            out.extend(proj.params_mut());
        }
        out
    }

    fn bns(&self) -> [&BatchNorm2d<T>; 3] {
        [&self.bn1, &self.bn2, &self.bn3]
    }

    fn bns_mut(&mut self) -> [&mut BatchNorm2d<T>; 3] {
        [&mut self.bn1, &mut self.bn2, &mut self.bn3]
    }

    fn cast<U: Element>(&self) -> ResidualUnit<U> {
        ResidualUnit {
            conv1: self.conv1.cast(),
            bn1: self.bn1.cast(),
            conv2: self.conv2.cast(),
            bn2: self.bn2.cast(),
            conv3: self.conv3.cast(),
            bn3: self.bn3.cast(),
            projection: self.projection.as_ref().map(Conv2d::cast),
            cache: None,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel<T: Element> {
    units: Vec<ResidualUnit<T>>,
    down: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct DecoderLevel<T: Element> {
    /// 1x1 projection applied right after upsampling, before the skip addition.
    up: Conv2d<T>,
    units: Vec<ResidualUnit<T>>,
}

/// Activations recorded by [`Model::forward_trace_train`]. `skips[l]` and
/// `decoder[l]` live at the same resolution; index 0 is the outermost level.
#[derive(Debug)]
pub struct ForwardTrace<T: Element = f32> {
    pub skips: Vec<Tensor<T>>,
    pub latent: Tensor<T>,
    pub decoder: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    encoder: Vec<EncoderLevel<T>>,
    /// Indexed by level (0 = outermost); applied innermost-first.
    decoder: Vec<DecoderLevel<T>>,
    final_proj: Conv2d<T>,
}

impl<T: Element> Model<T> {
    /// Deterministic build: equal seeds give bit-identical parameters.
    pub fn build(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let k = config.filter_size;
        let mut encoder = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let in_ch =
                if l == 0 { config.input_channels } else { config.channels_per_level[l - 1] };
            let out_ch = config.channels_per_level[l];
            let mut units = Vec::with_capacity(config.units_per_level);
            for u in 0..config.units_per_level {
                let unit_in = if u == 0 { in_ch } else { out_ch };
                units.push(ResidualUnit::new(&format!("enc{l}.u{u}"), unit_in, out_ch, k, rng));
            }
            let down = Conv2d::new(&format!("enc{l}.down"), out_ch, out_ch, k, 2, k / 2, rng);
            encoder.push(EncoderLevel { units, down });
        }
        let mut decoder = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let ch = config.channels_per_level[l];
            let in_ch = if l + 1 == config.levels {
                config.channels_per_level[l]
            } else {
                config.channels_per_level[l + 1]
            };
            let up = Conv2d::new(&format!("dec{l}.up"), in_ch, ch, 1, 1, 0, rng);
            let mut units = Vec::with_capacity(config.units_per_level);
            for u in 0..config.units_per_level {
                units.push(ResidualUnit::new(&format!("dec{l}.u{u}"), ch, ch, k, rng));
            }
            decoder.push(DecoderLevel { up, units });
        }
        let final_proj = Conv2d::new(
            "out",
            config.channels_per_level[0],
            config.input_channels,
            1,
            1,
            0,
            rng,
        );
        Ok(Model { config, encoder, decoder, final_proj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::shape(
                "model",
                format!(
                    "expected {}x{s}x{s} frames, got {c}x{h}x{w} (resize at ingestion)",
                    self.config.input_channels
                ),
            ));
        }
        Ok(())
    }

    /// Training-mode forward (batch statistics in BN, caches for backward).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace_train(x)?.output)
    }

    /// Training-mode forward that also exposes the per-level activations.
    pub fn forward_trace_train(&mut self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut cur = x.clone();
        for level in &mut self.encoder {
            for unit in &mut level.units {
                cur = unit.forward_train(&cur)?;
            }
            skips.push(cur.clone());
            cur = level.down.forward_train(&cur)?;
        }
        let latent = cur.clone();
        let mut decoder = vec![None; self.config.levels];
        for (l, level) in self.decoder.iter_mut().enumerate().rev() {
            let up = upsample_nearest2x(&cur)?;
            let projected = level.up.forward_train(&up)?;
            cur = add(&projected, &skips[l])?;
            for unit in &mut level.units {
                cur = unit.forward_train(&cur)?;
            }
            decoder[l] = Some(cur.clone());
        }
        let output = self.final_proj.forward_train(&cur)?;
        let decoder = decoder.into_iter().map(|t| t.expect("all levels visited")).collect();
        Ok(ForwardTrace { skips, latent, decoder, output })
    }

    /// Inference-mode forward: immutable, runs BN on running statistics.
    /// Requires a trained (or loaded) model.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut cur = x.clone();
        for level in &self.encoder {
            for unit in &level.units {
                cur = unit.forward_infer(&cur)?;
            }
            skips.push(cur.clone());
            cur = level.down.forward_infer(&cur)?;
        }
        for (l, level) in self.decoder.iter().enumerate().rev() {
            let up = upsample_nearest2x(&cur)?;
            let projected = level.up.forward_infer(&up)?;
            cur = add(&projected, &skips[l])?;
            for unit in &level.units {
                cur = unit.forward_infer(&cur)?;
            }
        }
        self.final_proj.forward_infer(&cur)
    }

    /// Bottleneck features for a batch: `B x latent_channels x s x s` where
    /// `s = input_size / 2^levels`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for level in &self.encoder {
            for unit in &level.units {
                cur = unit.forward_infer(&cur)?;
            }
            cur = level.down.forward_infer(&cur)?;
        }
        Ok(cur)
    }

    /// Backward through the last [`Model::forward_train`]; accumulates all
    /// parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.final_proj.backward(grad_out)?;
        // Gradient flowing into each encoder skip from the decoder additions.
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; self.config.levels];
        for (l, level) in self.decoder.iter_mut().enumerate() {
            for unit in level.units.iter_mut().rev() {
                g = unit.backward(&g)?;
            }
            let (g_proj, g_skip) = add_backward(&g);
            skip_grads[l] = Some(g_skip);
            let g_up = level.up.backward(&g_proj)?;
            g = upsample_nearest2x_backward(&g_up)?;
        }
        for (l, level) in self.encoder.iter_mut().enumerate().rev() {
            g = level.down.backward(&g)?;
            if let Some(from_skip) = skip_grads[l].take() {
                g = add(&g, &from_skip)?;
            }
            for unit in level.units.iter_mut().rev() {
                g = unit.backward(&g)?;
            }
        }
        Ok(g)
    }

    /// All trainable parameters in a stable order (encoder outermost-in, then
    /// decoder innermost-out, then the output projection). Checkpoints and the
    /// optimizer both rely on this order.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for level in &self.encoder {
            for unit in &level.units {
                out.extend(unit.params());
            }
            out.extend(level.down.params());
        }
        for level in self.decoder.iter().rev() {
            out.extend(level.up.params());
            for unit in &level.units {
                out.extend(unit.params());
            }
        }
        out.extend(self.final_proj.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for level in &mut self.encoder {
            for unit in &mut level.units {
                out.extend(unit.params_mut());
            }
            out.extend(level.down.params_mut());
        }
        for level in self.decoder.iter_mut().rev() {
            out.extend(level.up.params_mut());
            for unit in &mut level.units {
                out.extend(unit.params_mut());
            }
        }
        out.extend(self.final_proj.params_mut());
        out
    }

    /// Batch-norm layers in the same stable order as [`Model::parameters`].
    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut out = Vec::new();
        for level in &self.encoder {
            for unit in &level.units {
                out.extend(unit.bns());
            }
        }
        for level in self.decoder.iter().rev() {
            for unit in &level.units {
                out.extend(unit.bns());
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = Vec::new();
        for level in &mut self.encoder {
            for unit in &mut level.units {
                out.extend(unit.bns_mut());
            }
        }
        for level in self.decoder.iter_mut().rev() {
            for unit in &mut level.units {
                out.extend(unit.bns_mut());
            }
        }
        out
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLevel {
                    units: l.units.iter().map(ResidualUnit::cast).collect(),
                    down: l.down.cast(),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLevel {
                    up: l.up.cast(),
                    units: l.units.iter().map(ResidualUnit::cast).collect(),
                })
                .collect(),
            final_proj: self.final_proj.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mse_loss, mse_loss_backward};

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            input_size: 16,
            levels: 2,
            channels_per_level: vec![4, 8],
            units_per_level: 1,
            filter_size: 3,
        }
    }

    fn rand_frames(b: usize, config: &ModelConfig, rng: &mut RngState) -> Tensor<f32> {
        let s = config.input_size;
        Tensor::uniform(vec![b, config.input_channels, s, s], 0.0, 1.0, rng)
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let mut c = ModelConfig::default();
        c.input_size = 100; // 100 % 16 != 0
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("input_size"), "{err}");

        let mut c = ModelConfig::default();
        c.channels_per_level = vec![16, 32];
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("channels_per_level"), "{err}");

        let mut c = ModelConfig::default();
        c.filter_size = 4;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("filter_size"), "{err}");

        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn default_config_walks_to_an_8x8_bottleneck() {
        let config = ModelConfig::default();
        assert_eq!(config.latent_size(), 8);
        assert_eq!(config.latent_channels(), 128);
        let mut rng = RngState::new(7);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let x = rand_frames(1, &config, &mut rng);
        let trace = model.forward_trace_train(&x).unwrap();
        assert_eq!(trace.latent.shape(), &[1, 128, 8, 8]);
        // 8192 latent elements against 49152 input elements: a real bottleneck
        assert!(trace.latent.len() < x.len());
        assert_eq!(trace.output.shape(), x.shape());
    }

    #[test]
    fn minimal_config_bottoms_out_at_1x1() {
        let config = ModelConfig {
            input_channels: 1,
            input_size: 2,
            levels: 1,
            channels_per_level: vec![2],
            units_per_level: 1,
            filter_size: 1,
        };
        let mut rng = RngState::new(3);
        let mut model = Model::<f32>::build(config, &mut rng).unwrap();
        let x = Tensor::uniform(vec![2, 1, 2, 2], 0.0, 1.0, &mut rng);
        let trace = model.forward_trace_train(&x).unwrap();
        assert_eq!(trace.latent.shape(), &[2, 2, 1, 1]);
    }

    #[test]
    fn equal_seeds_build_bit_identical_models() {
        let config = small_config();
        let a = Model::<f32>::build(config.clone(), &mut RngState::new(99)).unwrap();
        let b = Model::<f32>::build(config, &mut RngState::new(99)).unwrap();
        let (pa, pb) = (a.parameters(), b.parameters());
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.name(), y.name());
            assert_eq!(x.value().data(), y.value().data());
        }
    }

    #[test]
    fn forward_preserves_shape_across_batch_sizes() {
        let config = small_config();
        let mut rng = RngState::new(11);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        for b in [1usize, 7, 64] {
            let x = rand_frames(b, &config, &mut rng);
            let y = model.forward_train(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
        }
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let config = small_config();
        let mut rng = RngState::new(1);
        let mut model = Model::<f32>::build(config, &mut rng).unwrap();
        let x = Tensor::uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let err = model.forward_train(&x).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn zeroed_final_projection_reconstructs_all_zeros() {
        let config = small_config();
        let mut rng = RngState::new(5);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        for p in model.final_proj.params_mut() {
            let v = p.value_mut();
            v.data_mut().fill(0.0);
        }
        let x = rand_frames(2, &config, &mut rng);
        let y = model.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_branch_makes_projection_free_unit_the_identity() {
        let mut rng = RngState::new(21);
        let mut unit = ResidualUnit::<f32>::new("u", 4, 4, 3, &mut rng);
        assert!(unit.projection.is_none());
        for p in unit.params_mut() {
            p.value_mut().data_mut().fill(0.0);
        }
        let x = Tensor::uniform(vec![2, 4, 6, 6], -1.0, 1.0, &mut rng);
        let y = unit.forward_train(&x).unwrap();
        assert_eq!(y.data(), x.data(), "unit with zeroed branch must be exact identity");
    }

    #[test]
    fn encoder_and_decoder_shapes_mirror_each_other() {
        let config = ModelConfig {
            input_channels: 3,
            input_size: 32,
            levels: 3,
            channels_per_level: vec![4, 6, 8],
            units_per_level: 2,
            filter_size: 3,
        };
        let mut rng = RngState::new(13);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let x = rand_frames(2, &config, &mut rng);
        let trace = model.forward_trace_train(&x).unwrap();
        assert_eq!(trace.skips.len(), trace.decoder.len());
        for (skip, dec) in trace.skips.iter().zip(&trace.decoder) {
            assert_eq!(skip.shape(), dec.shape());
        }
    }

    #[test]
    fn zeroed_decoder_passes_outermost_skip_through_unchanged() {
        let config = small_config();
        let mut rng = RngState::new(17);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        for level in &mut model.decoder {
            for p in level.up.params_mut() {
                p.value_mut().data_mut().fill(0.0);
            }
            for unit in &mut level.units {
                for p in unit.params_mut() {
                    p.value_mut().data_mut().fill(0.0);
                }
            }
        }
        let x = rand_frames(2, &config, &mut rng);
        let trace = model.forward_trace_train(&x).unwrap();
        // With every decoder parameter zero, each level reduces to the skip
        // addition alone, so the outermost activation is the outermost skip.
        assert_eq!(trace.decoder[0].data(), trace.skips[0].data());
    }

    #[test]
    fn encode_matches_latent_and_is_deterministic() {
        let config = small_config();
        let mut rng = RngState::new(23);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let x = rand_frames(2, &config, &mut rng);
        model.forward_train(&x).unwrap(); // initialize BN running stats
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x).unwrap();
        assert_eq!(
            a.shape(),
            &[2, config.latent_channels(), config.latent_size(), config.latent_size()]
        );
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn infer_before_training_is_rejected() {
        let config = small_config();
        let mut rng = RngState::new(29);
        let model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let x = rand_frames(1, &config, &mut rng);
        assert!(model.forward_infer(&x).is_err());
    }

    #[test]
    fn param_count_matches_shape_sum_oracle() {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let bn = |c: usize| 2 * c;
        let unit = |i: usize, o: usize| {
            let mut n = conv(o, i, 3) + conv(o, o, 3) + conv(o, o, 3) + 3 * bn(o);
            if i != o {
                n += conv(o, i, 1);
            }
            n
        };
        // Default config, counted level by level from the architecture rules.
        let (c0, c1, c2, c3) = (16, 32, 64, 128);
        let encoder = unit(3, c0)
            + conv(c0, c0, 3)
            + unit(c0, c1)
            + conv(c1, c1, 3)
            + unit(c1, c2)
            + conv(c2, c2, 3)
            + unit(c2, c3)
            + conv(c3, c3, 3);
        let decoder = conv(c3, c3, 1)
            + unit(c3, c3)
            + conv(c2, c3, 1)
            + unit(c2, c2)
            + conv(c1, c2, 1)
            + unit(c1, c1)
            + conv(c0, c1, 1)
            + unit(c0, c0);
        let expected = encoder + decoder + conv(3, c0, 1);
        let model = Model::<f32>::build(ModelConfig::default(), &mut RngState::new(1)).unwrap();
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn doubling_channel_widths_roughly_quadruples_parameters() {
        let mut config = small_config();
        let base =
            Model::<f32>::build(config.clone(), &mut RngState::new(1)).unwrap().param_count();
        config.channels_per_level = vec![8, 16];
        let doubled = Model::<f32>::build(config, &mut RngState::new(1)).unwrap().param_count();
        let ratio = doubled as f64 / base as f64;
        assert!((3.0..4.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn training_steps_reduce_reconstruction_error_tenfold() {
        // Overfit a single frame; RMSE after 80 steps must drop >= 10x.
        let config = small_config();
        let mut rng = RngState::new(31);
        let mut model = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let x = rand_frames(1, &config, &mut rng);
        let mut opt = crate::tensor::Adam::new(0.005);
        let mut first = None;
        for _ in 0..80 {
            let y = model.forward_train(&x).unwrap();
            first.get_or_insert(mse_loss(&y, &x).unwrap() as f64);
            let g = mse_loss_backward(&y, &x).unwrap();
            model.backward(&g).unwrap();
            opt.step(&mut model.parameters_mut()).unwrap();
        }
        let first = first.unwrap();
        let y = model.forward_train(&x).unwrap();
        let last = mse_loss(&y, &x).unwrap() as f64;
        assert!(
            last.sqrt() * 10.0 <= first.sqrt(),
            "rmse only moved {} -> {}",
            first.sqrt(),
            last.sqrt()
        );
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{central_diff_at, max_relative_error};
        // Joint check over every parameter and the input, sampled coordinates.
        let config = ModelConfig {
            input_channels: 2,
            input_size: 8,
            levels: 2,
            channels_per_level: vec![3, 4],
            units_per_level: 1,
            filter_size: 3,
        };
        let mut rng = RngState::new(41);
        let model32 = Model::<f32>::build(config.clone(), &mut rng).unwrap();
        let model = model32.cast::<f64>();
        let x = Tensor::<f64>::uniform(vec![2, 2, 8, 8], 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::uniform(vec![2, 2, 8, 8], 0.0, 1.0, &mut rng);

        let flatten = |m: &Model<f64>, x: &Tensor<f64>| -> Vec<f64> {
            let mut flat: Vec<f64> =
                m.parameters().iter().flat_map(|p| p.value().data().iter().copied()).collect();
            flat.extend(x.data());
            flat
        };
        let unflatten = |flat: &[f64]| -> (Model<f64>, Tensor<f64>) {
            let mut m = model.clone();
            let mut at = 0;
            for p in m.parameters_mut() {
                let n = p.len();
                p.value_mut().data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
            let xt = Tensor::new(x.shape().to_vec(), flat[at..].to_vec()).unwrap();
            (m, xt)
        };

        // Nudge every coordinate off its initial value so no parameter sits
        // at an exact zero (fresh units start with zero-scale closing norms,
        // where branch gradients vanish identically and the check would be
        // vacuous for them).
        let mut nudge = RngState::new(43);
        let flat: Vec<f64> = flatten(&model, &x)
            .into_iter()
            .map(|v| v + (nudge.unit_f64() - 0.5) * 0.2)
            .collect();
        let (mut m, xt) = unflatten(&flat);
        let y = m.forward_train(&xt).unwrap();
        let g = mse_loss_backward(&y, &target).unwrap();
        let gx = m.backward(&g).unwrap();
        let mut analytic: Vec<f64> =
            m.parameters().iter().flat_map(|p| p.grad().iter().copied()).collect();
        analytic.extend(gx.data());
        assert_eq!(analytic.len(), flat.len());

        let mut f = |p: &[f64]| -> f64 {
            let (mut m, xt) = unflatten(p);
            let y = m.forward_train(&xt).unwrap();
            mse_loss(&y, &target).unwrap()
        };
        let mut probe_rng = RngState::new(42);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let i = probe_rng.below(flat.len());
            let fd = central_diff_at(&mut f, &flat, i, 1e-5);
            worst = worst.max(max_relative_error(&[analytic[i]], &[fd]));
        }
        assert!(worst < 1e-3, "worst sampled relative error {worst}");
    }
}
