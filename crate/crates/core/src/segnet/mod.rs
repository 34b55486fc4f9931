//! Fully-convolutional encoder-decoder with a softmax segmentation head and
//! an optional 1-channel sigmoid uncertainty head on the shared decoder
//! features.
//!
//! Layout for encoder widths `[w0, .., w{S-1}]` and decoder width `D`:
//!
//! ```text
//! enc{i}: conv3x3 -> relu -> maxpool2          widths w0 .. w{S-1}
//! dec{i}: upsample2x -> conv3x3 -> relu        widths w{S-2} .. w0, then D
//! seg_head: conv1x1 D -> C, softmax
//! unc_head: conv1x1 D -> 1, sigmoid            (dual-head only)
//! ```
//!
//! The decoder mirrors the encoder widths and ends at `D`, so the total
//! downsampling factor is `2^S`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Shape, Tensor};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_width: usize,
    pub kernel: usize,
    /// Nominal training input extent (square); the network itself accepts
    /// any extent divisible by [`ModelConfig::downsample_factor`].
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 6,
            encoder_widths: vec![8, 16, 32],
            decoder_width: 32,
            kernel: 3,
            input_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.stages()
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let s = self.stages();
        (0..s)
            .map(|i| {
                if i + 1 == s {
                    self.decoder_width
                } else {
                    self.encoder_widths[s - 2 - i]
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Decoder,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Decoder => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Backbone),
            1 => Some(ParamGroup::Decoder),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Shape,
    pub fan_in: usize,
    pub is_bias: bool,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        group,
        shape: Shape::new(cout, cin, k, k),
        fan_in: cin * k * k,
        is_bias: false,
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        group,
        shape: Shape::new(1, cout, 1, 1),
        fan_in: cin * k * k,
        is_bias: true,
    });
}

/// Ordered parameter layout. The uncertainty head, when present, is last.
pub fn param_specs(config: &ModelConfig, dual_head: bool) -> Vec<ParamSpec> {
    let k = config.kernel;
    let mut specs = Vec::new();
    let mut cin = 3;
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        conv_specs(&mut specs, &format!("enc{i}"), ParamGroup::Backbone, cin, w, k);
        cin = w;
    }
    for (i, w) in config.decoder_widths().into_iter().enumerate() {
        conv_specs(&mut specs, &format!("dec{i}"), ParamGroup::Decoder, cin, w, k);
        cin = w;
    }
    conv_specs(&mut specs, "seg_head", ParamGroup::Decoder, cin, config.classes, 1);
    if dual_head {
        conv_specs(&mut specs, "unc_head", ParamGroup::Decoder, cin, 1, 1);
    }
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    dual_head: bool,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    pub fn from_parts(config: ModelConfig, dual_head: bool, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, dual_head);
        if specs.len() != tensors.len() {
            return Err(Error::shape("model parameters", &[specs.len()], &[tensors.len()]));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("model parameter", s.shape.dims(), t.shape().dims()));
            }
        }
        Ok(ModelParams {
            config,
            dual_head,
            specs,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dual_head(&self) -> bool {
        self.dual_head
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    /// Baseline copy: the same shared parameters without the uncertainty head.
    pub fn without_uncertainty_head(&self) -> ModelParams {
        let keep = param_specs(&self.config, false).len();
        ModelParams {
            config: self.config.clone(),
            dual_head: false,
            specs: self.specs[..keep].to_vec(),
            tensors: self.tensors[..keep].to_vec(),
        }
    }
}

/// He-style fan-in scaled uniform initialization, `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`; biases start at zero. The uncertainty head draws
/// from its own stream so the shared parameters do not depend on whether
/// it exists.
pub fn build(config: &ModelConfig, seed: u64, dual_head: bool) -> Result<ModelParams> {
    config.validate()?;
    let specs = param_specs(config, dual_head);
    let mut shared_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e_635f_6865_6164);
    let tensors = specs
        .iter()
        .map(|s| {
            if s.is_bias {
                return Tensor::zeros(s.shape);
            }
            let bound = (6.0 / s.fan_in as f64).sqrt() as f32;
            let rng = if s.name.starts_with("unc_head") {
                &mut head_rng
            } else {
                &mut shared_rng
            };
            let data = (0..s.shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_vec(s.shape, data).expect("spec shape")
        })
        .collect();
    ModelParams::from_parts(config.clone(), dual_head, tensors)
}

/// Nodes produced by [`record_forward`].
pub struct ForwardNodes {
    pub probs: NodeId,
    pub uncertainty: Option<NodeId>,
}

/// Records the network on `graph`. `params` must follow [`param_specs`].
pub fn record_forward<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    dual_head: bool,
    params: &[NodeId],
    input: NodeId,
) -> Result<ForwardNodes> {
    let expected = param_specs(config, dual_head).len();
    if params.len() != expected {
        return Err(Error::shape("forward parameters", &[expected], &[params.len()]));
    }
    let shape = graph.value(input).shape();
    let factor = config.downsample_factor();
    if shape.c() != 3 || shape.h() % factor != 0 || shape.w() % factor != 0 || shape.h() == 0 || shape.w() == 0 {
        return Err(Error::Shape {
            op: "forward (input must be B x 3 x H x W with H, W divisible by the downsampling factor)",
            left: shape.dims().to_vec(),
            right: vec![factor],
        });
    }
    let pad = config.kernel / 2;
    // Pixels in [0, 1] are shifted to be centred on zero.
    let half = graph.constant(Tensor::full(shape, T::from_f64_lossy(0.5)));
    let mut x = graph.sub(input, half)?;
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("param count checked");
    for _ in 0..config.stages() {
        let (w, b) = (next(), next());
        let y = graph.conv2d(x, w, b, 1, pad)?;
        let y = graph.relu(y)?;
        x = graph.maxpool2(y)?;
    }
    for _ in 0..config.stages() {
        let (w, b) = (next(), next());
        let y = graph.upsample_bilinear2x(x)?;
        let y = graph.conv2d(y, w, b, 1, pad)?;
        x = graph.relu(y)?;
    }
    let (w, b) = (next(), next());
    let logits = graph.conv2d(x, w, b, 1, 0)?;
    let probs = graph.softmax_channels(logits)?;
    let uncertainty = if dual_head {
        let (w, b) = (next(), next());
        let raw = graph.conv2d(x, w, b, 1, 0)?;
        Some(graph.sigmoid(raw)?)
    } else {
        None
    };
    Ok(ForwardNodes { probs, uncertainty })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `B x C x H x W` class probabilities.
    pub probs: Tensor<f32>,
    /// `B x 1 x H x W` uncertainty estimates, dual-head models only.
    pub uncertainty: Option<Tensor<f32>>,
}

pub fn forward(params: &ModelParams, images: &Tensor<f32>) -> Result<ModelOutput> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let input = g.constant(images.clone());
    let out = record_forward(&mut g, &params.config, params.dual_head, &ids, input)?;
    Ok(ModelOutput {
        probs: g.value(out.probs).clone(),
        uncertainty: out.uncertainty.map(|u| g.value(u).clone()),
    })
}

/// Total trainable parameters and the share added by the uncertainty head.
pub fn param_count(params: &ModelParams) -> (usize, usize) {
    let total = params.tensors.iter().map(Tensor::len).sum();
    let overhead = params
        .specs
        .iter()
        .zip(&params.tensors)
        .filter(|(s, _)| s.name.starts_with("unc_head"))
        .map(|(_, t)| t.len())
        .sum();
    (total, overhead)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            classes: 4,
            encoder_widths: vec![4, 6, 8],
            decoder_width: 8,
            kernel: 3,
            input_size: 16,
        }
    }

    fn image(seed: u64, n: usize, size: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let c = small_config();
        assert_eq!(build(&c, 7, true).unwrap(), build(&c, 7, true).unwrap());
        let a = build(&c, 7, false).unwrap();
        let b = build(&c, 8, false).unwrap();
        assert!(a.tensors().iter().zip(b.tensors()).any(|(x, y)| x != y));
    }

    #[test]
    fn baseline_has_no_uncertainty_head() {
        let p = build(&small_config(), 1, false).unwrap();
        assert!(p.specs().iter().all(|s| !s.name.starts_with("unc_head")));
        assert_eq!(param_count(&p).1, 0);
    }

    #[test]
    fn groups_partition_parameters() {
        let p = build(&small_config(), 1, true).unwrap();
        for s in p.specs() {
            let expect = if s.name.starts_with("enc") {
                ParamGroup::Backbone
            } else {
                ParamGroup::Decoder
            };
            assert_eq!(s.group, expect, "{}", s.name);
        }
    }

    #[test]
    fn zeroed_output_layers_give_uniform_and_half() {
        let mut p = build(&small_config(), 3, true).unwrap();
        for name in ["seg_head.weight", "seg_head.bias", "unc_head.weight", "unc_head.bias"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = forward(&p, &image(1, 2, 16)).unwrap();
        assert!(out.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(out.uncertainty.unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_sum_to_one_and_extent_is_preserved() {
        let p = build(&small_config(), 11, true).unwrap();
        let out = forward(&p, &image(2, 1, 24)).unwrap();
        assert_eq!(out.probs.shape(), Shape::new(1, 4, 24, 24));
        let plane = 24 * 24;
        for px in 0..plane {
            let s: f32 = (0..4).map(|c| out.probs.data()[c * plane + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let u = out.uncertainty.unwrap();
        assert!(u.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn identical_images_in_a_batch_give_identical_slices() {
        let p = build(&small_config(), 5, true).unwrap();
        let one = image(9, 1, 16);
        let two = Tensor::stack(&[one.clone(), one]).unwrap();
        let out = forward(&p, &two).unwrap();
        assert_eq!(out.probs.batch_item(0), out.probs.batch_item(1));
    }

    #[test]
    fn indivisible_extent_rejected() {
        let p = build(&small_config(), 5, false).unwrap();
        assert!(forward(&p, &image(1, 1, 12)).is_err());
    }

    #[test]
    fn uncertainty_head_leaves_segmentation_untouched() {
        let c = small_config();
        let img = image(4, 2, 16);
        let with = forward(&build(&c, 21, true).unwrap(), &img).unwrap();
        let without = forward(&build(&c, 21, false).unwrap(), &img).unwrap();
        assert_eq!(with.probs, without.probs);
    }

    #[test]
    fn overhead_for_paper_scale_and_default_widths() {
        let mut c = ModelConfig::default();
        assert_eq!(param_count(&build(&c, 0, true).unwrap()).1, 33);
        c.decoder_width = 256;
        assert_eq!(param_count(&build(&c, 0, true).unwrap()).1, 257);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn overhead_is_decoder_width_plus_one(
            classes in 2usize..12,
            widths in proptest::collection::vec(1usize..12, 1..4),
            d in 1usize..64,
        ) {
            let c = ModelConfig { classes, encoder_widths: widths, decoder_width: d, kernel: 3, input_size: 32 };
            let dual = build(&c, 1, true).unwrap();
            let base = build(&c, 1, false).unwrap();
            let (total, overhead) = param_count(&dual);
            prop_assert_eq!(overhead, d + 1);
            prop_assert_eq!(total - param_count(&base).0, d + 1);
        }
    }
}
