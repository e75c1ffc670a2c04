//! Siamese 3D encoder with a feature-difference, bias-free linear head.
//!
//! One parameter set encodes both images of a pair. The logit is
//! `w · (encode(second) - encode(first))`, so identical inputs give exactly
//! zero and swapping the pair negates the logit. A positive logit means the
//! pair is presented in the correct temporal order.

mod checkpoint;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::OrderedPair;
use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, ActivationLayer, AvgPool3d, BasicBlock, BatchNorm3d, Conv3d, GlobalAvgPool, Layer, MaxPool3d,
    Param, Tensor,
};
use crate::volume::{Dims, VolumeGrid};

const SMALL_CNN_CHANNELS: [usize; 4] = [16, 32, 64, 16];
const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SmallCnn,
    #[serde(rename = "resnet18_3d")]
    Resnet18_3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Dimensions of the volumes handed to the model.
    pub input_dims: Dims,
    /// Average-pooling factor applied after intensity normalization, before
    /// the first convolution.
    pub input_pool: usize,
    /// Channel width of the first residual stage (`resnet18_3d` only).
    pub resnet_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::SmallCnn,
            input_dims: [64, 64, 64],
            input_pool: 2,
            resnet_width: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Grid seen by the first convolution.
    pub fn encoder_input_dims(&self) -> Dims {
        self.input_dims.map(|d| d / self.input_pool.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_pool == 0 {
            return Err(Error::Config("input_pool must be >= 1".into()));
        }
        let enc = self.encoder_input_dims();
        let min = match self.encoder {
            EncoderKind::SmallCnn => 16,
            EncoderKind::Resnet18_3d => 4,
        };
        if enc.iter().any(|&d| d < min) {
            return Err(Error::Config(format!(
                "input_dims {:?} with input_pool {} leave {:?}, below the {min}-voxel minimum for {:?}",
                self.input_dims, self.input_pool, enc, self.encoder
            )));
        }
        if self.encoder == EncoderKind::Resnet18_3d && self.resnet_width == 0 {
            return Err(Error::Config("resnet_width must be >= 1".into()));
        }
        if self.feature_dim() == 0 {
            return Err(Error::Config("encoder produces no features".into()));
        }
        Ok(())
    }

    /// Width of the encoder output fed to the difference head.
    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::SmallCnn => {
                let spatial: usize = self
                    .encoder_input_dims()
                    .iter()
                    .map(|&d| {
                        let mut d = d;
                        for _ in 0..SMALL_CNN_CHANNELS.len() {
                            d /= 2;
                        }
                        d
                    })
                    .product();
                SMALL_CNN_CHANNELS[3] * spatial
            }
            EncoderKind::Resnet18_3d => 8 * self.resnet_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogit {
    pub logit: f64,
    pub probability: f64,
}

impl PairLogit {
    pub fn new(logit: f64) -> Self {
        Self {
            logit,
            probability: nn::sigmoid(logit),
        }
    }

    /// `true` when the model calls the presented order correct.
    pub fn predicts_forward(&self) -> bool {
        self.logit > 0.0
    }
}

/// Which image of a pair an attribution refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    First,
    Second,
}

/// Binary cross-entropy with soft targets on a logit:
/// `-[y·ln σ(z) + (1-y)·ln σ(-z)]`.
pub fn loss(logit: f64, label: f64) -> Result<f64> {
    check_label(label)?;
    if !logit.is_finite() {
        return Err(Error::NonFinite(format!("logit {logit}")));
    }
    Ok(label * nn::softplus(-logit) + (1.0 - label) * nn::softplus(logit))
}

/// Derivative of [`loss`] with respect to the logit.
pub fn loss_grad(logit: f64, label: f64) -> f64 {
    nn::sigmoid(logit) - label
}

fn check_label(label: f64) -> Result<()> {
    if label == 0.0 || label == 0.5 || label == 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("label {label} not in {{0, 0.5, 1}}")))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<Layer>,
    /// Index of the layer whose output is the final convolutional activation.
    cam_layer: usize,
}

impl Encoder {
    fn build(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        match config.encoder {
            EncoderKind::SmallCnn => Self::small_cnn(rng),
            EncoderKind::Resnet18_3d => Self::resnet18(config.resnet_width, rng),
        }
    }

    fn small_cnn(rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &cout) in SMALL_CNN_CHANNELS.iter().enumerate() {
            layers.push(Layer::Conv(Conv3d::new(
                &format!("enc.{i}.conv"),
                cin,
                cout,
                3,
                1,
                1,
                rng,
            )));
            layers.push(Layer::BatchNorm(BatchNorm3d::new(&format!("enc.{i}.bn"), cout)));
            layers.push(Layer::Act(ActivationLayer::new(Activation::LeakyRelu(LEAKY_SLOPE))));
            layers.push(Layer::AvgPool(AvgPool3d::new(2)));
            cin = cout;
        }
        let cam_layer = layers.len() - 2;
        layers.push(Layer::Flatten { input_shape: None });
        Self { layers, cam_layer }
    }

    fn resnet18(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = vec![
            Layer::Conv(Conv3d::new("enc.stem.conv", 1, width, 7, 2, 3, rng)),
            Layer::BatchNorm(BatchNorm3d::new("enc.stem.bn", width)),
            Layer::Act(ActivationLayer::new(Activation::Relu)),
            Layer::MaxPool(MaxPool3d::new(3, 2, 1)),
        ];
        let mut cin = width;
        for stage in 0..4 {
            let cout = width << stage;
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                layers.push(Layer::Residual(Box::new(BasicBlock::new(
                    &format!("enc.layer{}.{block}", stage + 1),
                    cin,
                    cout,
                    stride,
                    rng,
                ))));
                cin = cout;
            }
        }
        let cam_layer = layers.len() - 1;
        layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
        layers.push(Layer::Flatten { input_shape: None });
        Self { layers, cam_layer }
    }

    fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        for layer in &mut self.layers {
            x = layer.forward(x, train);
        }
        x
    }

    /// Forward pass that also returns the final convolutional activation.
    fn forward_tapped(&mut self, mut x: Tensor) -> (Tensor, Tensor) {
        let mut tap = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = layer.forward(x, false);
            if i == self.cam_layer {
                tap = Some(x.clone());
            }
        }
        (x, tap.expect("cam layer inside encoder"))
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad);
        }
        grad
    }

    /// Backpropagates only as far as the final convolutional activation.
    fn backward_to_tap(&mut self, mut grad: Tensor) -> Tensor {
        for layer in self.layers[self.cam_layer + 1..].iter_mut().rev() {
            grad = layer.backward(grad);
        }
        grad
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }
}

/// Activation and logit gradient at the final convolutional layer for one
/// image of a pair.
#[derive(Debug, Clone)]
pub struct CamTap {
    pub activation: Tensor,
    pub gradient: Tensor,
}

#[derive(Debug, Clone)]
pub struct SiameseModel {
    config: ModelConfig,
    encoder: Encoder,
    head: Param,
}

impl SiameseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::build(&config, &mut rng);
        let f = config.feature_dim();
        let head = Param::uniform_fan_in("head.weight", vec![f], f, &mut rng);
        Ok(Self { config, encoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_weights(&self) -> &[f32] {
        &self.head.value
    }

    pub fn head_weights_mut(&mut self) -> &mut [f32] {
        &mut self.head.value
    }

    pub fn head_grad(&self) -> &[f32] {
        &self.head.grad
    }

    pub fn has_conv_layer(&self) -> bool {
        self.encoder.layers.iter().any(Layer::is_convolutional)
    }

    /// Min-max intensity normalization to [0, 1], then average pooling by
    /// `input_pool`. Output shape `[1, 1, d, h, w]`.
    pub fn prepare(&self, image: &VolumeGrid) -> Result<Tensor> {
        image.check_dims(self.config.input_dims)?;
        let scaled = image.min_max_scaled();
        let [dx, dy, dz] = image.dims();
        // VolumeGrid is x-fastest, tensors are w-fastest: map (z, y, x) -> (d, h, w).
        let t = Tensor::from_vec([1, 1, dz, dy, dx], scaled.into_values());
        let k = self.config.input_pool;
        Ok(if k > 1 { nn::avg_pool(&t, k) } else { t })
    }

    /// Feature vector of one image in inference mode.
    pub fn encode(&mut self, image: &VolumeGrid) -> Result<Vec<f32>> {
        let x = self.prepare(image)?;
        let feats = self.encoder.forward(x, false);
        if !feats.is_finite() {
            return Err(Error::NonFinite("encoder features".into()));
        }
        Ok(feats.data)
    }

    /// Inference-mode features for already prepared inputs, one vector per
    /// input. Batch normalization uses running statistics, so batching does
    /// not change any result.
    pub fn encode_prepared(&mut self, inputs: &[Tensor]) -> Result<Vec<Vec<f32>>> {
        let f = self.config.feature_dim();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(8) {
            let feats = self.encoder.forward(Tensor::stack(chunk), false);
            if !feats.is_finite() {
                return Err(Error::NonFinite("encoder features".into()));
            }
            out.extend(feats.data.chunks_exact(f).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Logit from two feature vectors. The difference is formed before the
    /// dot product so swapping the inputs negates every term exactly.
    pub fn logit_from_features(&self, first: &[f32], second: &[f32]) -> f64 {
        self.head
            .value
            .iter()
            .zip(second.iter().zip(first))
            .map(|(&w, (&b, &a))| w as f64 * (b - a) as f64)
            .sum()
    }

    pub fn forward_images(&mut self, first: &VolumeGrid, second: &VolumeGrid) -> Result<PairLogit> {
        let fa = self.encode(first)?;
        let fb = self.encode(second)?;
        Ok(PairLogit::new(self.logit_from_features(&fa, &fb)))
    }

    pub fn forward(&mut self, pair: &OrderedPair) -> Result<PairLogit> {
        self.forward_images(&pair.first.image, &pair.second.image)
    }

    /// Training-mode pass over a batch of prepared images and the pairs
    /// indexing into it. Accumulates gradients into every trainable
    /// parameter and returns the mean loss over pairs.
    pub fn accumulate_gradients(&mut self, inputs: &[Tensor], pairs: &[(usize, usize, f64)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let x = Tensor::stack(inputs);
        let feats = self.encoder.forward(x, true);
        let f = self.config.feature_dim();
        let mut dfeat = Tensor::zeros(feats.shape);
        let scale = 1.0 / pairs.len() as f64;
        let mut total = 0.0;
        for &(a, b, label) in pairs {
            let fa = &feats.data[a * f..(a + 1) * f];
            let fb = &feats.data[b * f..(b + 1) * f];
            let logit = self.logit_from_features(fa, fb);
            total += loss(logit, label)?;
            let g = loss_grad(logit, label) * scale;
            for i in 0..f {
                self.head.grad[i] += (g * (fb[i] - fa[i]) as f64) as f32;
                let wg = (g * self.head.value[i] as f64) as f32;
                dfeat.data[b * f + i] += wg;
                dfeat.data[a * f + i] -= wg;
            }
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {mean}")));
        }
        self.encoder.backward(dfeat);
        Ok(mean)
    }

    /// Final convolutional activation of `image` and the gradient of the pair
    /// logit with respect to it, with `image` sitting on `side` of the pair.
    /// The logit is linear in each side's features, so the other image does
    /// not enter the gradient.
    pub fn cam_tap(&mut self, image: &VolumeGrid, side: Side) -> Result<CamTap> {
        if !self.has_conv_layer() {
            return Err(Error::Config("model has no convolutional layer".into()));
        }
        let x = self.prepare(image)?;
        let (feats, activation) = self.encoder.forward_tapped(x);
        let sign = match side {
            Side::Second => 1.0,
            Side::First => -1.0,
        };
        let dfeat = Tensor::from_vec(feats.shape, self.head.value.iter().map(|&w| sign * w).collect());
        let gradient = self.encoder.backward_to_tap(dfeat);
        Ok(CamTap { activation, gradient })
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Visits encoder parameters then the head, in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        f(&mut self.head);
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dims: [16, 16, 16],
            input_pool: 1,
            ..ModelConfig::default()
        }
    }

    fn random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> VolumeGrid {
        let n = dims.iter().product();
        VolumeGrid::new(dims, [1.0; 3], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn loss_values() {
        let ln2 = 2f64.ln();
        assert!((loss(0.0, 0.5).unwrap() - ln2).abs() < 1e-12);
        assert!((loss(0.0, 1.0).unwrap() - ln2).abs() < 1e-12);
        assert!(loss(f64::NAN, 1.0).is_err());
        assert!(loss(1.0, 0.3).is_err());
        assert!(loss(-50.0, 0.0).unwrap() < 1e-20);
    }

    #[test]
    fn soft_label_loss_minimized_at_zero() {
        let grid: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| loss(*a, 0.5).unwrap().total_cmp(&loss(*b, 0.5).unwrap()))
            .unwrap();
        assert!(best.abs() < 1e-9);
    }

    #[test]
    fn feature_dim_matches_encoder_output() {
        for cfg in [
            small_config(),
            ModelConfig::default(),
            ModelConfig {
                encoder: EncoderKind::Resnet18_3d,
                input_dims: [16, 16, 16],
                input_pool: 1,
                resnet_width: 4,
                ..ModelConfig::default()
            },
        ] {
            let mut m = SiameseModel::new(cfg.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let v = random_volume(cfg.input_dims, &mut rng);
            assert_eq!(m.encode(&v).unwrap().len(), cfg.feature_dim());
        }
    }

    #[test]
    fn identical_inputs_give_zero_and_swap_negates() {
        let mut m = SiameseModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_volume([16; 3], &mut rng);
        let b = random_volume([16; 3], &mut rng);
        assert_eq!(m.forward_images(&a, &a).unwrap().logit, 0.0);
        let ab = m.forward_images(&a, &b).unwrap().logit;
        let ba = m.forward_images(&b, &a).unwrap().logit;
        assert_eq!(ab, -ba);
    }

    #[test]
    fn all_zero_input_is_finite() {
        let mut m = SiameseModel::new(small_config()).unwrap();
        let z = VolumeGrid::zeros([16; 3], [1.0; 3]);
        assert!(m.encode(&z).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut m = SiameseModel::new(small_config()).unwrap();
        let z = VolumeGrid::zeros([8; 3], [1.0; 3]);
        assert!(matches!(m.encode(&z), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn too_small_input_is_a_config_error() {
        let cfg = ModelConfig {
            input_dims: [16, 16, 16],
            input_pool: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(SiameseModel::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cam_tap_shapes() {
        let mut m = SiameseModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_volume([16; 3], &mut rng);
        let tap = m.cam_tap(&a, Side::Second).unwrap();
        assert_eq!(tap.activation.shape, [1, 16, 2, 2, 2]);
        assert_eq!(tap.gradient.shape, tap.activation.shape);
        let neg = m.cam_tap(&a, Side::First).unwrap();
        for (x, y) in tap.gradient.data.iter().zip(&neg.gradient.data) {
            assert_eq!(*x, -*y);
        }
    }
}
