//! Minimal 3D convolutional building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! layer must see exactly one `forward` before each `backward`. Tensors are
//! batched `[n, c, d, h, w]` in row-major order with `w` fastest.

mod conv;
mod norm;
mod optim;
mod pool;

pub use conv::Conv3d;
pub use norm::BatchNorm3d;
pub use optim::Adam;
pub use pool::{avg_pool, AvgPool3d, GlobalAvgPool, MaxPool3d};

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/buffer mismatch"
        );
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.spatial_len()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let mut shape = items[0].shape;
        assert!(items.iter().all(|t| t.shape[1..] == shape[1..] && t.shape[0] == 1));
        shape[0] = items.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Tensor { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named parameter tensor. Non-trainable entries (normalization running
/// statistics) travel with checkpoints but are skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let mut p = Self::new(name, shape, value);
        p.trainable = false;
        p.grad = Vec::new();
        p
    }

    /// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform_fan_in(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
}

impl Activation {
    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    v * s
                }
            }
        }
    }

    #[inline]
    fn slope(self, input: f32) -> f32 {
        match self {
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if input > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActivationLayer {
    kind: Activation,
    input: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(kind: Activation) -> Self {
        Self { kind, input: None }
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = self.kind.apply(*v));
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let input = self.input.take().expect("activation backward without forward");
        for (g, &x) in grad.data.iter_mut().zip(&input.data) {
            *g *= self.kind.slope(x);
        }
        grad
    }
}

/// Residual unit of two 3×3×3 convolutions with an optional projection
/// shortcut when the stride or width changes.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    act1: ActivationLayer,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    shortcut: Option<(Conv3d, BatchNorm3d)>,
    act_out: ActivationLayer,
}

impl BasicBlock {
    pub fn new(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv3d::new(&format!("{prefix}.down.conv"), cin, cout, 1, stride, 0, rng),
                BatchNorm3d::new(&format!("{prefix}.down.bn"), cout),
            )
        });
        Self {
            conv1: Conv3d::new(&format!("{prefix}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm3d::new(&format!("{prefix}.bn1"), cout),
            act1: ActivationLayer::new(Activation::Relu),
            conv2: Conv3d::new(&format!("{prefix}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm3d::new(&format!("{prefix}.bn2"), cout),
            shortcut,
            act_out: ActivationLayer::new(Activation::Relu),
        }
    }

    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward(conv.forward(x.clone()), train),
            None => x.clone(),
        };
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(h, train);
        let h = self.act1.forward(h);
        let h = self.conv2.forward(h);
        let mut h = self.bn2.forward(h, train);
        for (a, b) in h.data.iter_mut().zip(&skip.data) {
            *a += b;
        }
        self.act_out.forward(h)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.act_out.backward(grad);
        let skip_grad = match &mut self.shortcut {
            Some((conv, bn)) => conv.backward(bn.backward(g.clone())),
            None => g.clone(),
        };
        let h = self.bn2.backward(g);
        let h = self.conv2.backward(h);
        let h = self.act1.backward(h);
        let h = self.bn1.backward(h);
        let mut dx = self.conv1.backward(h);
        for (a, b) in dx.data.iter_mut().zip(&skip_grad.data) {
            *a += b;
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv3d),
    BatchNorm(BatchNorm3d),
    Act(ActivationLayer),
    AvgPool(AvgPool3d),
    MaxPool(MaxPool3d),
    GlobalAvgPool(GlobalAvgPool),
    Residual(Box<BasicBlock>),
    /// Reshape `[n, c, d, h, w]` to `[n, c·d·h·w, 1, 1, 1]`.
    Flatten {
        input_shape: Option<[usize; 5]>,
    },
}

impl Layer {
    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Act(l) => l.forward(x),
            Layer::AvgPool(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Residual(b) => b.forward(x, train),
            Layer::Flatten { input_shape } => {
                *input_shape = Some(x.shape);
                let n = x.n();
                let f = x.sample_len();
                Tensor::from_vec([n, f, 1, 1, 1], x.data)
            }
        }
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Act(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Residual(b) => b.backward(grad),
            Layer::Flatten { input_shape } => {
                let shape = input_shape.take().expect("flatten backward without forward");
                Tensor::from_vec(shape, grad.data)
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(l) => l.visit_params(f),
            Layer::BatchNorm(l) => l.visit_params(f),
            Layer::Residual(b) => b.visit_params(f),
            _ => {}
        }
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Residual(_))
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sum of `grad_out · layer(x)` as a scalar objective for finite differences.
    fn objective(layer: &mut Layer, x: &Tensor, weights: &[f32], train: bool) -> f64 {
        let y = layer.forward(x.clone(), train);
        y.data.iter().zip(weights).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares the analytic input gradient with central differences.
    fn check_input_grad(mut layer: Layer, shape: [usize; 5], train: bool, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(shape, &mut rng);
        let y = layer.forward(x.clone(), train);
        let w: Vec<f32> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = layer.backward(Tensor::from_vec(y.shape, w.clone()));
        let h = 1e-2f32;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&mut layer, &xp, &w, train) - objective(&mut layer, &xm, &w, train)) / (2.0 * h as f64);
            let an = dx.data[i] as f64;
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "index {i}: finite difference {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_input_grad(
            Layer::Conv(Conv3d::new("c", 2, 3, 3, 1, 1, &mut rng)),
            [2, 2, 5, 4, 6],
            true,
            2e-2,
        );
        check_input_grad(
            Layer::Conv(Conv3d::new("c", 2, 3, 3, 2, 1, &mut rng)),
            [1, 2, 5, 6, 7],
            true,
            2e-2,
        );
    }

    #[test]
    fn batchnorm_input_gradient_train_and_eval() {
        check_input_grad(Layer::BatchNorm(BatchNorm3d::new("bn", 3)), [3, 3, 2, 3, 2], true, 3e-2);
        check_input_grad(
            Layer::BatchNorm(BatchNorm3d::new("bn", 3)),
            [2, 3, 2, 3, 2],
            false,
            1e-2,
        );
    }

    #[test]
    fn pooling_input_gradient() {
        check_input_grad(Layer::AvgPool(AvgPool3d::new(2)), [2, 2, 4, 4, 6], true, 1e-2);
        check_input_grad(
            Layer::GlobalAvgPool(GlobalAvgPool::default()),
            [2, 3, 3, 2, 2],
            true,
            1e-2,
        );
        check_input_grad(Layer::MaxPool(MaxPool3d::new(3, 2, 1)), [1, 2, 5, 5, 4], true, 1e-2);
    }

    #[test]
    fn residual_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_input_grad(
            Layer::Residual(Box::new(BasicBlock::new("b", 2, 4, 2, &mut rng))),
            [2, 2, 4, 4, 4],
            false,
            3e-2,
        );
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv3d::new("c", 2, 2, 3, 1, 1, &mut rng);
        let x = random_tensor([2, 2, 3, 4, 3], &mut rng);
        let y = conv.forward(x.clone());
        let w: Vec<f32> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        conv.backward(Tensor::from_vec(y.shape, w.clone()));
        let mut analytic = Vec::new();
        conv.visit_params(&mut |p| analytic.push(p.grad.clone()));
        let h = 1e-2f32;
        for i in 0..analytic[0].len() {
            let eval = |delta: f32, conv: &mut Conv3d| {
                conv.visit_params(&mut |p| p.value[i] += delta);
                let y = conv.forward(x.clone());
                conv.visit_params(&mut |p| p.value[i] -= delta);
                y.data.iter().zip(&w).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            };
            let fd = (eval(h, &mut conv) - eval(-h, &mut conv)) / (2.0 * h as f64);
            let an = analytic[0][i] as f64;
            assert!((fd - an).abs() <= 1e-2 * (1.0 + fd.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
