use super::{Param, Tensor};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
enum Cache {
    Train { xhat: Vec<f32>, inv_std: Vec<f32> },
    Eval { inv_std: Vec<f32> },
}

/// Per-channel batch normalization over `(n, d, h, w)`.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; evaluation mode uses the running estimates only, which makes
/// every sample's output independent of the rest of the batch.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    cache: Option<Cache>,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        assert_eq!(x.channels(), self.channels, "batch norm channel mismatch");
        let n = x.n();
        let s = x.spatial_len();
        let c = self.channels;
        if !train {
            let inv_std: Vec<f32> = self.running_var.value.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
            for b in 0..n {
                for ch in 0..c {
                    let scale = self.gamma.value[ch] * inv_std[ch];
                    let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                    let off = (b * c + ch) * s;
                    x.data[off..off + s].iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
            self.cache = Some(Cache::Eval { inv_std });
            return x;
        }

        let m = (n * s) as f64;
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_stds = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * s;
                for &v in &x.data[off..off + s] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + EPS as f64).sqrt();
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean.value[ch] = (1.0 - MOMENTUM) * self.running_mean.value[ch] + MOMENTUM * mean as f32;
            self.running_var.value[ch] = (1.0 - MOMENTUM) * self.running_var.value[ch] + MOMENTUM * unbiased as f32;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    let xh = ((x.data[i] as f64 - mean) * inv_std) as f32;
                    xhat[i] = xh;
                    x.data[i] = g * xh + bt;
                }
            }
            inv_stds.push(inv_std as f32);
        }
        self.cache = Some(Cache::Train {
            xhat,
            inv_std: inv_stds,
        });
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let n = grad.n();
        let s = grad.spatial_len();
        let c = self.channels;
        match self.cache.take().expect("batch norm backward without forward") {
            Cache::Eval { inv_std } => {
                // Input gradient only; evaluation-mode passes never update
                // parameters.
                for ch in 0..c {
                    let scale = self.gamma.value[ch] * inv_std[ch];
                    for b in 0..n {
                        let off = (b * c + ch) * s;
                        grad.data[off..off + s].iter_mut().for_each(|g| *g *= scale);
                    }
                }
                grad
            }
            Cache::Train { xhat, inv_std } => {
                let m = (n * s) as f64;
                for ch in 0..c {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            sum_dy += grad.data[i] as f64;
                            sum_dy_xhat += grad.data[i] as f64 * xhat[i] as f64;
                        }
                    }
                    self.gamma.grad[ch] += sum_dy_xhat as f32;
                    self.beta.grad[ch] += sum_dy as f32;
                    let k = self.gamma.value[ch] as f64 * inv_std[ch] as f64 / m;
                    for b in 0..n {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            let dy = grad.data[i] as f64;
                            grad.data[i] = (k * (m * dy - sum_dy - xhat[i] as f64 * sum_dy_xhat)) as f32;
                        }
                    }
                }
                grad
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
