use super::Tensor;

/// Non-overlapping average pooling with a cubic window; trailing voxels that
/// do not fill a window are dropped.
#[derive(Debug, Clone)]
pub struct AvgPool3d {
    size: usize,
    input_shape: Option<[usize; 5]>,
}

impl AvgPool3d {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        Self {
            size,
            input_shape: None,
        }
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let out = avg_pool(&x, self.size);
        self.input_shape = Some(x.shape);
        out
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("avg pool backward without forward");
        let k = self.size;
        let [_, _, d, h, w] = shape;
        let [od, oh, ow] = grad.spatial();
        let scale = 1.0 / (k * k * k) as f32;
        let mut dx = Tensor::zeros(shape);
        let planes = shape[0] * shape[1];
        for p in 0..planes {
            let src = &grad.data[p * od * oh * ow..(p + 1) * od * oh * ow];
            let dst = &mut dx.data[p * d * h * w..(p + 1) * d * h * w];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = src[(oz * oh + oy) * ow + ox] * scale;
                        for z in oz * k..oz * k + k {
                            for y in oy * k..oy * k + k {
                                let row = (z * h + y) * w;
                                dst[row + ox * k..row + ox * k + k].iter_mut().for_each(|v| *v = g);
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Forward-only average pooling, also used to downsample network inputs.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let [n, c, d, h, w] = x.shape;
    let (od, oh, ow) = (d / k, h / k, w / k);
    assert!(od > 0 && oh > 0 && ow > 0, "pooling window larger than input");
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let scale = 1.0 / (k * k * k) as f32;
    for p in 0..n * c {
        let src = &x.data[p * d * h * w..(p + 1) * d * h * w];
        let dst = &mut out.data[p * od * oh * ow..(p + 1) * od * oh * ow];
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for z in oz * k..oz * k + k {
                        for y in oy * k..oy * k + k {
                            let row = (z * h + y) * w;
                            acc += src[row + ox * k..row + ox * k + k].iter().sum::<f32>();
                        }
                    }
                    dst[(oz * oh + oy) * ow + ox] = acc * scale;
                }
            }
        }
    }
    out
}

/// Overlapping max pooling with padding (padded cells never win).
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    size: usize,
    stride: usize,
    pad: usize,
    cache: Option<([usize; 5], Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new(size: usize, stride: usize, pad: usize) -> Self {
        Self {
            size,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let [n, c, d, h, w] = x.shape;
        let o = [d, h, w].map(|l| (l + 2 * self.pad - self.size) / self.stride + 1);
        let mut out = Tensor::zeros([n, c, o[0], o[1], o[2]]);
        let mut argmax = vec![0usize; out.data.len()];
        let range = |o: usize, len: usize| {
            let start = (o * self.stride) as isize - self.pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + self.size as isize) as usize).min(len);
            lo..hi
        };
        for p in 0..n * c {
            let base = p * d * h * w;
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = base;
                        for z in range(oz, d) {
                            for y in range(oy, h) {
                                for xx in range(ox, w) {
                                    let i = base + (z * h + y) * w + xx;
                                    if x.data[i] > best {
                                        best = x.data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let oi = ((p * o[0] + oz) * o[1] + oy) * o[2] + ox;
                        out.data[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        self.cache = Some((x.shape, argmax));
        out
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (shape, argmax) = self.cache.take().expect("max pool backward without forward");
        let mut dx = Tensor::zeros(shape);
        for (g, &i) in grad.data.iter().zip(&argmax) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Mean over all spatial positions, producing `[n, c, 1, 1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 5]>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let [n, c, ..] = x.shape;
        let s = x.spatial_len();
        let data = x
            .data
            .chunks(s)
            .map(|plane| plane.iter().sum::<f32>() / s as f32)
            .collect();
        self.input_shape = Some(x.shape);
        Tensor::from_vec([n, c, 1, 1, 1], data)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("global pool backward without forward");
        let s: usize = shape[2..].iter().product();
        let mut dx = Tensor::zeros(shape);
        for (plane, &g) in dx.data.chunks_mut(s).zip(&grad.data) {
            plane.fill(g / s as f32);
        }
        dx
    }
}
