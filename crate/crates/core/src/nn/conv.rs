use rand::Rng;

use super::{Param, Tensor};

/// Cubic-kernel 3D convolution without bias (every use is followed by
/// batch normalization). Implemented as im2col followed by a single sgemm per
/// sample.
#[derive(Debug, Clone)]
pub struct Conv3d {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    input: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }
}

fn out_len(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "convolution kernel larger than padded input");
    (n + 2 * p - k) / s + 1
}

/// Input index for output position `o` and kernel tap `k`, if in bounds.
#[inline]
fn src_index(o: usize, k: usize, g: &Geometry, axis_len: usize) -> Option<usize> {
    let i = (o * g.stride + k) as isize - g.pad as isize;
    (i >= 0 && (i as usize) < axis_len).then_some(i as usize)
}

/// Range of output x positions whose source index `ox*stride + kx - pad` is in
/// bounds, for unit stride.
#[inline]
fn valid_x_range(kx: usize, g: &Geometry) -> (usize, usize) {
    let w = g.input[2];
    let ow = g.output[2];
    let lo = g.pad.saturating_sub(kx);
    let hi = (w + g.pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst_row = &mut col[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, kz, g, d) else {
                            dst_row[oz * oh * ow..(oz + 1) * oh * ow].fill(0.0);
                            continue;
                        };
                        for oy in 0..oh {
                            let dst = &mut dst_row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let Some(iy) = src_index(oy, ky, g, h) else {
                                dst.fill(0.0);
                                continue;
                            };
                            let src = &plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            if g.stride == 1 {
                                let (lo, hi) = valid_x_range(kx, g);
                                dst[..lo].fill(0.0);
                                let s0 = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                                dst[hi..].fill(0.0);
                            } else {
                                for (ox, v) in dst.iter_mut().enumerate() {
                                    *v = src_index(ox, kx, g, w).map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &Geometry, x: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let ncols = g.cols();
    x.fill(0.0);
    for ci in 0..g.cin {
        let plane = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src_row = &col[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, kz, g, d) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = src_index(oy, ky, g, h) else {
                                continue;
                            };
                            let src = &src_row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            if g.stride == 1 {
                                let (lo, hi) = valid_x_range(kx, g);
                                let s0 = lo + kx - g.pad;
                                for (a, b) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *a += b;
                                }
                            } else {
                                for (ox, &v) in src.iter().enumerate() {
                                    if let Some(ix) = src_index(ox, kx, g, w) {
                                        dst[ix] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides; callers pass buffers sized exactly for them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::uniform_fan_in(
                format!("{name}.weight"),
                vec![cout, cin, kernel, kernel, kernel],
                fan_in,
                rng,
            ),
            input: None,
        }
    }

    fn geometry(&self, input: [usize; 3]) -> Geometry {
        Geometry {
            cin: self.cin,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            input,
            output: input.map(|n| out_len(n, self.kernel, self.stride, self.pad)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        assert_eq!(x.channels(), self.cin, "conv input channel mismatch");
        let g = self.geometry(x.spatial());
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = Tensor::zeros([x.n(), self.cout, g.output[0], g.output[1], g.output[2]]);
        let mut col = vec![0.0f32; rows * cols];
        for i in 0..x.n() {
            im2col(x.sample(i), &g, &mut col);
            gemm(
                self.cout,
                rows,
                cols,
                &self.weight.value,
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                0.0,
                out.sample_mut(i),
            );
        }
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward");
        let g = self.geometry(x.spatial());
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = vec![0.0f32; rows * cols];
        let mut dcol = vec![0.0f32; rows * cols];
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..x.n() {
            im2col(x.sample(i), &g, &mut col);
            let dy = grad.sample(i);
            // dW += dY · colᵀ
            gemm(
                self.cout,
                cols,
                rows,
                dy,
                (cols as isize, 1),
                &col,
                (1, cols as isize),
                1.0,
                &mut self.weight.grad,
            );
            // dcol = Wᵀ · dY
            gemm(
                rows,
                self.cout,
                cols,
                &self.weight.value,
                (1, rows as isize),
                dy,
                (cols as isize, 1),
                0.0,
                &mut dcol,
            );
            col2im(&dcol, &g, dx.sample_mut(i));
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}
