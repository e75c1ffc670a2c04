use super::Param;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adaptive-moment optimizer. Moment buffers are keyed by the visiting order
/// of trainable parameters, which is fixed for a given architecture.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter handed to `visit`.
    pub fn update(&mut self, lr: f64, visit: impl FnOnce(&mut dyn FnMut(&mut Param))) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let mut slot = 0usize;
        let first = &mut self.first;
        let second = &mut self.second;
        visit(&mut |p: &mut Param| {
            if !p.trainable {
                return;
            }
            if first.len() <= slot {
                first.push(vec![0.0; p.value.len()]);
                second.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut first[slot], &mut second[slot]);
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
                p.value[i] -= update as f32;
            }
            slot += 1;
        });
    }
}
