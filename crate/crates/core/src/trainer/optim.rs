use crate::numerics::{Gradients, Tensor};

/// Adam with decoupled weight decay. Decay applies only to tensors whose
/// `decay_mask` entry is set and never enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay_mask: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        assert_eq!(params.len(), decay_mask.len());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_mask,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// Matrices and embeddings decay; gains and biases do not.
    pub fn default_decay_mask(params: &[Tensor]) -> Vec<bool> {
        params.iter().map(|p| p.rank() >= 2).collect()
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2_sqrt = (1.0 - self.beta2.powi(self.t)).sqrt();
        let step_size = lr / bc1;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i).expect("gradient for every parameter");
            let decay = if self.decay_mask[i] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + self.eps;
                *w = *w * decay - step_size * m[j] / denom;
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn grads_of(values: &[Tensor]) -> Gradients {
        // build a gradient map through a graph whose gradient equals `values`
        let mut g = Graph::new();
        let mut parts = Vec::new();
        for (i, v) in values.iter().enumerate() {
            let p = g.param(i, &Tensor::zeros(v.shape()));
            let c = g.constant(v.clone());
            let prod = g.mul(p, c);
            parts.push(g.sum(prod));
        }
        let total = g.add_n(&parts);
        g.backward(total).unwrap()
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let mut params = vec![
            Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap(),
            Tensor::vector(vec![2.0]),
        ];
        let mask = AdamW::default_decay_mask(&params);
        assert_eq!(mask, vec![true, false]);
        let mut opt = AdamW::new(&params, 0.1, mask);
        let g1 = [Tensor::matrix(1, 2, vec![0.2, -0.4]).unwrap(), Tensor::vector(vec![1.0])];
        let g2 = [Tensor::matrix(1, 2, vec![-0.1, 0.3]).unwrap(), Tensor::vector(vec![0.5])];
        let lr = 0.01;
        opt.step(&mut params, &grads_of(&g1), lr);
        opt.step(&mut params, &grads_of(&g2), lr);

        // reference: moments use raw gradients only; decay multiplies the weight
        let hand = |w0: f64, gs: [f64; 2], decay: bool| {
            let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.1);
            let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
            for (t, g) in gs.iter().enumerate() {
                let t = t as i32 + 1;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mhat = m / (1.0 - b1.powi(t));
                let vhat = v / (1.0 - b2.powi(t));
                if decay {
                    w -= lr * wd * w;
                }
                w -= lr * mhat / (vhat.sqrt() + eps);
            }
            w
        };
        let expect = [
            hand(0.5, [0.2, -0.1], true),
            hand(-1.0, [-0.4, 0.3], true),
            hand(2.0, [1.0, 0.5], false),
        ];
        let got = [params[0].data()[0], params[0].data()[1], params[1].data()[0]];
        for (e, g) in expect.iter().zip(got) {
            assert!((e - g).abs() < 1e-12, "{e} vs {g}");
        }
    }

    #[test]
    fn decay_is_not_fed_into_moments() {
        // zero gradient: only decay moves the weight, moments stay zero
        let mut params = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap()];
        let mut opt = AdamW::new(&params, 0.5, vec![true]);
        opt.step(&mut params, &grads_of(&[Tensor::matrix(1, 1, vec![0.0]).unwrap()]), 0.1);
        assert!((params[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(opt.m[0][0], 0.0);
        assert_eq!(opt.v[0][0], 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = grads_of(&[Tensor::vector(vec![3.0, 4.0])]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let mut g = grads_of(&[Tensor::vector(vec![0.3, 0.4])]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g.get(0).unwrap().data(), &[0.3, 0.4]);
    }
}
