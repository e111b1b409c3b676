//! Optimizers with the training schedules used by the adversarial loop:
//! step-decayed SGD for the discriminator, linearly decayed Adam for the
//! generator and codec.

use super::tensor::Tensor;

/// Plain gradient descent whose rate decays by 10% every 10 epochs:
/// `lr(epoch) = base * 0.9^floor(epoch/10)`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub base_lr: f64,
}

impl Sgd {
    pub fn new(base_lr: f64) -> Sgd {
        Sgd { base_lr }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * 0.9f64.powi((epoch / 10) as i32)
    }

    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Tensor], epoch: usize) {
        assert_eq!(params.len(), grads.len());
        let lr = self.lr_at(epoch);
        for (p, g) in params.iter_mut().zip(grads.iter()) {
            p.acc_scaled(g, -lr);
        }
    }
}

/// Adam with bias correction and a learning rate that decays linearly from
/// `base_lr` at step 0 to exactly zero at `total_steps`.
#[derive(Debug, Clone)]
pub struct Adam {
    base_lr: f64,
    total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps_taken: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(base_lr: f64, total_steps: usize) -> Adam {
        assert!(total_steps > 0);
        Adam {
            base_lr,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps_taken: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let remaining = self.total_steps.saturating_sub(step);
        self.base_lr * remaining as f64 / self.total_steps as f64
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len());
        let lr = self.lr_at(self.steps_taken);
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(p.shape(), grads[i].shape());
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let out = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                out[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment state for checkpointing: `(m, v, steps_taken)`.
    pub fn state(&self) -> (&[Tensor], &[Tensor], usize) {
        (&self.m, &self.v, self.steps_taken)
    }

    pub fn restore(base_lr: f64, total_steps: usize, m: Vec<Tensor>, v: Vec<Tensor>, steps_taken: usize) -> Adam {
        let mut a = Adam::new(base_lr, total_steps);
        a.m = m;
        a.v = v;
        a.steps_taken = steps_taken;
        a
    }
}
