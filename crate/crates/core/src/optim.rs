//! AdamW with decoupled weight decay.

use crate::scalar::Scalar;

/// Hyper-parameters. Weight decay is decoupled: it scales the parameter
/// directly instead of entering the moment estimates.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<F: Scalar> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> Moments<F> {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }
}

/// Optimizer state across steps: one `Moments` slot per parameter tensor,
/// in a fixed traversal order, plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimState<F: Scalar> {
    pub t: u64,
    pub slots: Vec<Moments<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new() -> Self {
        OptimState {
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Begins a step: bumps the counter. Call once before updating slots.
    pub fn begin_step(&mut self) -> u64 {
        self.t += 1;
        self.t
    }

    /// The moment slot for parameter-tensor `i`, created on first use.
    pub fn slot(&mut self, i: usize, n: usize) -> &mut Moments<F> {
        while self.slots.len() <= i {
            self.slots.push(Moments::zeros(0));
        }
        if self.slots[i].m.is_empty() {
            self.slots[i] = Moments::zeros(n);
        }
        assert_eq!(self.slots[i].m.len(), n, "slot {i} size changed");
        &mut self.slots[i]
    }
}

impl AdamW {
    /// In-place update of one parameter tensor given its gradient.
    /// `t` is the 1-based step count from [`OptimState::begin_step`].
    pub fn update<F: Scalar>(&self, t: u64, mom: &mut Moments<F>, w: &mut [F], g: &[F]) {
        assert_eq!(w.len(), g.len(), "param/grad length mismatch");
        assert_eq!(w.len(), mom.m.len(), "param/moment length mismatch");
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        let wd = F::lit(self.weight_decay);
        let c1 = F::one() - F::lit(self.beta1.powi(t as i32));
        let c2 = F::one() - F::lit(self.beta2.powi(t as i32));
        for i in 0..w.len() {
            mom.m[i] = b1 * mom.m[i] + (F::one() - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (F::one() - b2) * g[i] * g[i];
            let mh = mom.m[i] / c1;
            let vh = mom.v[i] / c2;
            w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
        }
    }
}
