use crate::error::{shape_err, Result};
use crate::{ParamStore, Scalar, Tensor};

/// Learning rate, step counter and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub learning_rate: T,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(learning_rate: T) -> Self {
        Self { learning_rate, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    fn ensure_buffers(&mut self, store: &ParamStore<T>, with_moments: bool) -> Result<()> {
        if !with_moments {
            return Ok(());
        }
        if self.first_moment.is_empty() {
            self.first_moment = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
            return Ok(());
        }
        if self.first_moment.len() != store.len() {
            return Err(shape_err(
                "optimizer_step",
                format!("{} moment buffers for {} parameters", self.first_moment.len(), store.len()),
            ));
        }
        for ((_, p), m) in store.iter().zip(&self.first_moment) {
            if p.value.shape() != m.shape() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("parameter `{}` is {:?}, moments are {:?}", p.name, p.value.shape(), m.shape()),
                ));
            }
        }
        Ok(())
    }
}

pub trait Optimizer<T: Scalar> {
    /// Applies one update from the gradients accumulated in `store`.
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()>;

    fn state(&self) -> &OptimizerState<T>;
}

/// Plain gradient descent: `p ← p − lr·g`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    state: OptimizerState<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T) -> Self {
        Self { state: OptimizerState::new(learning_rate) }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let lr = self.state.learning_rate;
        for p in store.iter_mut() {
            if p.grad.shape() != p.value.shape() {
                return Err(shape_err("optimizer_step", format!("gradient shape for `{}`", p.name)));
            }
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        self.state.step += 1;
        Ok(())
    }

    fn state(&self) -> &OptimizerState<T> {
        &self.state
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    state: OptimizerState<T>,
}

impl<T: Scalar> Adam<T> {
    /// Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(learning_rate: T) -> Self {
        Self { beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), state: OptimizerState::new(learning_rate) }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.state.ensure_buffers(store, true)?;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.state.learning_rate);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.state.first_moment).zip(&mut self.state.second_moment) {
            let grad = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let mut updates = Vec::with_capacity(grad.len());
            for ((&g, mi), vi) in grad.iter().zip(md.iter_mut()).zip(vd.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                updates.push(lr * m_hat / (v_hat.sqrt() + eps));
            }
            for (value, u) in p.value.data_mut().iter_mut().zip(updates) {
                *value -= u;
            }
        }
        Ok(())
    }

    fn state(&self) -> &OptimizerState<T> {
        &self.state
    }
}
