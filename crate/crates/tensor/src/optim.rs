use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::{Float, Tensor};

fn check_grads<T: Float>(store: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(TensorError::Invalid {
            op: "optimizer step",
            msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
        });
    }
    for ((name, p), g) in store.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::Invalid {
                op: "optimizer step",
                msg: format!("gradient for {name} has shape {:?}, expected {:?}", g.shape(), p.shape()),
            });
        }
    }
    Ok(())
}

/// RMSProp: `v <- a v + (1-a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp<T: Float> {
    pub lr: T,
    pub alpha: T,
    pub eps: T,
    square_avg: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Float> RmsProp<T> {
    pub fn new(store: &ParamStore<T>, lr: T, alpha: T, eps: T) -> Self {
        Self {
            lr,
            alpha,
            eps,
            square_avg: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_grads(store, grads)?;
        let one = T::one();
        for ((p, v), g) in store.tensors_mut().iter_mut().zip(&mut self.square_avg).zip(grads) {
            let vd = v.make_mut();
            let pd = p.make_mut();
            for ((pv, sv), &gv) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *sv = self.alpha * *sv + (one - self.alpha) * gv * gv;
                *pv -= self.lr * gv / (sv.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn state(&self) -> &[Tensor<T>] {
        &self.square_avg
    }

    pub fn restore(&mut self, state: Vec<Tensor<T>>, steps: u64) -> Result<()> {
        if state.len() != self.square_avg.len() || state.iter().zip(&self.square_avg).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::Invalid {
                op: "RmsProp::restore",
                msg: "state does not match parameter shapes".into(),
            });
        }
        self.square_avg = state;
        self.steps = steps;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_grads(store, grads)?;
        self.steps += 1;
        let one = T::one();
        let t = self.steps as i32;
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for (((p, m), v), g) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let (pd, md, vd) = (p.make_mut(), m.make_mut(), v.make_mut());
            for (i, &gv) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (one - self.beta1) * gv;
                vd[i] = self.beta2 * vd[i] + (one - self.beta2) * gv * gv;
                pd[i] -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_first_step_matches_hand_computation() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[1], 1.0));
        let mut opt = RmsProp::new(&store, 0.1, 0.99, 1e-8);
        opt.step(&mut store, &[Tensor::full(&[1], 2.0)]).unwrap();
        // v = 0.01 * 4 = 0.04, step = 0.1 * 2 / (0.2 + 1e-8)
        let want = 1.0 - 0.1 * 2.0 / (0.2 + 1e-8);
        assert!((store.tensors()[0].item() - want).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[3], 0.5));
        let before = store.clone();
        let mut opt = RmsProp::new(&store, 0.0, 0.99, 1e-8);
        opt.step(&mut store, &[Tensor::full(&[3], 7.0)]).unwrap();
        assert!(store.bits_eq(&before));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[2], 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.tensors()[0].scale(2.0);
            opt.step(&mut store, &[g]).unwrap();
        }
        assert!(store.tensors()[0].abs_max() < 1e-2);
    }

    #[test]
    fn wrong_gradient_count_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[1]));
        let mut opt = RmsProp::new(&store, 0.1, 0.9, 1e-8);
        assert!(opt.step(&mut store, &[]).is_err());
    }
}
