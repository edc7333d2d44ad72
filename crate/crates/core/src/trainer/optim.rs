use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter flag; by default only matrices and higher decay.
    pub decay: Vec<bool>,
}

impl OptimState {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: params.tensors().iter().map(|t| t.shape().len() >= 2).collect(),
        }
    }
}

/// One AdamW update from the gradients stored on `params`, at `state.lr`.
///
/// `p ← p − lr·wd·p` (decoupled decay), then
/// `p ← p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer holds {} moment sets for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    let step = state.step + 1;
    for (i, name) in params.names().iter().enumerate() {
        let t = &params.tensors()[i];
        let bad = |message: String| Error::Training { step, message };
        let g = t.grad().ok_or_else(|| bad(format!("parameter `{name}` has no gradient")))?;
        if state.m[i].len() != g.len() {
            return Err(Error::shape("adamw_step", &[state.m[i].len()], &[g.len()]));
        }
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite gradient in `{name}` at element {k}")));
        }
    }
    state.step = step;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let lr = state.lr;
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let g = t.grad().expect("checked").to_vec();
        let decay = if state.decay[i] { lr * state.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in t.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            *p -= decay * *p;
            *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning-rate schedule over training progress `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    /// Fraction of training spent in linear warmup.
    pub warmup_fraction: f64,
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
pub fn lr_at(t: f64, s: &Schedule) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let w = s.warmup_fraction;
    if t < w {
        return s.base_lr * t / w;
    }
    if w >= 1.0 {
        return s.base_lr;
    }
    let p = (t - w) / (1.0 - w);
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1, 1], vec![value]).unwrap());
        store.get_mut(id).accumulate_grad(&[grad]).unwrap();
        store
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut store = single(1.0, 0.0);
        let mut st = OptimState::new(&store, 0.0);
        st.lr = 0.01;
        adamw_step(&mut store, &mut st).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn pure_decay() {
        let mut store = single(1.0, 0.0);
        let mut st = OptimState::new(&store, 0.1);
        st.lr = 0.01;
        adamw_step(&mut store, &mut st).unwrap();
        assert!((store.tensors()[0].data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude() {
        let mut store = single(0.0, 1.0);
        let mut st = OptimState::new(&store, 0.0);
        st.lr = 0.001;
        adamw_step(&mut store, &mut st).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let want = -0.001 / (1.0 + 1e-8);
        assert!((store.tensors()[0].data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn vectors_skip_decay() {
        let mut store = ParamStore::new();
        let id = store.add("bias", Tensor::filled(&[2], 1.0));
        store.get_mut(id).accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut st = OptimState::new(&store, 0.1);
        st.lr = 0.01;
        adamw_step(&mut store, &mut st).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_grad_names_parameter_and_step() {
        let mut store = single(0.0, f64::NAN);
        let mut st = OptimState::new(&store, 0.0);
        st.step = 4;
        let err = adamw_step(&mut store, &mut st).unwrap_err();
        match err {
            Error::Training { step, message } => {
                assert_eq!(step, 5);
                assert!(message.contains("`p`"));
            }
            other => panic!("{other}"),
        }
        assert_eq!(st.step, 4);
        assert_eq!(store.tensors()[0].data(), &[0.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { base_lr: 1e-3, min_lr: 1e-5, warmup_fraction: 0.1 };
        assert_eq!(lr_at(0.0, &s), 0.0);
        assert_eq!(lr_at(0.1, &s), 1e-3);
        assert!((lr_at(1.0, &s) - 1e-5).abs() < 1e-12);
        assert!(lr_at(0.05, &s) > 0.0 && lr_at(0.05, &s) < 1e-3);
        let mut prev = f64::INFINITY;
        for i in 10..=100 {
            let lr = lr_at(i as f64 / 100.0, &s);
            assert!(lr <= prev);
            prev = lr;
        }
        let flat = Schedule { warmup_fraction: 0.0, ..s };
        assert_eq!(lr_at(0.0, &flat), 1e-3);
    }
}
