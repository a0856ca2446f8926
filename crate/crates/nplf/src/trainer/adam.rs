//! Adam optimizer with bias correction over the flat parameter store.

use super::store::ParameterStore;

/// First/second moment buffers; persist across steps and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update from the store's accumulated gradient; zeroes the
/// gradient afterwards.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, hyper: &AdamHyper) {
    debug_assert_eq!(state.m.len(), store.values.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..store.values.len() {
        let g = store.grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        store.values[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    store.zero_grad();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lightfield::ModelConfig;
    use crate::trainer::store::SegmentLayout;

    fn tiny_store() -> ParameterStore {
        let model = ModelConfig {
            feature_dim: 2,
            k_neighbors: 2,
            l_dir: 1,
            l_feat: 1,
            hidden: 4,
        };
        ParameterStore::init(SegmentLayout::new(model, 3, 2), 0)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = tiny_store();
        let mut state = AdamState::new(store.values.len());
        let before = store.values.clone();
        adam_step(&mut store, &mut state, &AdamHyper::default());
        assert_eq!(store.values, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        let mut store = tiny_store();
        let mut state = AdamState::new(store.values.len());
        let before = store.values.clone();
        store.grad.fill(0.0);
        store.grad[0] = 0.37;
        store.grad[1] = -4.2;
        let hyper = AdamHyper::default();
        adam_step(&mut store, &mut state, &hyper);
        assert!((store.values[0] - (before[0] - hyper.learning_rate)).abs() < 1e-9);
        assert!((store.values[1] - (before[1] + hyper.learning_rate)).abs() < 1e-9);
        assert_eq!(store.values[2], before[2]);
        // gradient zeroed afterwards
        assert!(store.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = sum (x - c)^2; loss strictly decreases after step 5 and
        // lands below 1e-6 within 100 steps. Derived empirically: with the
        // lighter first-moment decay the coordinate crossings finish inside
        // the first five steps and the tail is monotone.
        let mut store = tiny_store();
        let n = store.values.len();
        let target: Vec<f64> = (0..n).map(|i| 0.5 * (1.0 + 0.3 * (i as f64 * 0.7).sin())).collect();
        store.values.fill(0.0);
        let mut state = AdamState::new(n);
        let hyper = AdamHyper {
            learning_rate: 0.05,
            beta1: 0.5,
            ..AdamHyper::default()
        };
        let loss_of = |values: &[f64]| -> f64 {
            values
                .iter()
                .zip(&target)
                .map(|(x, c)| (x - c) * (x - c))
                .sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            for i in 0..n {
                store.grad[i] = 2.0 * (store.values[i] - target[i]);
            }
            adam_step(&mut store, &mut state, &hyper);
            losses.push(loss_of(&store.values));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {w:?}");
        }
        assert!(losses.last().unwrap() < &1e-6, "final loss {:?}", losses.last());
    }

    #[test]
    fn moments_persist_across_steps() {
        let mut store = tiny_store();
        let mut state = AdamState::new(store.values.len());
        store.grad.fill(1.0);
        adam_step(&mut store, &mut state, &AdamHyper::default());
        let m_after_first = state.m[0];
        store.grad.fill(1.0);
        adam_step(&mut store, &mut state, &AdamHyper::default());
        assert!(state.m[0] > m_after_first);
        assert_eq!(state.step, 2);
    }
}
