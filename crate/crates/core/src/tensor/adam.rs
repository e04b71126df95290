use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Moment buffers and hyper-parameters of Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update of a single buffer, in place.
///
/// `step` is the 1-based index of this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        let g = g.as_f64();
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = T::from_f64_lossy(p.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
    }
}

/// Adam over a model's parameter list.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub state: AdamState,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            state: AdamState::new(beta1, beta2, eps),
        }
    }

    pub fn from_state(state: AdamState) -> Self {
        Adam { state }
    }

    /// Apply one update to every parameter that received a gradient.
    ///
    /// Parameters absent from the last graph (no gradient) are left untouched,
    /// moments included. Gradients are cleared by the update since each
    /// parameter is replaced with a fresh leaf.
    pub fn step<T: Scalar>(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        let st = &mut self.state;
        if st.m.is_empty() && st.v.is_empty() {
            st.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            st.v = st.m.clone();
        }
        if st.m.len() != params.len() || st.v.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                "parameter count",
                st.m.len(),
                params.len(),
            ));
        }
        for (p, (m, v)) in params.iter().zip(st.m.iter().zip(&st.v)) {
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::dim(
                    "adam_step",
                    format!("moments of {}", p.name),
                    m.len(),
                    p.numel(),
                ));
            }
        }
        st.step += 1;
        for (p, (m, v)) in params.iter_mut().zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            let Some(grad) = p.value.grad() else { continue };
            let mut data = p.value.data().to_vec();
            adam_update(
                &mut data, &grad, m, v, st.step, st.beta1, st.beta2, st.eps, lr,
            );
            p.set_data(data)?;
        }
        Ok(())
    }
}
