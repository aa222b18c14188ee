use super::{TrainConfig, TrainError};
use crate::autodiff::ParameterSet;

/// First and second moment estimates, one array per parameter, plus the
/// number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients currently stored in
/// `params`. Gradients are left untouched.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::OptimizerState(format!(
            "{} moment arrays for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let n = p.value.len();
        if state.m[i].len() != n || state.v[i].len() != n || p.grad.len() != n {
            return Err(TrainError::OptimizerState(format!(
                "{}: value has {n} elements, grad {}, moments {}/{}",
                p.name,
                p.grad.len(),
                state.m[i].len(),
                state.v[i].len()
            )));
        }
        if !p.grad.all_finite() {
            return Err(TrainError::OptimizerState(format!("{}: non-finite gradient", p.name)));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = p.grad.data().to_vec();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
