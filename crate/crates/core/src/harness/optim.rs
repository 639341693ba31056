//! Adam and variance-rectified Adam on flat parameter buffers.

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> MomentState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
        }
    }
}

/// `rho_inf = 2 / (1 - beta2) - 1`.
pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// Length of the approximated simple moving average at step `t`.
pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let b2t = beta2.powf(t as f64);
    rho_inf(beta2) - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// Variance rectification factor, defined when `rho_t > 4`.
pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
    let (ri, rt) = (rho_inf(beta2), rho_t(beta2, t));
    (rt > 4.0).then(|| ((rt - 4.0) * (rt - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt())
}

fn check_inputs<T: Real>(params: &[Tensor<T>], grads: &[Vec<T>], state: &MomentState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!("optimizer: gradient {i} has wrong length")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i} at element {j}"
            )));
        }
    }
    Ok(())
}

fn update_moments<T: Real>(state: &mut MomentState<T>, grads: &[Vec<T>], h: &AdamHyper) {
    let (b1, b2) = (T::c(h.beta1), T::c(h.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    for ((m, v), g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grads) {
        for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
        }
    }
}

/// One RAdam step. While `rho_t <= 4` the update is the bias-corrected
/// momentum `lr * m_hat`; afterwards it is `lr * r_t * m_hat * l_t` with
/// `l_t = sqrt(1 - beta2^t) / (sqrt(v) + eps)`.
pub fn radam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut MomentState<T>,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    check_inputs(params, grads, state)?;
    state.t += 1;
    let t = state.t;
    update_moments(state, grads, h);
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let step = T::c(lr / bc1);
    match rectification(h.beta2, t) {
        Some(r) => {
            let bc2 = T::c((1.0 - h.beta2.powf(t as f64)).sqrt());
            let scale = step * T::c(r);
            let eps = T::c(h.eps);
            for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
                for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                    *pi -= scale * mi * bc2 / (vi.sqrt() + eps);
                }
            }
        }
        None => {
            for (p, m) in params.iter_mut().zip(&state.m) {
                for (pi, &mi) in p.data_mut().iter_mut().zip(m) {
                    *pi -= step * mi;
                }
            }
        }
    }
    Ok(())
}

/// Plain Adam with bias correction.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut MomentState<T>,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    check_inputs(params, grads, state)?;
    state.t += 1;
    let t = state.t as f64;
    update_moments(state, grads, h);
    let step = T::c(lr / (1.0 - h.beta1.powf(t)));
    let bc2 = T::c((1.0 - h.beta2.powf(t)).sqrt());
    let eps = T::c(h.eps);
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= step * mi * bc2 / (vi.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_f64(&[1], &[v]).unwrap()]
    }

    #[test]
    fn rho_formulas() {
        let ri = rho_inf(0.999);
        assert!((ri - 1999.0).abs() < 1e-9);
        // rho_1 = rho_inf - 2 * 0.999 / 0.001 = 1999 - 1998 = 1
        assert!((rho_t(0.999, 1) - 1.0).abs() < 1e-9);
        assert!(rectification(0.999, 1).is_none());
        // rho_4 = 3.9975..., rho_5 = 4.9960...: the first rectified step is t = 5
        assert!((rho_t(0.999, 4) - 3.997_498_749_854_685).abs() < 1e-9);
        assert!(rectification(0.999, 4).is_none());
        assert!(rectification(0.999, 5).is_some());
        let r = rectification(0.999, 100_000).unwrap();
        assert!((r - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = scalar_param(0.3);
        let mut s = MomentState::new(&p);
        for _ in 0..20 {
            radam_step(&mut p, &[vec![0.0]], &mut s, 1e-2, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p[0].data(), &[0.3]);
    }

    #[test]
    fn first_step_is_momentum_only() {
        let lr = 1e-3;
        let mut p = scalar_param(1.0);
        let mut s = MomentState::new(&p);
        radam_step(&mut p, &[vec![4.0]], &mut s, lr, &AdamHyper::default()).unwrap();
        // m_hat = g at t = 1, no division by sqrt(v)
        assert!((p[0].data()[0] - (1.0 - lr * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_matches_scalar_simulation() {
        let h = AdamHyper::default();
        let (lr, g) = (1e-2, 0.7);
        let mut p = scalar_param(2.0);
        let mut s = MomentState::new(&p);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let mut prev = x;
        for t in 1..=200u64 {
            radam_step(&mut p, &[vec![g]], &mut s, lr, &h).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let ri = 2.0 / 0.001 - 1.0;
            let b2t = 0.999f64.powi(t as i32);
            let rt = ri - 2.0 * t as f64 * b2t / (1.0 - b2t);
            if rt > 4.0 {
                let r = ((rt - 4.0) * (rt - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt();
                x -= lr * r * mh * (1.0 - b2t).sqrt() / (v.sqrt() + 1e-8);
            } else {
                x -= lr * mh;
            }
            assert!((p[0].data()[0] - x).abs() < 1e-12, "step {t}");
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = scalar_param(0.0);
        let mut s = MomentState::new(&p);
        adam_step(&mut p, &[vec![-3.0]], &mut s, 0.1, &AdamHyper::default()).unwrap();
        assert!((p[0].data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_numerical_failure() {
        let mut p = scalar_param(0.0);
        let mut s = MomentState::new(&p);
        let err = radam_step(&mut p, &[vec![f64::NAN]], &mut s, 0.1, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(s.t, 0);
    }
}
