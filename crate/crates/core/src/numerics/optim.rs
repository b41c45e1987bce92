use super::tensor::Tensor;
use crate::error::{LabError, Result};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One decoupled-weight-decay Adam update, in place.
///
/// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)` with bias-corrected moments.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(LabError::shape("adamw_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(LabError::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(LabError::InvalidArgument(
            "optimizer state does not match parameter list".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = t(&[0.3, -1.2, 4.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut s = AdamState::default();
        for _ in 0..3 {
            adamw_step(&mut [&mut p], &[&g], &mut s, &AdamW::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let hp = AdamW {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        };
        let w0 = [0.5, -0.25];
        let g0 = [0.2, -3.0];
        let mut p = t(&w0);
        let mut s = AdamState::default();
        adamw_step(&mut [&mut p], &[&t(&g0)], &mut s, &hp).unwrap();
        for i in 0..2 {
            // fresh state: m̂ = g, v̂ = g², so the step is lr·(g/(|g|+eps) + wd·w)
            let m_hat = ((1.0 - 0.9) * g0[i]) / (1.0 - 0.9);
            let v_hat = ((1.0 - 0.999) * g0[i] * g0[i]) / (1.0 - 0.999);
            let expect = w0[i] - 0.01 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.02 * w0[i]);
            assert!((p.data()[i] - expect).abs() < 1e-15);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_only_scales_weights() {
        let hp = AdamW {
            lr: 1e-3,
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut p = t(&[2.0, -4.0]);
        let mut s = AdamState::default();
        adamw_step(&mut [&mut p], &[&Tensor::zeros(&[2])], &mut s, &hp).unwrap();
        let f = 1.0 - 1e-4;
        assert!((p.data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = t(&[1.0, 2.0]);
        let g = Tensor::zeros(&[3]);
        let mut s = AdamState::default();
        assert!(matches!(
            adamw_step(&mut [&mut p], &[&g], &mut s, &AdamW::default()),
            Err(LabError::ShapeMismatch { .. })
        ));
    }
}
