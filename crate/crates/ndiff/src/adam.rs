//! Adam with bias correction, plus global-norm gradient clipping.

use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            lr: T::from_f64(3e-4),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

/// A named, possibly frozen parameter as seen by the optimizer.
pub struct ParamRef<'a, T: Scalar> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub frozen: bool,
}

/// First/second moment estimates, one slot per parameter, allocated lazily on
/// the first update so the state can be built before shapes are known.
pub struct AdamState<T: Scalar> {
    pub step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            step: 0,
            moments: (0..num_params).map(|_| None).collect(),
        }
    }

    /// One update over the full parameter list.  `grads` is aligned with
    /// `params`; `None` entries (parameters the loss never touched) are
    /// treated as zero gradients.  Frozen parameters are skipped entirely.
    ///
    /// Any non-finite gradient aborts the step with the parameter's name
    /// before anything is modified.
    pub fn step(
        &mut self,
        cfg: &AdamConfig<T>,
        params: &mut [ParamRef<'_, T>],
        grads: &[Option<Tensor<T>>],
        clip_scale: T,
    ) -> Result<()> {
        assert_eq!(params.len(), self.moments.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        for (p, g) in params.iter().zip(grads) {
            if p.frozen {
                continue;
            }
            if let Some(g) = g {
                if g.has_non_finite() {
                    return Err(Error::NanGradient {
                        param: p.name.to_string(),
                    });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - cfg.beta1.powi(t);
        let bc2 = T::one() - cfg.beta2.powi(t);

        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.frozen {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| {
                (Tensor::zeros(p.value.dims()), Tensor::zeros(p.value.dims()))
            });
            let zero_grad;
            let g = match g {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(p.value.dims());
                    &zero_grad
                }
            };
            let one = T::one();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for ((mi, vi), (pi, &gi)) in
                md.iter_mut().zip(vd.iter_mut()).zip(pd.iter_mut().zip(g.data()))
            {
                let gi = gi * clip_scale;
                *mi = cfg.beta1 * *mi + (one - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (one - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient in the list, in list order.
pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> T {
    let mut acc = T::zero();
    for g in grads.iter().flatten() {
        for &x in g.data() {
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Scale factor that caps the global gradient norm at `max_norm`
/// (1 when already within bounds).
pub fn clip_global_norm<T: Scalar>(grads: &[Option<Tensor<T>>], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm && norm > T::zero() {
        max_norm / norm
    } else {
        T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        // From zero moments with gradient 1 everywhere, bias correction gives
        // m_hat = v_hat = 1, so the update is exactly -lr / (1 + eps).
        let cfg = AdamConfig::<f64>::default();
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::full(&[3], 1.0);
        let mut state = AdamState::new(1);
        state
            .step(
                &cfg,
                &mut [ParamRef {
                    name: "w",
                    value: &mut p,
                    frozen: false,
                }],
                &[Some(g)],
                1.0,
            )
            .unwrap();
        let expected = -3e-4 / (1.0 + 1e-8);
        for &x in p.data() {
            assert!((x - expected).abs() < 1e-15, "{} vs {}", x, expected);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let cfg = AdamConfig::<f64>::default();
        let mut p = Tensor::from_vec(&[2], vec![0.5, -0.25]);
        let mut state = AdamState::new(1);
        state
            .step(
                &cfg,
                &mut [ParamRef {
                    name: "w",
                    value: &mut p,
                    frozen: false,
                }],
                &[None],
                1.0,
            )
            .unwrap();
        assert_eq!(p.data(), &[0.5, -0.25]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let cfg = AdamConfig::<f64>::default();
        let mut p = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let g = Tensor::full(&[2], 5.0);
        let mut state = AdamState::new(1);
        state
            .step(
                &cfg,
                &mut [ParamRef {
                    name: "w",
                    value: &mut p,
                    frozen: true,
                }],
                &[Some(g)],
                1.0,
            )
            .unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let cfg = AdamConfig::<f64>::default();
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::full(&[1], f64::NAN);
        let mut state = AdamState::new(1);
        let err = state
            .step(
                &cfg,
                &mut [ParamRef {
                    name: "blocks.0.attn.wq",
                    value: &mut p,
                    frozen: false,
                }],
                &[Some(g)],
                1.0,
            )
            .unwrap_err();
        assert_eq!(
            err,
            Error::NanGradient {
                param: "blocks.0.attn.wq".into()
            }
        );
    }

    #[test]
    fn clip_reduces_norm_to_bound() {
        let grads = vec![Some(Tensor::from_vec(&[2], vec![3.0f64, 4.0]))];
        assert!((global_norm(&grads) - 5.0).abs() < 1e-12);
        let scale = clip_global_norm(&grads, 1.0);
        assert!((scale - 0.2).abs() < 1e-12);
        let small = vec![Some(Tensor::from_vec(&[2], vec![0.3f64, 0.4]))];
        assert_eq!(clip_global_norm(&small, 1.0), 1.0);
    }
}
