//! Parameter updates (Adam, SGD with momentum) and step-decay learning rates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base_lr · gamma^(milestones ≤ epoch)`. Decay takes effect *at* the
/// milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "milestones must be strictly ascending: {milestones:?}"
            )));
        }
        if milestones.first() == Some(&0) {
            return Err(Error::Parameter("milestones are 1-based epochs".into()));
        }
        Ok(LrSchedule {
            base_lr,
            milestones,
            gamma,
        })
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        (0..passed).fold(self.base_lr, |lr, _| lr * self.gamma)
    }
}

fn check_pairs(params: &[&mut Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::contract(format!(
            "{} params, {} grads, {} state tensors",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if !p.same_shape(g) || !p.same_shape(s) {
            return Err(Error::contract(format!(
                "shape mismatch: param {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                s.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for one set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<_>>()?;
        Ok(AdamState {
            v: m.clone(),
            m,
            t: 0,
        })
    }

    /// One Adam update with L2 weight decay folded into the gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        check_pairs(params, grads, &self.m)?;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((w, &g), m), v) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + cfg.weight_decay * *w;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        Ok(SgdState {
            velocity: params
                .into_iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Result<_>>()?,
        })
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
        cfg: &SgdConfig,
    ) -> Result<()> {
        check_pairs(params, grads, &self.velocity)?;
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let g = g + cfg.weight_decay * *w;
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Either optimizer, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam { state: AdamState, cfg: AdamConfig },
    Sgd { state: SgdState, cfg: SgdConfig },
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam { state, cfg } => state.step(params, grads, lr, cfg),
            Optimizer::Sgd { state, cfg } => state.step(params, grads, lr, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn lr_schedule_examples() {
        let sched = LrSchedule::new(0.001, vec![50, 100], 0.5).unwrap();
        assert_eq!(sched.lr_at_epoch(1), 0.001);
        assert_eq!(sched.lr_at_epoch(49), 0.001);
        assert_eq!(sched.lr_at_epoch(50), 0.0005);
        assert_eq!(sched.lr_at_epoch(120), 0.00025);
        let flat = LrSchedule::new(0.01, vec![], 0.5).unwrap();
        assert!((1..200).all(|e| flat.lr_at_epoch(e) == 0.01));
        assert!(LrSchedule::new(0.1, vec![5, 5], 0.5).is_err());
        assert!(LrSchedule::new(0.1, vec![0, 5], 0.5).is_err());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut w = s(0.0);
        let mut st = AdamState::new([&w]).unwrap();
        st.step(&mut [&mut w], &[s(1.0)], 0.001, &AdamConfig::default())
            .unwrap();
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-18);
        assert!((w.data()[0] + 0.000999999990).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut w = s(0.7);
        let mut st = AdamState::new([&w]).unwrap();
        for _ in 0..3 {
            st.step(&mut [&mut w], &[s(0.0)], 0.001, &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(w.data()[0], 0.7);
        assert_eq!(st.m[0].data()[0], 0.0);
        assert_eq!(st.v[0].data()[0], 0.0);
    }

    #[test]
    fn adam_positive_gradient_decreases_weight() {
        let mut w = s(1.0);
        let mut st = AdamState::new([&w]).unwrap();
        let mut prev = 1.0;
        for _ in 0..2 {
            st.step(&mut [&mut w], &[s(0.5)], 0.001, &AdamConfig::default())
                .unwrap();
            assert!(w.data()[0] < prev);
            prev = w.data()[0];
        }
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut w = s(1.0);
        let mut st = SgdState::new([&w]).unwrap();
        st.step(&mut [&mut w], &[s(2.0)], 0.1, &cfg).unwrap();
        assert_eq!(w.data()[0], 1.0 - 0.1 * 2.0);

        let mut w = s(1.0);
        let mut st = SgdState::new([&w]).unwrap();
        st.step(&mut [&mut w], &[s(0.0)], 0.1, &cfg).unwrap();
        assert_eq!(w.data()[0], 1.0);

        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut w = s(0.0);
        let mut st = SgdState::new([&w]).unwrap();
        st.step(&mut [&mut w], &[s(1.0)], 0.01, &cfg).unwrap();
        let after_first = w.data()[0];
        st.step(&mut [&mut w], &[s(1.0)], 0.01, &cfg).unwrap();
        let second = w.data()[0] - after_first;
        assert!((second + 0.01 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut w = Tensor::zeros(&[2]).unwrap();
        let mut st = AdamState::new([&w]).unwrap();
        let err = st
            .step(&mut [&mut w], &[s(1.0)], 0.1, &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let mut sgd = SgdState::new([&w]).unwrap();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(sgd.step(&mut [&mut w], &[], 0.1, &cfg).is_err());
    }

    #[test]
    fn quadratic_convergence_smoke() {
        // L(w) = w²/2, so the gradient is w.
        let adam = AdamConfig {
            weight_decay: 1e-4,
            ..Default::default()
        };
        let mut w = s(1.0);
        let mut st = AdamState::new([&w]).unwrap();
        let mut reached = false;
        for _ in 0..5000 {
            let g = s(w.data()[0]);
            st.step(&mut [&mut w], &[g], 0.001, &adam).unwrap();
            if w.data()[0].abs() < 1e-3 {
                reached = true;
                break;
            }
        }
        assert!(reached, "adam stalled at {}", w.data()[0]);

        let sgd = SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        };
        let mut w = s(1.0);
        let mut st = SgdState::new([&w]).unwrap();
        for _ in 0..5000 {
            let g = s(w.data()[0]);
            st.step(&mut [&mut w], &[g], 0.001, &sgd).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-3, "sgd at {}", w.data()[0]);
    }

    proptest! {
        #[test]
        fn adam_is_pure_and_keeps_v_nonnegative(seed in any::<u64>(), steps in 1usize..20) {
            let mut r = Prng::new(seed);
            let w0 = Tensor::randn(&mut r, &[5], 0.0, 1.0).unwrap();
            let grads: Vec<Tensor> = (0..steps)
                .map(|_| Tensor::randn(&mut r, &[5], 0.0, 10.0).unwrap())
                .collect();
            let cfg = AdamConfig { weight_decay: 1e-4, ..Default::default() };
            let run = || {
                let mut w = w0.clone();
                let mut st = AdamState::new([&w]).unwrap();
                for g in &grads {
                    st.step(&mut [&mut w], std::slice::from_ref(g), 0.001, &cfg).unwrap();
                }
                (w, st)
            };
            let (wa, sa) = run();
            let (wb, sb) = run();
            prop_assert_eq!(&wa, &wb);
            prop_assert_eq!(&sa, &sb);
            prop_assert!(sa.v[0].data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn lr_is_non_increasing(gamma in 0.0f64..=1.0, a in 1usize..50, b in 1usize..50) {
            let sched = LrSchedule::new(0.1, vec![a.min(b), a.max(b) + 1], gamma).unwrap();
            let lrs: Vec<f64> = (1..120).map(|e| sched.lr_at_epoch(e)).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
