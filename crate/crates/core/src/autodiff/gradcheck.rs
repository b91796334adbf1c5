use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{collect_grads, forward_per_sample_loss, Model};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / scale
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Tensors with more elements than this are checked on a random subset of
    /// this size. Must be at least 50.
    pub max_elements_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            max_elements_per_param: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param_index: usize,
    pub shape: Vec<usize>,
    pub checked: usize,
    /// Elements whose ±h probe crossed a relu or maxpool switch point.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }
}

fn loss_and_branches(model: &Model, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<usize>)> {
    let mut tape = Tape::new();
    let losses = forward_per_sample_loss(&mut tape, model, x, labels)?;
    let root = tape.mean(losses.node)?;
    let value = tape.value(root).data()[0];
    Ok((value, tape.branch_signature()))
}

/// Compares autodiff gradients of the batch-mean loss with central
/// differences, one parameter element at a time.
///
/// Probes whose `±h` step flips a relu or maxpool branch are skipped, since
/// the loss is not differentiable across them.
pub fn grad_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(Error::Parameter(format!("h must be positive, got {}", cfg.h)));
    }
    if cfg.max_elements_per_param < 50 {
        return Err(Error::Parameter(
            "gradient check must sample at least 50 elements per parameter".into(),
        ));
    }

    let mut tape = Tape::new();
    let losses = forward_per_sample_loss(&mut tape, model, x, labels)?;
    let root = tape.mean(losses.node)?;
    tape.backward(root)?;
    let analytic = collect_grads(&tape, &losses.params)?;
    let base_signature = tape.branch_signature();

    let mut prng = Prng::new(cfg.seed);
    let mut probe = model.clone();
    let mut report = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let elements: Vec<usize> = if n <= cfg.max_elements_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            prng.shuffle(&mut all);
            all.truncate(cfg.max_elements_per_param);
            all.sort_unstable();
            all
        };

        let mut check = ParamCheck {
            param_index: pi,
            shape: grad.shape().to_vec(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for e in elements {
            let original = probe.params()[pi].data()[e];
            let mut eval = |v: f64| -> Result<(f64, Vec<usize>)> {
                probe.params_mut()[pi].data_mut()[e] = v;
                loss_and_branches(&probe, x, labels)
            };
            let (plus, sig_plus) = eval(original + cfg.h)?;
            let (minus, sig_minus) = eval(original - cfg.h)?;
            probe.params_mut()[pi].data_mut()[e] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let err = relative_error(grad.data()[e], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn quadratic_closed_form() {
        // L(θ) = θ·θ recorded as a 1×1 matmul of a node with itself.
        let mut tape = Tape::new();
        let theta = tape.input(Tensor::new(&[1, 1], vec![3.0]).unwrap(), true);
        let sq = tape.matmul(theta, theta).unwrap();
        let root = tape.sum(sq).unwrap();
        tape.backward(root).unwrap();
        let analytic = tape.grad(theta).unwrap().data()[0];
        let numeric = central_difference(|t| t * t, 3.0, 1e-5);
        assert_eq!(analytic, 6.0);
        assert!(relative_error(analytic, numeric) < 1e-8);
    }

    #[test]
    fn relative_error_guard() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn mlp3_small_batch_passes() {
        let mut m = Model::new(Architecture::Mlp3, &[6], 3).unwrap();
        m.init_params(&mut Prng::new(10)).unwrap();
        let x = Tensor::randn(&mut Prng::new(11), &[4, 6], 0.0, 1.0).unwrap();
        let cfg = GradCheckConfig {
            max_elements_per_param: 60,
            ..Default::default()
        };
        let report = grad_check(&m, &x, &[0, 1, 2, 1], &cfg).unwrap();
        assert_eq!(report.params.len(), 6);
        assert!(report.passed(), "{report:?}");
        assert!(report.params.iter().all(|p| p.checked > 0));
    }

    #[test]
    fn rejects_bad_settings() {
        let m = Model::new(Architecture::Mlp3, &[2], 2).unwrap();
        let x = Tensor::zeros(&[1, 2]).unwrap();
        let bad_h = GradCheckConfig {
            h: 0.0,
            ..Default::default()
        };
        assert!(grad_check(&m, &x, &[0], &bad_h).is_err());
        let few = GradCheckConfig {
            max_elements_per_param: 10,
            ..Default::default()
        };
        assert!(grad_check(&m, &x, &[0], &few).is_err());
    }
}
