//! Quick randomized self-checks, run by `trimnet selftest`.

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape};
use crate::error::Result;
use crate::harness::config::parse_config;
use crate::harness::report::emit_csv;
use crate::harness::trial::{prepare_data, run_trial};
use crate::model::{Architecture, Model};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::trim::{self, TrimSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Gradient check of both architectures on a random batch of 4.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    let cases = [
        (Architecture::Mlp3, vec![20], 5),
        (Architecture::TinyCnn, vec![3, 8, 8], 10),
    ];
    let mut out = Vec::new();
    for (i, (arch, sample, classes)) in cases.into_iter().enumerate() {
        let mut prng = Prng::derive(seed, i as u64);
        let mut model = Model::new(arch, &sample, classes)?;
        model.init_params(&mut prng)?;
        let mut shape = vec![4];
        shape.extend_from_slice(&sample);
        let x = Tensor::randn(&mut prng, &shape, 0.0, 1.0)?;
        let labels: Vec<usize> = (0..4).map(|_| prng.below(classes)).collect();
        out.push((arch.to_string(), grad_check(&model, &x, &labels, &cfg)?));
    }
    Ok(out)
}

fn random_losses(prng: &mut Prng, b: usize) -> Vec<f64> {
    // Coarse values so ties occur.
    (0..b).map(|_| prng.below(8) as f64 * 0.25).collect()
}

fn check_topk(prng: &mut Prng) -> Result<CheckResult> {
    let mut failures = 0;
    for _ in 0..500 {
        let b = 1 + prng.below(64);
        let k = 1 + prng.below(b);
        let losses = random_losses(prng, b);
        let plan = trim::select_topk(&Tensor::from_vec(losses.clone())?, k, k as f64 / b as f64)?;
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]));
        order.truncate(k);
        order.sort_unstable();
        if plan.sorted_selection() != order {
            failures += 1;
        }
    }
    Ok(CheckResult {
        name: "top-k selection matches stable sort",
        passed: failures == 0,
        detail: format!("{failures} of 500 cases differ"),
    })
}

fn check_trimmed_grad(prng: &mut Prng) -> Result<CheckResult> {
    let mut failures = 0;
    for _ in 0..100 {
        let b = 1 + prng.below(64);
        let losses = Tensor::from_vec(random_losses(prng, b))?;
        let plan = trim::plan_for(&losses, 0.05 + 0.95 * prng.next_f64())?;
        let mut tape = Tape::new();
        let node = tape.input(losses, true);
        let root = trim::trimmed_mean(&mut tape, node, &plan)?;
        tape.backward(root)?;
        let grad = tape.grad(node).map(|g| g.data().to_vec()).unwrap_or_default();
        let inv = 1.0 / plan.k as f64;
        let ok = grad
            .iter()
            .enumerate()
            .all(|(i, &g)| g == if plan.selected.contains(&i) { inv } else { 0.0 });
        if !ok {
            failures += 1;
        }
    }
    Ok(CheckResult {
        name: "trimmed mean gradient is 1/k on the selection",
        passed: failures == 0,
        detail: format!("{failures} of 100 cases differ"),
    })
}

fn check_schedule() -> Result<CheckResult> {
    let s = TrimSchedule::standard(150)?;
    let ps = (1..=150)
        .map(|e| s.fraction_at_epoch(e))
        .collect::<Result<Vec<_>>>()?;
    let passed = ps[0] == 1.0 && ps[149] == 0.2 && ps.windows(2).all(|w| w[1] <= w[0]);
    Ok(CheckResult {
        name: "fraction schedule endpoints and monotonicity",
        passed,
        detail: format!("p(1)={}, p(150)={}", ps[0], ps[149]),
    })
}

fn check_subset(prng: &mut Prng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for case in 0..10 {
        let (arch, sample, classes) = if case % 2 == 0 {
            (Architecture::Mlp3, vec![12], 4)
        } else {
            (Architecture::TinyCnn, vec![2, 8, 8], 5)
        };
        let mut model = Model::new(arch, &sample, classes)?;
        model.init_params(prng)?;
        let b = 2 + prng.below(12);
        let mut shape = vec![b];
        shape.extend_from_slice(&sample);
        let x = Tensor::randn(prng, &shape, 0.0, 1.0)?;
        let labels: Vec<usize> = (0..b).map(|_| prng.below(classes)).collect();
        let mut tape = Tape::new();
        let losses = crate::model::forward_per_sample_loss(&mut tape, &model, &x, &labels)?;
        let plan = trim::select_topk(&losses.values, 1 + prng.below(b), 0.5)?;
        let masked = trim::masked_gradients(&model, &x, &labels, &plan)?;
        let subset = trim::subset_recompute_gradients(&model, &x, &labels, &plan)?;
        for (m, s) in masked.iter().zip(&subset) {
            let scale = m.max_abs().max(s.max_abs()).max(1e-300);
            let diff = m
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff / scale);
        }
    }
    Ok(CheckResult {
        name: "subset recompute matches masked gradients",
        passed: worst <= 1e-10,
        detail: format!("max relative difference {worst:.3e}"),
    })
}

fn check_p_one() -> Result<CheckResult> {
    let base = r#"{"dataset":{"kind":"blobs","n_train":600,"n_test":200,"dim":8,"classes":4,"cluster_std":1.0},
        "model":"mlp3","epochs":2,"batch_size":64,"seed":3,
        "trim":{"p_start":1.0,"p_end":1.0}}"#;
    let cfg = parse_config(base)?;
    let data = prepare_data(&cfg)?;
    let off = run_trial(&cfg, &data, 3, false)?;
    let on = run_trial(&cfg, &data, 3, true)?;
    let params_equal = off.model.params().iter().zip(on.model.params()).all(|(a, b)| {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let csv_equal = emit_csv(&off.rows)? == emit_csv(&on.rows)?;
    Ok(CheckResult {
        name: "trimming at p=1 reproduces the untrimmed run",
        passed: params_equal && csv_equal,
        detail: format!("parameters equal: {params_equal}, csv equal: {csv_equal}"),
    })
}

/// Runs all self-checks. Takes a few seconds.
pub fn selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let mut prng = Prng::derive(seed, 0);
    let mut out = vec![
        check_topk(&mut prng)?,
        check_trimmed_grad(&mut prng)?,
        check_schedule()?,
        check_subset(&mut prng)?,
        check_p_one()?,
    ];
    for (name, report) in gradcheck_suite(seed)? {
        out.push(CheckResult {
            name: "finite-difference gradient check",
            passed: report.passed(),
            detail: format!("{name}: max relative error {:.3e}", report.max_rel_error()),
        });
    }
    Ok(out)
}
