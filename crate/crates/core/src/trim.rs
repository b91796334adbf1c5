//! Mini-batch trimming.
//!
//! Each mini-batch is reduced to the mean loss of its hardest samples: the
//! per-sample losses are ranked, the top `k = max(1, ceil(p·B))` are kept and
//! averaged. The kept fraction `p` starts at `p_start` in the first epoch and
//! falls linearly to `p_end` in the last one, staying constant within an epoch.

use std::cmp::Ordering;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{collect_grads, forward_per_sample_loss, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub total_epochs: usize,
}

impl TrimSchedule {
    pub fn new(p_start: f64, p_end: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0 < p_end && p_end <= p_start && p_start <= 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < p_end <= p_start <= 1, got p_start={p_start}, p_end={p_end}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::Parameter("total_epochs must be at least 1".into()));
        }
        Ok(TrimSchedule {
            p_start,
            p_end,
            total_epochs,
        })
    }

    /// 1.0 → 0.2 over `total_epochs`.
    pub fn standard(total_epochs: usize) -> Result<Self> {
        Self::new(1.0, 0.2, total_epochs)
    }

    /// Kept fraction during 1-based `epoch`.
    pub fn fraction_at_epoch(&self, epoch: usize) -> Result<f64> {
        let e = self.total_epochs;
        if epoch == 0 || epoch > e {
            return Err(Error::contract(format!("epoch {epoch} outside 1..={e}")));
        }
        if e == 1 || epoch == 1 {
            return Ok(self.p_start);
        }
        if epoch == e {
            return Ok(self.p_end);
        }
        let t = (epoch - 1) as f64 / (e - 1) as f64;
        Ok(self.p_start + t * (self.p_end - self.p_start))
    }
}

/// `max(1, ceil(p·B))`.
pub fn trim_count(batch_size: usize, p: f64) -> usize {
    debug_assert!(batch_size >= 1 && p > 0.0 && p <= 1.0);
    ((p * batch_size as f64).ceil() as usize).clamp(1, batch_size)
}

/// Which samples of one batch contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimPlan {
    pub p: f64,
    pub k: usize,
    /// Descending by loss; equal losses by ascending batch position.
    pub selected: Vec<usize>,
}

impl TrimPlan {
    /// Selected positions in ascending order.
    pub fn sorted_selection(&self) -> Vec<usize> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }
}

fn by_loss_desc(losses: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest losses.
///
/// Partial selection followed by a sort of the kept prefix; the ordering is
/// total (loss descending, then index ascending), so the result equals a full
/// stable descending sort truncated at `k`.
pub fn select_topk(losses: &Tensor, k: usize, p: f64) -> Result<TrimPlan> {
    let b = losses.len();
    if losses.rank() != 1 {
        return Err(Error::shape(format!(
            "expected a loss vector, got {:?}",
            losses.shape()
        )));
    }
    if k == 0 || k > b {
        return Err(Error::contract(format!("k={k} outside 1..={b}")));
    }
    let values = losses.data();
    let cmp = by_loss_desc(values);
    let mut idx: Vec<usize> = (0..b).collect();
    if k < b {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(TrimPlan { p, k, selected: idx })
}

/// Plan for fraction `p` over a loss vector of any batch size.
pub fn plan_for(losses: &Tensor, p: f64) -> Result<TrimPlan> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("fraction {p} outside (0, 1]")));
    }
    select_topk(losses, trim_count(losses.len(), p), p)
}

/// Records the trimmed-mean objective on `tape`.
///
/// The backward pass sends `1/k` to each selected loss and zero elsewhere;
/// the selection itself is treated as constant.
pub fn trimmed_mean(tape: &mut Tape, losses: NodeId, plan: &TrimPlan) -> Result<NodeId> {
    if plan.selected.len() != plan.k {
        return Err(Error::contract("plan selection length differs from k"));
    }
    tape.trimmed_mean(losses, &plan.selected)
}

/// Gradients of the trimmed mean taken through the full batch: every sample
/// runs forward and backward, unselected ones receive zero upstream gradient.
pub fn masked_gradients(model: &Model, x: &Tensor, labels: &[usize], plan: &TrimPlan) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let losses = forward_per_sample_loss(&mut tape, model, x, labels)?;
    let root = trimmed_mean(&mut tape, losses.node, plan)?;
    tape.backward(root)?;
    collect_grads(&tape, &losses.params)
}

/// Gradients of the trimmed mean computed on the selected samples only.
///
/// The selected rows are gathered (ascending batch order) into a sub-batch
/// and the plain mean loss of that sub-batch is differentiated. Equivalent to
/// [`masked_gradients`] whenever no layer couples samples within a batch.
pub fn subset_recompute_gradients(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    plan: &TrimPlan,
) -> Result<Vec<Tensor>> {
    if model.is_batch_coupled() {
        return Err(Error::contract(
            "subset recompute requires a model without batch-coupled layers",
        ));
    }
    if labels.len() != x.rows() {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.rows()
        )));
    }
    let rows = plan.sorted_selection();
    let sub_x = kernels::gather_rows(x, &rows)?;
    let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let mut tape = Tape::new();
    let losses = forward_per_sample_loss(&mut tape, model, &sub_x, &sub_labels)?;
    let root = tape.mean(losses.node)?;
    tape.backward(root)?;
    collect_grads(&tape, &losses.params)
}
