//! Greedy global L1 pruning of base kernels under an accuracy budget.

use std::fmt::Write as _;

use crate::backbone::Backbone;
use crate::error::{ensure, Result};
use crate::train::{evaluate, Augment, Dataset};
use crate::tensor::Scalar;

pub const PRUNE_CSV_HEADER: &str = "layer,head,surviving,original";

#[derive(Debug, Clone, PartialEq)]
pub struct PruneLayer {
    pub name: String,
    /// `(surviving, original)` per head.
    pub heads: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<PruneLayer>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub tolerance: f64,
    pub removed: usize,
}

impl PruneReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{PRUNE_CSV_HEADER}\n");
        for l in &self.layers {
            for (h, (surv, orig)) in l.heads.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", l.name, h, surv, orig);
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "accuracy_before={} accuracy_after={} drop={} tolerance={} removed={} surviving={}",
            self.accuracy_before,
            self.accuracy_after,
            self.accuracy_before - self.accuracy_after,
            self.tolerance,
            self.removed,
            self.surviving()
        )
    }

    pub fn surviving(&self) -> usize {
        self.layers.iter().flat_map(|l| l.heads.iter().map(|h| h.0)).sum()
    }

    /// Mean surviving base kernels per head of each layer.
    pub fn mean_per_layer(&self) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.heads.iter().map(|h| h.0 as f64).sum::<f64>() / l.heads.len().max(1) as f64))
            .collect()
    }
}

/// Zeroes base kernels of `model` in ascending global L1 order, one at a time,
/// re-evaluating top-1 on `val` after each removal. Stops at (and reverts) the first
/// removal whose accuracy falls more than `tolerance` below the unpruned accuracy.
pub fn l1_prune<T: Scalar>(model: &mut Backbone<T>, val: &Dataset, aug: &Augment, batch: usize, tolerance: f64) -> Result<PruneReport> {
    ensure!(!val.is_empty(), "pruning needs a non-empty validation set");
    ensure!(tolerance >= 0.0, "pruning tolerance must be non-negative");
    let before = evaluate(model, val, aug, batch)?;
    let mut candidates = Vec::new();
    let mut layers = Vec::new();
    for (li, (name, net)) in model.banks().into_iter().enumerate() {
        let v = net.bank();
        layers.push(PruneLayer { name, heads: vec![(v.bases(), v.bases()); v.heads()] });
        for h in 0..v.heads() {
            for i in 0..v.bases() {
                candidates.push((v.l1(h, i), li, h, i));
            }
        }
    }
    ensure!(!candidates.is_empty(), "model has no base kernels to prune");
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut after = before;
    let mut removed = 0;
    let slack = 1e-12;
    for (_, li, h, i) in candidates {
        let saved = {
            let mut banks = model.banks_mut();
            let mut view = banks[li].1.bank_mut();
            let saved = view.view().kernel(h, i);
            view.zero_kernel(h, i);
            saved
        };
        let acc = evaluate(model, val, aug, batch)?;
        if before - acc > tolerance + slack {
            let mut banks = model.banks_mut();
            let mut view = banks[li].1.bank_mut();
            for (k, v) in saved.into_iter().enumerate() {
                view.set_base(h, i, k, v);
            }
            break;
        }
        after = acc;
        removed += 1;
        layers[li].heads[h].0 -= 1;
    }
    Ok(PruneReport { layers, accuracy_before: before, accuracy_after: after, tolerance, removed })
}
