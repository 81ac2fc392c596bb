//! Adam with parameter groups that may split a tensor by rows.

use std::collections::BTreeMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat, ParamId, ParamStore};
use crate::{Error, Result};

/// Part of a tensor assigned to a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rows {
    All,
    Only(Vec<usize>),
    Except(Vec<usize>),
}

impl Rows {
    fn contains(&self, row: usize) -> bool {
        match self {
            Rows::All => true,
            Rows::Only(r) => r.contains(&row),
            Rows::Except(r) => !r.contains(&row),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub members: Vec<(ParamId, Rows)>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, lr: f64) -> Self {
        ParamGroup {
            name: name.into(),
            lr,
            members: Vec::new(),
        }
    }

    pub fn with(mut self, id: ParamId, rows: Rows) -> Self {
        self.members.push((id, rows));
        self
    }

    pub fn with_all(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        self.members.extend(ids.into_iter().map(|id| (id, Rows::All)));
        self
    }
}

/// Check that every row of every listed tensor belongs to exactly one
/// group, and that tensors not listed are absent from all groups.
pub fn check_partition(store: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
    let mut by_param: BTreeMap<ParamId, Vec<&Rows>> = BTreeMap::new();
    for g in groups {
        for (id, rows) in &g.members {
            if id.0 >= store.len() {
                return Err(Error::invalid(format!("group {} names unknown param {}", g.name, id.0)));
            }
            by_param.entry(*id).or_default().push(rows);
        }
    }
    for (id, sels) in by_param {
        let n = store.get(id).nrows();
        for row in 0..n {
            let hits = sels.iter().filter(|r| r.contains(row)).count();
            if hits != 1 {
                return Err(Error::invalid(format!(
                    "row {row} of {} is in {hits} groups",
                    store.name(id)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }
}

/// Bias-corrected Adam. Moment estimates are kept per tensor; a tensor
/// without a gradient in a step is left untouched, including its moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. Each group's rate is multiplied by `lr_factor` (the
    /// schedule value relative to the peak).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        groups: &[ParamGroup],
        lr_factor: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        // Per-row learning rates for each tensor that some group touches.
        let mut row_lr: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for g in groups {
            for (id, rows) in &g.members {
                let n = store.get(*id).nrows();
                let entry = row_lr.entry(*id).or_insert_with(|| vec![0.0; n]);
                for (r, lr) in entry.iter_mut().enumerate() {
                    if rows.contains(r) {
                        *lr = g.lr * lr_factor;
                    }
                }
            }
        }
        for (id, lrs) in row_lr {
            let Some(g) = grads.get(id) else { continue };
            let param = store.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            for (r, ((mut prow, mut mrow), (mut vrow, grow))) in param
                .axis_iter_mut(Axis(0))
                .zip(m.axis_iter_mut(Axis(0)))
                .zip(v.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))))
                .enumerate()
            {
                let lr = lrs[r];
                for j in 0..grow.len() {
                    let gj = grow[j];
                    mrow[j] = beta1 * mrow[j] + (1.0 - beta1) * gj;
                    vrow[j] = beta2 * vrow[j] + (1.0 - beta2) * gj * gj;
                    if lr != 0.0 {
                        let mhat = mrow[j] / bc1;
                        let vhat = vrow[j] / bc2;
                        prow[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]]);
        let mut grads = Gradients::default();
        grads.set(id, array![[0.5, -3.0]]);
        let mut adam = Adam::new(AdamConfig::default());
        let groups = [ParamGroup::new("all", 0.1).with(id, Rows::All)];
        adam.step(&mut store, &grads, &groups, 1.0);
        let w = store.get(id);
        assert!((w[[0, 0]] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-6))).abs() < 1e-12);
        assert!((w[[0, 1]] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-6))).abs() < 1e-12);
    }

    #[test]
    fn row_groups_use_their_rates() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Mat::zeros((3, 2)));
        let mut grads = Gradients::default();
        grads.set(id, Mat::from_elem((3, 2), 1.0));
        let groups = [
            ParamGroup::new("base", 2e-5).with(id, Rows::Except(vec![1])),
            ParamGroup::new("tier", 1e-4).with(id, Rows::Only(vec![1])),
        ];
        check_partition(&store, &groups).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads, &groups, 1.0);
        let w = store.get(id);
        let ratio = w[[1, 0]] / w[[0, 0]];
        assert!((ratio - 5.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn partition_detects_overlap_and_gaps() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Mat::zeros((3, 2)));
        let overlap = [
            ParamGroup::new("a", 1.0).with(id, Rows::All),
            ParamGroup::new("b", 1.0).with(id, Rows::Only(vec![0])),
        ];
        assert!(check_partition(&store, &overlap).is_err());
        let gap = [ParamGroup::new("a", 1.0).with(id, Rows::Only(vec![0]))];
        assert!(check_partition(&store, &gap).is_err());
    }
}
