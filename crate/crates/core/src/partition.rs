//! Split the units of each selected layer into language-agnostic (general)
//! and language-specific groups by the spread of their awareness scores
//! across tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerId, Module};
use crate::neuronscore::{ScoreMatrix, SelectedLayers};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub module: Module,
    pub block: usize,
    /// Threshold value at the general/specific cut.
    pub lambda: f64,
    pub general: Vec<usize>,
    /// Task id → units assigned to that task.
    pub specific: BTreeMap<usize, Vec<usize>>,
}

impl LayerPartition {
    pub fn layer(&self) -> LayerId {
        (self.module, self.block)
    }

    pub fn specific_for(&self, task: usize) -> &[usize] {
        self.specific.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn retained(&self) -> BTreeSet<usize> {
        self.general.iter().chain(self.specific.values().flatten()).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronPartition {
    pub epsilon: f64,
    pub rho: f64,
    pub layers: Vec<LayerPartition>,
}

impl NeuronPartition {
    pub fn empty() -> Self {
        Self { epsilon: 0.0, rho: 0.0, layers: Vec::new() }
    }

    pub fn layer(&self, module: Module, block: usize) -> Option<&LayerPartition> {
        self.layers.iter().find(|l| l.module == module && l.block == block)
    }

    /// Checks that the groups of every layer are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let mut seen = BTreeSet::new();
            for &u in l.general.iter().chain(l.specific.values().flatten()) {
                if !seen.insert(u) {
                    return Err(Error::Validation(format!(
                        "unit {u} of {} block {} appears in more than one group",
                        l.module, l.block
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("partition serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Population standard deviation across tasks of each unit of `layer`, in unit order.
pub fn variance_by_neuron(x: &ScoreMatrix, layer: LayerId) -> Result<Vec<f64>> {
    if x.tasks.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 tasks, got {}", x.tasks.len())));
    }
    Ok(x.layer_columns(layer).into_iter().map(|col| population_std(&x.column(col))).collect())
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Result of splitting one layer at the ε-quantile of σ.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSplit {
    pub lambda: f64,
    pub general: Vec<usize>,
    pub specific: Vec<usize>,
}

/// Sorts `(unit, σ)` ascending (ties by lower unit) and cuts at rank `⌊ε·p⌋`.
/// Units ranked below the cut are general. `λ` is σ at the cut rank, clamped to `p − 1`.
pub fn split_general_specific(sigma: &[(usize, f64)], epsilon: f64) -> Result<LayerSplit> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Validation(format!("epsilon must be in [0, 1], got {epsilon}")));
    }
    let p = sigma.len();
    let mut order = sigma.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let cut = ((epsilon * p as f64).floor() as usize).min(p);
    let lambda = if p == 0 { 0.0 } else { order[cut.min(p - 1)].1 };
    let mut general: Vec<usize> = order[..cut].iter().map(|&(u, _)| u).collect();
    let mut specific: Vec<usize> = order[cut..].iter().map(|&(u, _)| u).collect();
    general.sort_unstable();
    specific.sort_unstable();
    Ok(LayerSplit { lambda, general, specific })
}

/// Assigns each unit to the task with the highest score; ties go to the lowest task index.
pub fn assign_specific_to_tasks(x: &ScoreMatrix, layer: LayerId, units: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let cols = x.layer_columns(layer);
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &unit in units {
        let scores = x.column(cols[unit]);
        let mut best = 0;
        for (t, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = t;
            }
        }
        out.entry(x.tasks[best]).or_default().push(unit);
    }
    out
}

pub fn build_partition(x: &ScoreMatrix, selected: &SelectedLayers, epsilon: f64, rho: f64) -> Result<NeuronPartition> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Validation(format!("rho must be in [0, 1], got {rho}")));
    }
    let mut layers = Vec::new();
    for layer in selected.layers() {
        let sigma = variance_by_neuron(x, layer)?;
        let cols = x.layer_columns(layer);
        let total = cols.len();
        let keep = ((rho * total as f64).ceil() as usize).min(total);
        let mut by_importance: Vec<(usize, f64)> =
            cols.iter().enumerate().map(|(u, &c)| (u, x.column(c).iter().sum::<f64>() / x.tasks.len() as f64)).collect();
        by_importance.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut retained: Vec<usize> = by_importance[..keep].iter().map(|&(u, _)| u).collect();
        retained.sort_unstable();

        let split = split_general_specific(&retained.iter().map(|&u| (u, sigma[u])).collect::<Vec<_>>(), epsilon)?;
        let specific = assign_specific_to_tasks(x, layer, &split.specific);
        layers.push(LayerPartition { module: layer.0, block: layer.1, lambda: split.lambda, general: split.general, specific });
    }
    let p = NeuronPartition { epsilon, rho, layers };
    p.validate()?;
    Ok(p)
}
