//! Shapley attributions for tree ensembles.
//!
//! The value of a feature coalition `S` is the path-dependent expectation: at a
//! split on a feature in `S` follow the row, otherwise average both children by
//! their training cover. [`tree_shap`] computes the exact attributions in
//! polynomial time; [`brute_force_shapley`] enumerates every coalition and is
//! kept as a reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ml::{TreeEnsemble, TreeNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub attributions: Vec<f64>,
    pub feature_values: Vec<f64>,
    pub model_output: f64,
}

impl ShapExplanation {
    /// `|base + Σφ − f(x)|`.
    pub fn local_accuracy_gap(&self) -> f64 {
        (self.base_value + self.attributions.iter().sum::<f64>() - self.model_output).abs()
    }
}

pub const BRUTE_FORCE_MAX_FEATURES: usize = 15;

fn check_row(ensemble: &TreeEnsemble, row: &[f64]) -> Result<()> {
    if row.len() != ensemble.n_features {
        return Err(Error::Dimension {
            expected: ensemble.n_features,
            got: row.len(),
        });
    }
    if ensemble.trees.is_empty() {
        return Err(Error::MalformedTree("ensemble has no trees".into()));
    }
    Ok(())
}

/// Checks covers add up, parents have positive cover and indices are in range.
pub fn validate_tree(tree: &TreeNode, n_features: usize) -> Result<()> {
    match tree {
        TreeNode::Leaf { value, cover } => {
            if !value.is_finite() || !(*cover >= 0.0) {
                return Err(Error::MalformedTree(format!("leaf with value {value} and cover {cover}")));
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            cover,
            left,
            right,
        } => {
            if *feature >= n_features {
                return Err(Error::MalformedTree(format!(
                    "split on feature {feature} but the model has {n_features} features"
                )));
            }
            if threshold.is_nan() {
                return Err(Error::MalformedTree("NaN split threshold".into()));
            }
            let sum = left.cover() + right.cover();
            if !(*cover > 0.0) || (sum - cover).abs() > 1e-9 * cover {
                return Err(Error::MalformedTree(format!(
                    "node cover {cover} differs from the sum of its children's covers {sum}"
                )));
            }
            validate_tree(left, n_features)?;
            validate_tree(right, n_features)?;
        }
    }
    Ok(())
}

/// Path-dependent value of the coalition given as a bit mask.
fn coalition_value(node: &TreeNode, row: &[f64], mask: u32) -> f64 {
    match node {
        TreeNode::Leaf { value, .. } => *value,
        TreeNode::Split {
            feature,
            threshold,
            cover,
            left,
            right,
        } => {
            if mask >> feature & 1 == 1 {
                let child = if row[*feature] < *threshold { left } else { right };
                coalition_value(child, row, mask)
            } else {
                (left.cover() * coalition_value(left, row, mask) + right.cover() * coalition_value(right, row, mask))
                    / cover
            }
        }
    }
}

/// Exact Shapley values by enumerating all `2^p` coalitions.
pub fn brute_force_shapley(ensemble: &TreeEnsemble, row: &[f64]) -> Result<ShapExplanation> {
    check_row(ensemble, row)?;
    let p = row.len();
    if p > BRUTE_FORCE_MAX_FEATURES {
        return Err(Error::invalid(format!(
            "brute-force Shapley values are limited to {BRUTE_FORCE_MAX_FEATURES} features, got {p}"
        )));
    }
    for t in &ensemble.trees {
        validate_tree(t, p)?;
    }
    let w = ensemble.tree_weight();
    let v: Vec<f64> = (0..1u32 << p)
        .map(|mask| ensemble.base_score + w * ensemble.trees.iter().map(|t| coalition_value(t, row, mask)).sum::<f64>())
        .collect();
    // |S|!(p−|S|−1)!/p!
    let fact: Vec<f64> = (0..=p).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let weight: Vec<f64> = (0..p).map(|s| fact[s] * fact[p - s - 1] / fact[p]).collect();
    let mut phi = vec![0.0; p];
    for (j, phi_j) in phi.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for mask in 0..1u32 << p {
            if mask & bit == 0 {
                *phi_j += weight[mask.count_ones() as usize] * (v[(mask | bit) as usize] - v[mask as usize]);
            }
        }
    }
    Ok(ShapExplanation {
        base_value: v[0],
        attributions: phi,
        feature_values: row.to_vec(),
        model_output: ensemble.predict_row(row),
    })
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let fi = i as f64;
        path[i + 1].pweight += one_fraction * path[i].pweight * (fi + 1.0) / (d + 1.0);
        path[i].pweight = zero_fraction * path[i].pweight * (d - fi) / (d + 1.0);
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * (d + 1.0) / ((fi + 1.0) * one_fraction);
            next_one = tmp - path[i].pweight * zero_fraction * (d - fi) / (d + 1.0);
        } else {
            path[i].pweight = path[i].pweight * (d + 1.0) / (zero_fraction * (d - fi));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one_fraction != 0.0 {
            let tmp = next_one * (d + 1.0) / ((fi + 1.0) * one_fraction);
            total += tmp;
            next_one = path[i].pweight - tmp * zero_fraction * (d - fi) / (d + 1.0);
        } else if zero_fraction != 0.0 {
            total += path[i].pweight / zero_fraction * (d + 1.0) / (d - fi);
        }
    }
    total
}

fn recurse(
    node: &TreeNode,
    row: &[f64],
    phi: &mut [f64],
    parent: &[PathElement],
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    let mut path = parent.to_vec();
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match node {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                if let Some(f) = el.feature {
                    phi[f] += w * (el.one_fraction - el.zero_fraction) * value;
                }
            }
        }
        TreeNode::Split {
            feature: split,
            threshold,
            cover,
            left,
            right,
        } => {
            let (hot, cold) = if row[*split] < *threshold { (left, right) } else { (right, left) };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == Some(*split)) {
                in_zero = path[k].zero_fraction;
                in_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            let hot_zero = hot.cover() / cover;
            let cold_zero = cold.cover() / cover;
            recurse(hot, row, phi, &path, hot_zero * in_zero, in_one, Some(*split));
            recurse(cold, row, phi, &path, cold_zero * in_zero, 0.0, Some(*split));
        }
    }
}

/// Attributions for one tree, unscaled.
pub fn tree_shap_single(tree: &TreeNode, row: &[f64]) -> Vec<f64> {
    let mut phi = vec![0.0; row.len()];
    recurse(tree, row, &mut phi, &[], 1.0, 1.0, None);
    phi
}

/// Exact path-dependent TreeSHAP summed over the ensemble.
pub fn tree_shap(ensemble: &TreeEnsemble, row: &[f64]) -> Result<ShapExplanation> {
    check_row(ensemble, row)?;
    for t in &ensemble.trees {
        validate_tree(t, row.len())?;
    }
    Ok(explain_unchecked(ensemble, row))
}

fn explain_unchecked(ensemble: &TreeEnsemble, row: &[f64]) -> ShapExplanation {
    let w = ensemble.tree_weight();
    let mut phi = vec![0.0; row.len()];
    let mut expected = 0.0;
    for t in &ensemble.trees {
        for (a, b) in phi.iter_mut().zip(tree_shap_single(t, row)) {
            *a += w * b;
        }
        expected += t.expected_value();
    }
    ShapExplanation {
        base_value: ensemble.base_score + w * expected,
        attributions: phi,
        feature_values: row.to_vec(),
        model_output: ensemble.predict_row(row),
    }
}

/// Explanations for every row of `x`, computed in parallel.
pub fn explain_rows(ensemble: &TreeEnsemble, x: &nalgebra::DMatrix<f64>) -> Result<Vec<ShapExplanation>> {
    if x.ncols() != ensemble.n_features {
        return Err(Error::Dimension {
            expected: ensemble.n_features,
            got: x.ncols(),
        });
    }
    if ensemble.trees.is_empty() {
        return Err(Error::MalformedTree("ensemble has no trees".into()));
    }
    for t in &ensemble.trees {
        validate_tree(t, x.ncols())?;
    }
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            explain_unchecked(ensemble, &row)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    /// Mean |φ_j| indexed by feature.
    pub mean_abs: Vec<f64>,
    /// Feature indices by decreasing importance, ties by index.
    pub order: Vec<usize>,
}

impl GlobalImportance {
    pub fn from_explanations(explanations: &[ShapExplanation]) -> Result<Self> {
        let first = explanations.first().ok_or_else(|| Error::Empty("no explanations to aggregate".into()))?;
        let p = first.attributions.len();
        let mut mean_abs = vec![0.0; p];
        for e in explanations {
            for (m, a) in mean_abs.iter_mut().zip(&e.attributions) {
                *m += a.abs();
            }
        }
        let n = explanations.len() as f64;
        mean_abs.iter_mut().for_each(|m| *m /= n);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
        Ok(GlobalImportance { mean_abs, order })
    }
}

pub fn global_importance(ensemble: &TreeEnsemble, x: &nalgebra::DMatrix<f64>) -> Result<GlobalImportance> {
    if x.nrows() == 0 {
        return Err(Error::Empty("dataset has no rows".into()));
    }
    GlobalImportance::from_explanations(&explain_rows(ensemble, x)?)
}
