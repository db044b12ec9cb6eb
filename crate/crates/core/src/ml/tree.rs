//! Regression trees, random forests and second-order gradient boosting.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
        cover: f64,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        cover: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Leaf { cover, .. } | TreeNode::Split { cover, .. } => *cover,
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if row[*feature] < *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    /// Largest feature index used by any split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split { feature, left, right, .. } => {
                Some((*feature).max(left.max_feature().unwrap_or(0)).max(right.max_feature().unwrap_or(0)))
            }
        }
    }

    /// Cover-weighted mean of leaf values.
    pub fn expected_value(&self) -> f64 {
        match self {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Split { left, right, cover, .. } => {
                (left.cover() * left.expected_value() + right.cover() * right.expected_value()) / cover
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Single,
    Average,
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<TreeNode>,
    pub base_score: f64,
    pub combiner: Combiner,
    pub learning_rate: f64,
    pub n_features: usize,
}

impl TreeEnsemble {
    /// Weight applied to each tree's output.
    pub fn tree_weight(&self) -> f64 {
        match self.combiner {
            Combiner::Single => 1.0,
            Combiner::Average => 1.0 / self.trees.len() as f64,
            Combiner::Additive => self.learning_rate,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let w = self.tree_weight();
        self.base_score + w * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}

/// Split criterion and leaf rule shared by CART and boosting. Both operate on
/// a per-row target: `y` for CART and the negative gradient `y − ŷ` for boosting.
#[derive(Debug, Clone, Copy)]
struct Grower {
    max_depth: Option<usize>,
    min_weight: f64,
    lambda: f64,
    alpha: f64,
    boosting: bool,
}

impl Grower {
    fn leaf_value(&self, sum: f64, n: f64) -> f64 {
        if self.boosting {
            sum.signum() * (sum.abs() - self.alpha).max(0.0) / (n + self.lambda)
        } else {
            sum / n
        }
    }

    fn score(&self, sum: f64, n: f64) -> f64 {
        sum * sum / (n + self.lambda)
    }

    fn gain(&self, sl: f64, nl: f64, sr: f64, nr: f64, s: f64, n: f64) -> f64 {
        let g = self.score(sl, nl) + self.score(sr, nr) - self.score(s, n);
        if self.boosting {
            0.5 * g
        } else {
            g
        }
    }
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow(
    x: &DMatrix<f64>,
    target: &[f64],
    rows: &mut [usize],
    depth: usize,
    g: &Grower,
    features: &mut dyn FnMut() -> Vec<usize>,
) -> TreeNode {
    let n = rows.len() as f64;
    let sum: f64 = rows.iter().map(|&r| target[r]).sum();
    let leaf = TreeNode::Leaf {
        value: g.leaf_value(sum, n),
        cover: n,
    };
    let first = target[rows[0]];
    if rows.iter().all(|&r| target[r] == first) || g.max_depth.is_some_and(|d| depth >= d) || n < 2.0 * g.min_weight {
        return match leaf {
            // keep a pure node's value exact rather than a rounded mean
            TreeNode::Leaf { cover, .. } if !g.boosting && rows.iter().all(|&r| target[r] == first) => {
                TreeNode::Leaf { value: first, cover }
            }
            other => other,
        };
    }

    let mut best: Option<Best> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for f in features() {
        order.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]));
        let mut sl = 0.0;
        for k in 0..order.len() - 1 {
            sl += target[order[k]];
            let (lo, hi) = (x[(order[k], f)], x[(order[k + 1], f)]);
            if lo == hi {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = n - nl;
            if nl < g.min_weight || nr < g.min_weight {
                continue;
            }
            let gain = g.gain(sl, nl, sum - sl, nr, sum, n);
            let threshold = lo + (hi - lo) / 2.0;
            let better = match &best {
                None => true,
                Some(b) => gain > b.gain || (gain == b.gain && (f, threshold) < (b.feature, b.threshold)),
            };
            if gain > 0.0 && better {
                best = Some(Best {
                    gain,
                    feature: f,
                    threshold,
                });
            }
        }
    }
    let Some(best) = best else { return leaf };
    let mut i = 0;
    for k in 0..rows.len() {
        if x[(rows[k], best.feature)] < best.threshold {
            rows.swap(i, k);
            i += 1;
        }
    }
    let (l, r) = rows.split_at_mut(i);
    let left = grow(x, target, l, depth + 1, g, features);
    let right = grow(x, target, r, depth + 1, g, features);
    TreeNode::Split {
        feature: best.feature,
        threshold: best.threshold,
        cover: n,
        left: Box::new(left),
        right: Box::new(right),
    }
}

fn check_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.is_empty() || x.ncols() == 0 {
        return Err(Error::invalid("tree fit needs at least one row and one feature"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 4, min_leaf: 5 }
    }
}

pub fn fit_tree(x: &DMatrix<f64>, y: &[f64], params: TreeParams) -> Result<TreeEnsemble> {
    check_xy(x, y)?;
    if params.max_depth == 0 || params.min_leaf == 0 {
        return Err(Error::invalid("max_depth and min_leaf must be at least 1"));
    }
    let g = Grower {
        max_depth: Some(params.max_depth),
        min_weight: params.min_leaf as f64,
        lambda: 0.0,
        alpha: 0.0,
        boosting: false,
    };
    let mut rows: Vec<usize> = (0..y.len()).collect();
    let p = x.ncols();
    let tree = grow(x, y, &mut rows, 0, &g, &mut || (0..p).collect());
    Ok(TreeEnsemble {
        trees: vec![tree],
        base_score: 0.0,
        combiner: Combiner::Single,
        learning_rate: 1.0,
        n_features: p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_fraction: f64,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 6,
            min_leaf: 5,
            feature_fraction: 1.0 / 3.0,
            bootstrap: true,
        }
    }
}

pub fn fit_forest(x: &DMatrix<f64>, y: &[f64], params: ForestParams, seed: u64) -> Result<TreeEnsemble> {
    check_xy(x, y)?;
    if params.n_trees == 0 || params.max_depth == 0 || params.min_leaf == 0 {
        return Err(Error::invalid("n_trees, max_depth and min_leaf must be at least 1"));
    }
    if !(params.feature_fraction > 0.0 && params.feature_fraction <= 1.0) {
        return Err(Error::invalid("feature_fraction must lie in (0, 1]"));
    }
    let (n, p) = x.shape();
    let m = ((params.feature_fraction * p as f64).ceil() as usize).clamp(1, p);
    let g = Grower {
        max_depth: Some(params.max_depth),
        min_weight: params.min_leaf as f64,
        lambda: 0.0,
        alpha: 0.0,
        boosting: false,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut pick = || {
                if m == p {
                    (0..p).collect()
                } else {
                    let mut f = sample(&mut rng, p, m).into_vec();
                    f.sort_unstable();
                    f
                }
            };
            grow(x, y, &mut rows, 0, &g, &mut pick)
        })
        .collect();
    Ok(TreeEnsemble {
        trees,
        base_score: 0.0,
        combiner: Combiner::Average,
        learning_rate: 1.0,
        n_features: p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    /// `None` grows until no admissible split remains.
    pub max_depth: Option<usize>,
    pub lambda_l2: f64,
    pub alpha_l1: f64,
    pub min_child_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_rounds: 200,
            learning_rate: 0.05,
            max_depth: Some(3),
            lambda_l2: 1.0,
            alpha_l1: 0.0,
            min_child_weight: 5.0,
        }
    }
}

/// Per-round training MSE is returned alongside the model.
pub fn fit_boosted_with_trace(x: &DMatrix<f64>, y: &[f64], params: BoostParams) -> Result<(TreeEnsemble, Vec<f64>)> {
    check_xy(x, y)?;
    if params.n_rounds == 0 {
        return Err(Error::invalid("n_rounds must be at least 1"));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(Error::invalid("learning_rate must lie in (0, 1]"));
    }
    if params.lambda_l2 < 0.0 || params.alpha_l1 < 0.0 || params.min_child_weight < 0.0 {
        return Err(Error::invalid("regularisation parameters must be nonnegative"));
    }
    if params.max_depth == Some(0) {
        return Err(Error::invalid("max_depth must be at least 1"));
    }
    let (n, p) = x.shape();
    let base = y.iter().sum::<f64>() / n as f64;
    let g = Grower {
        max_depth: params.max_depth,
        min_weight: params.min_child_weight.max(1.0),
        lambda: params.lambda_l2,
        alpha: params.alpha_l1,
        boosting: true,
    };
    let mut pred = vec![base; n];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut trace = Vec::with_capacity(params.n_rounds);
    let mut resid = vec![0.0; n];
    for _ in 0..params.n_rounds {
        for i in 0..n {
            resid[i] = y[i] - pred[i];
        }
        let mut rows: Vec<usize> = (0..n).collect();
        let tree = grow(x, &resid, &mut rows, 0, &g, &mut || (0..p).collect());
        for (i, pi) in pred.iter_mut().enumerate() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            *pi += params.learning_rate * tree.predict(&row);
        }
        trace.push(y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64);
        trees.push(tree);
    }
    Ok((
        TreeEnsemble {
            trees,
            base_score: base,
            combiner: Combiner::Additive,
            learning_rate: params.learning_rate,
            n_features: p,
        },
        trace,
    ))
}

pub fn fit_boosted(x: &DMatrix<f64>, y: &[f64], params: BoostParams) -> Result<TreeEnsemble> {
    fit_boosted_with_trace(x, y, params).map(|(m, _)| m)
}
