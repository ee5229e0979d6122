//! Weak learners for boosting: componentwise simple least squares and
//! greedy variance-reduction regression trees.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("no usable covariate: every candidate column is identically zero")]
    NoUsableCovariate,
    #[error("features have {rows} rows but residuals have {len}")]
    LengthMismatch { rows: usize, len: usize },
    #[error("covariate index {index} out of range for input of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty training set")]
    Empty,
}

/// Per-column centering and scaling computed on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation per column. Constant columns
    /// get scale 1, so they standardize to all zeros.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows() as f64;
        let mut means = Vec::with_capacity(features.ncols());
        let mut scales = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            means.push(mean);
            scales.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        Self { means, scales }
    }

    pub fn identity(p: usize) -> Self {
        Self {
            means: vec![0.0; p],
            scales: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.means[j]) / self.scales[j]
        })
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// `g(x) = coefficient * x[covariate_index]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentTerm {
    pub covariate_index: usize,
    pub coefficient: f64,
}

impl ComponentTerm {
    pub fn predict(&self, x: &[f64]) -> Result<f64, LearnerError> {
        x.get(self.covariate_index)
            .map(|v| self.coefficient * v)
            .ok_or(LearnerError::IndexOutOfRange {
                index: self.covariate_index,
                len: x.len(),
            })
    }
}

/// Fits a no-intercept simple regression of `residuals` on each candidate
/// column and keeps the one with the smallest residual sum of squares.
/// Ties go to the smallest column index. `candidates = None` means every
/// column.
pub fn componentwise_ls_fit(
    features: &DMatrix<f64>,
    residuals: &[f64],
    candidates: Option<&[usize]>,
) -> Result<ComponentTerm, LearnerError> {
    if features.nrows() != residuals.len() {
        return Err(LearnerError::LengthMismatch {
            rows: features.nrows(),
            len: residuals.len(),
        });
    }
    let all: Vec<usize>;
    let candidates = match candidates {
        Some(c) => c,
        None => {
            all = (0..features.ncols()).collect();
            &all
        }
    };

    // RSS_j = sum(u^2) - (x'u)^2 / x'x, so minimizing RSS maximizes the
    // explained part.
    let mut best: Option<(f64, ComponentTerm)> = None;
    for &j in candidates {
        let col = features.column(j);
        let sxx: f64 = col.iter().map(|x| x * x).sum();
        if sxx == 0.0 || !sxx.is_finite() {
            continue;
        }
        let sxy: f64 = col.iter().zip(residuals).map(|(x, u)| x * u).sum();
        let explained = sxy * sxy / sxx;
        if best.as_ref().is_none_or(|(b, _)| explained > *b) {
            best = Some((
                explained,
                ComponentTerm {
                    covariate_index: j,
                    coefficient: sxy / sxx,
                },
            ));
        }
    }
    best.map(|(_, t)| t).ok_or(LearnerError::NoUsableCovariate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        covariate_index: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Binary regression tree stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub depth: usize,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value }],
            depth: 0,
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

/// Routes `x` from the root to a leaf; values `<= threshold` go left.
pub fn tree_predict(tree: &RegressionTree, x: &[f64]) -> Result<f64, LearnerError> {
    let mut node = 0;
    loop {
        match tree.nodes[node] {
            TreeNode::Leaf { value } => return Ok(value),
            TreeNode::Split {
                covariate_index,
                threshold,
                left,
                right,
            } => {
                let v = x.get(covariate_index).ok_or(LearnerError::IndexOutOfRange {
                    index: covariate_index,
                    len: x.len(),
                })?;
                node = if *v <= threshold { left } else { right };
            }
        }
    }
}

struct SplitChoice {
    covariate_index: usize,
    threshold: f64,
}

/// Greedy CART on squared error.
///
/// Candidate thresholds are midpoints between consecutive distinct sorted
/// values; both children must keep at least `min_leaf` rows. A node becomes
/// a leaf when it is pure, at `max_depth`, or has no admissible split. Among
/// equal gains the smaller covariate index, then the smaller threshold, wins.
pub fn tree_fit(
    features: &DMatrix<f64>,
    residuals: &[f64],
    max_depth: usize,
    min_leaf: usize,
) -> Result<RegressionTree, LearnerError> {
    if features.nrows() != residuals.len() {
        return Err(LearnerError::LengthMismatch {
            rows: features.nrows(),
            len: residuals.len(),
        });
    }
    if residuals.is_empty() {
        return Err(LearnerError::Empty);
    }
    let min_leaf = min_leaf.max(1);
    let mut tree = RegressionTree {
        nodes: Vec::new(),
        depth: 0,
    };
    let rows: Vec<usize> = (0..residuals.len()).collect();
    grow(&mut tree, features, residuals, rows, 0, max_depth, min_leaf);
    Ok(tree)
}

fn grow(
    tree: &mut RegressionTree,
    features: &DMatrix<f64>,
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
) -> usize {
    let id = tree.nodes.len();
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
    tree.nodes.push(TreeNode::Leaf { value: mean });
    tree.depth = tree.depth.max(depth);

    let pure = rows.iter().all(|&i| y[i] == y[rows[0]]);
    if pure || depth >= max_depth || rows.len() < 2 * min_leaf {
        return id;
    }
    let Some(choice) = best_split(features, y, &rows, min_leaf) else {
        return id;
    };

    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| features[(i, choice.covariate_index)] <= choice.threshold);
    let left = grow(tree, features, y, left_rows, depth + 1, max_depth, min_leaf);
    let right = grow(tree, features, y, right_rows, depth + 1, max_depth, min_leaf);
    tree.nodes[id] = TreeNode::Split {
        covariate_index: choice.covariate_index,
        threshold: choice.threshold,
        left,
        right,
    };
    id
}

fn best_split(
    features: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let base = total * total / n as f64;
    let mut best: Option<(f64, SplitChoice)> = None;
    let mut order = rows.to_vec();

    for j in 0..features.ncols() {
        order.sort_by(|&a, &b| features[(a, j)].total_cmp(&features[(b, j)]));
        let mut left_sum = 0.0;
        for pos in 1..n {
            left_sum += y[order[pos - 1]];
            if pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            let lo = features[(order[pos - 1], j)];
            let hi = features[(order[pos], j)];
            if lo == hi {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / pos as f64
                + right_sum * right_sum / (n - pos) as f64
                - base;
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                let mut threshold = 0.5 * (lo + hi);
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some((
                    gain,
                    SplitChoice {
                        covariate_index: j,
                        threshold,
                    },
                ));
            }
        }
    }
    best.map(|(_, c)| c)
}
