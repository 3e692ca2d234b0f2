//! Gradient-boosted regression trees with squared and pinball losses.
//!
//! Splits are exact greedy over sorted feature values, trees grow best-first
//! up to `num_leaves` within `max_depth`, and missing values (NaN) follow a
//! default branch learned at training time.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("targets must be finite (row {0})")]
    NonFiniteTarget(usize),
    #[error("{rows} rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("model json: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Pinball(f64),
}

impl Loss {
    pub fn value(self, y: f64, pred: f64) -> f64 {
        match self {
            Loss::Squared => (y - pred) * (y - pred),
            Loss::Pinball(p) => {
                let d = y - pred;
                if d >= 0.0 {
                    p * d
                } else {
                    (p - 1.0) * d
                }
            }
        }
    }

    /// Negative gradient with respect to the prediction (up to a constant factor).
    fn pseudo_residual(self, y: f64, pred: f64) -> f64 {
        match self {
            Loss::Squared => y - pred,
            Loss::Pinball(p) => {
                if y > pred {
                    p
                } else {
                    p - 1.0
                }
            }
        }
    }

    /// Constant minimizing the loss over `values`.
    fn optimum(self, values: &[f64]) -> f64 {
        match self {
            Loss::Squared => stats::mean(values).unwrap_or(0.0),
            Loss::Pinball(p) => stats::quantile(values, p).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub num_leaves: usize,
    pub min_child_samples: usize,
    pub learning_rate: f64,
    pub row_subsample: f64,
    pub col_subsample: f64,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_estimators: 50,
            max_depth: 3,
            num_leaves: 8,
            min_child_samples: 50,
            learning_rate: 0.05,
            row_subsample: 0.8,
            col_subsample: 0.8,
            loss: Loss::Squared,
            seed: 42,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<(), GbtError> {
        let bad = |m: &str| Err(GbtError::InvalidConfig(m.to_string()));
        if self.max_depth == 0 || self.max_depth > 30 {
            return bad("max_depth must be in 1..=30");
        }
        if self.num_leaves < 2 || self.num_leaves > 1 << self.max_depth {
            return bad("num_leaves must be in 2..=2^max_depth");
        }
        if self.min_child_samples == 0 {
            return bad("min_child_samples must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.row_subsample > 0.0 && self.row_subsample <= 1.0)
            || !(self.col_subsample > 0.0 && self.col_subsample <= 1.0)
        {
            return bad("subsample fractions must be in (0, 1]");
        }
        if let Loss::Pinball(p) = self.loss {
            if !(p > 0.0 && p < 1.0) {
                return bad("pinball level must be in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Row-major feature matrix; NaN marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    n_rows: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>) -> Self {
        FeatureMatrix {
            names,
            n_rows: 0,
            data: Vec::new(),
        }
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let mut m = FeatureMatrix::new(names);
        for r in rows {
            m.push_row(r);
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "row width");
        self.data.extend_from_slice(row);
        self.n_rows += 1;
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.names.len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.names.len() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let w = self.names.len();
        self.data[i * w + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut m = FeatureMatrix::new(self.names.clone());
        for &i in idx {
            m.push_row(self.row(i));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_index(&self, row: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { .. } => return k,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = row[feature];
                    let go_left = if v.is_nan() { default_left } else { v <= threshold };
                    k = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub feature_names: Vec<String>,
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub loss: Loss,
    pub trees: Vec<Tree>,
}

/// Training artifacts alongside the model.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub train_predictions: Vec<f64>,
    /// Mean training loss before the first tree and after each tree.
    pub loss_history: Vec<f64>,
}

pub fn fit(x: &FeatureMatrix, y: &[f64], config: &GbtConfig) -> Result<GbtModel, GbtError> {
    fit_with_trace(x, y, config).map(|(m, _)| m)
}

pub fn fit_with_trace(
    x: &FeatureMatrix,
    y: &[f64],
    config: &GbtConfig,
) -> Result<(GbtModel, FitTrace), GbtError> {
    config.validate()?;
    if x.n_rows() != y.len() {
        return Err(GbtError::LengthMismatch {
            rows: x.n_rows(),
            targets: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(GbtError::NonFiniteTarget(i));
    }
    let n = y.len();
    let loss = config.loss;
    let base = loss.optimum(y);
    let mut model = GbtModel {
        feature_names: x.names.clone(),
        base_prediction: base,
        learning_rate: config.learning_rate,
        loss,
        trees: Vec::new(),
    };
    let mut pred = vec![base; n];
    let mean_loss = |pred: &[f64]| {
        if n == 0 {
            0.0
        } else {
            y.iter().zip(pred).map(|(&t, &p)| loss.value(t, p)).sum::<f64>() / n as f64
        }
    };
    let mut history = vec![mean_loss(&pred)];
    if n < 2 * config.min_child_samples {
        log::warn!(
            "{n} training rows < 2 x min_child_samples ({}); fitting a constant model",
            config.min_child_samples
        );
        return Ok((
            model,
            FitTrace {
                train_predictions: pred,
                loss_history: history,
            },
        ));
    }

    let n_cols = x.n_cols();
    // Global presort per feature; each tree filters it by subsample membership.
    let presorted: Vec<Vec<usize>> = (0..n_cols)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| !x.get(i, j).is_nan()).collect();
            idx.sort_by(|&a, &b| x.get(a, j).total_cmp(&x.get(b, j)).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_sub = ((n as f64 * config.row_subsample).round() as usize).clamp(1, n);
    let n_feat = ((n_cols as f64 * config.col_subsample).ceil() as usize).clamp(1, n_cols.max(1));
    let mut all_rows: Vec<usize> = (0..n).collect();
    let mut all_cols: Vec<usize> = (0..n_cols).collect();

    for _ in 0..config.n_estimators {
        all_rows.shuffle(&mut rng);
        all_cols.shuffle(&mut rng);
        let mut in_sample = vec![false; n];
        for &i in &all_rows[..n_sub] {
            in_sample[i] = true;
        }
        let mut cols: Vec<usize> = all_cols[..n_feat].to_vec();
        cols.sort_unstable();

        let grad: Vec<f64> = (0..n).map(|i| loss.pseudo_residual(y[i], pred[i])).collect();
        let tree = grow_tree(x, &grad, &in_sample, &presorted, &cols, config);
        let Some(mut tree) = tree else { break };

        // Refit leaf values on all rows against the true loss.
        let leaf_of: Vec<usize> = (0..n).map(|i| tree.leaf_index(x.row(i))).collect();
        let mut members: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for i in 0..n {
            members.entry(leaf_of[i]).or_default().push(y[i] - pred[i]);
        }
        for (&k, resid) in &members {
            tree.nodes[k] = Node::Leaf {
                value: loss.optimum(resid),
            };
        }
        for (k, node) in tree.nodes.iter_mut().enumerate() {
            if matches!(node, Node::Leaf { .. }) && !members.contains_key(&k) {
                *node = Node::Leaf { value: 0.0 };
            }
        }
        for i in 0..n {
            if let Node::Leaf { value } = tree.nodes[leaf_of[i]] {
                pred[i] += config.learning_rate * value;
            }
        }
        let l = mean_loss(&pred);
        debug_assert!(
            l <= history.last().unwrap() + 1e-12 * (1.0 + history.last().unwrap().abs()),
            "training loss increased"
        );
        history.push(l);
        model.trees.push(tree);
    }
    Ok((
        model,
        FitTrace {
            train_predictions: pred,
            loss_history: history,
        },
    ))
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

struct OpenLeaf {
    node: usize,
    depth: usize,
    rows: Vec<usize>,
    /// Node rows with a present value, per candidate column, in presorted order.
    sorted: Vec<Vec<usize>>,
    best: Option<Candidate>,
}

fn grow_tree(
    x: &FeatureMatrix,
    grad: &[f64],
    in_sample: &[bool],
    presorted: &[Vec<usize>],
    cols: &[usize],
    config: &GbtConfig,
) -> Option<Tree> {
    let n = grad.len();
    let root_rows: Vec<usize> = (0..n).filter(|&i| in_sample[i]).collect();
    let root_sorted: Vec<Vec<usize>> = cols
        .iter()
        .map(|&j| presorted[j].iter().copied().filter(|&i| in_sample[i]).collect())
        .collect();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut open = vec![OpenLeaf {
        node: 0,
        depth: 0,
        best: best_split(x, grad, &root_rows, &root_sorted, cols, config),
        rows: root_rows,
        sorted: root_sorted,
    }];
    let mut goes_left = vec![false; n];
    let mut n_leaves = 1;
    while n_leaves < config.num_leaves {
        // Highest gain wins; ties go to the earliest created leaf.
        let mut pick: Option<usize> = None;
        for (k, leaf) in open.iter().enumerate() {
            if leaf.depth >= config.max_depth {
                continue;
            }
            if let Some(c) = &leaf.best {
                if pick.is_none_or(|p| c.gain > open[p].best.as_ref().unwrap().gain) {
                    pick = Some(k);
                }
            }
        }
        let Some(k) = pick else { break };
        let leaf = open.remove(k);
        let c = leaf.best.unwrap();
        let (l_id, r_id) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[leaf.node] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            default_left: c.default_left,
            left: l_id,
            right: r_id,
        };
        let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
        for &i in &leaf.rows {
            let v = x.get(i, c.feature);
            let left = if v.is_nan() { c.default_left } else { v <= c.threshold };
            goes_left[i] = left;
            if left {
                lrows.push(i);
            } else {
                rrows.push(i);
            }
        }
        let (mut lsorted, mut rsorted) = (Vec::with_capacity(cols.len()), Vec::with_capacity(cols.len()));
        for list in leaf.sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.into_iter().partition(|&i| goes_left[i]);
            lsorted.push(l);
            rsorted.push(r);
        }
        for (id, rows, sorted) in [(l_id, lrows, lsorted), (r_id, rrows, rsorted)] {
            let best = best_split(x, grad, &rows, &sorted, cols, config);
            open.push(OpenLeaf {
                node: id,
                depth: leaf.depth + 1,
                rows,
                sorted,
                best,
            });
        }
        open.sort_by_key(|l| l.node);
        n_leaves += 1;
    }
    (nodes.len() > 1).then_some(Tree { nodes })
}

fn best_split(
    x: &FeatureMatrix,
    grad: &[f64],
    rows: &[usize],
    sorted: &[Vec<usize>],
    cols: &[usize],
    config: &GbtConfig,
) -> Option<Candidate> {
    let min_child = config.min_child_samples;
    if rows.len() < 2 * min_child {
        return None;
    }
    let total_n = rows.len() as f64;
    let total_s: f64 = rows.iter().map(|&i| grad[i]).sum();
    let parent = total_s * total_s / total_n;
    let score = |s: f64, c: f64| s * s / c;
    let mut best: Option<Candidate> = None;
    for (&j, present) in cols.iter().zip(sorted) {
        let miss_n = rows.len() - present.len();
        let miss_s = if miss_n == 0 {
            0.0
        } else {
            rows.iter().filter(|&&i| x.get(i, j).is_nan()).map(|&i| grad[i]).sum()
        };
        let (mut ln, mut ls) = (0usize, 0.0);
        for w in 0..present.len().saturating_sub(1) {
            let i = present[w];
            ln += 1;
            ls += grad[i];
            let (a, b) = (x.get(i, j), x.get(present[w + 1], j));
            if a == b {
                continue;
            }
            let rn = present.len() - ln;
            let rs = total_s - miss_s - ls;
            let mut threshold = a + (b - a) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            // Try missing rows on each side; ties keep them with the larger child.
            let side = |miss_left: bool| {
                let (nl, sl, nr, sr) = if miss_left {
                    (ln + miss_n, ls + miss_s, rn, rs)
                } else {
                    (ln, ls, rn + miss_n, rs + miss_s)
                };
                (nl >= min_child && nr >= min_child)
                    .then(|| (score(sl, nl as f64) + score(sr, nr as f64) - parent, miss_left, nl, nr))
            };
            let chosen = match (side(true), side(false)) {
                (None, None) => continue,
                (Some(o), None) | (None, Some(o)) => o,
                (Some(l), Some(r)) => {
                    if miss_n == 0 || l.0 == r.0 {
                        if l.2 >= r.3 {
                            l
                        } else {
                            r
                        }
                    } else if l.0 > r.0 {
                        l
                    } else {
                        r
                    }
                }
            };
            let (gain, default_left, _, _) = chosen;
            if gain > 1e-14 * (1.0 + parent.abs()) && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    gain,
                    feature: j,
                    threshold,
                    default_left,
                });
            }
        }
    }
    best
}

impl GbtModel {
    /// Predicts by feature name; columns absent from `x` are treated as missing.
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let map: Vec<Option<usize>> = self
            .feature_names
            .iter()
            .map(|name| x.names.iter().position(|n| n == name))
            .collect();
        let identity = map.iter().enumerate().all(|(k, m)| *m == Some(k)) && x.n_cols() == map.len();
        let mut buf = vec![f64::NAN; self.feature_names.len()];
        (0..x.n_rows())
            .map(|i| {
                let row = if identity {
                    x.row(i)
                } else {
                    for (k, m) in map.iter().enumerate() {
                        buf[k] = m.map(|j| x.get(i, j)).unwrap_or(f64::NAN);
                    }
                    &buf[..]
                };
                self.predict_row(row)
            })
            .collect()
    }

    /// Row in training column order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut p = self.base_prediction;
        for t in &self.trees {
            p += self.learning_rate * t.predict_row(row);
        }
        p
    }

    /// Number of splits per feature; features never used are omitted.
    pub fn feature_importance(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for t in &self.trees {
            for node in &t.nodes {
                if let Node::Split { feature, .. } = node {
                    *out.entry(self.feature_names[*feature].clone()).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String, GbtError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, GbtError> {
        Ok(serde_json::from_str(s)?)
    }
}
