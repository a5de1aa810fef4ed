//! Gradient-boosted decision trees for binary decisions on `(y_hat, sigma)`.
//!
//! Logistic loss, exact greedy splits at midpoints between consecutive
//! distinct feature values, one-step Newton leaf values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Times a round's step is halved when it would raise the training loss.
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub nu: f64,
    pub min_leaf: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_trees: 100,
            max_depth: 3,
            nu: 0.1,
            min_leaf: 20,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Config("gbdt max_depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::Config(format!("gbdt nu must lie in [0, 1], got {}", self.nu)));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("gbdt min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Child {
    Split(usize),
    Leaf(usize),
}

/// `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: Child,
    pub right: Child,
}

/// Regression tree; the root is split 0, or leaf 0 when there are no splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub splits: Vec<SplitNode>,
    pub leaves: Vec<f64>,
}

impl Tree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut node = if self.splits.is_empty() {
            return 0;
        } else {
            &self.splits[0]
        };
        loop {
            let next = if x[node.feature] <= node.threshold {
                node.left
            } else {
                node.right
            };
            match next {
                Child::Leaf(i) => return i,
                Child::Split(i) => node = &self.splits[i],
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaves[self.leaf_index(x)]
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, c: Child) -> usize {
            match c {
                Child::Leaf(_) => 0,
                Child::Split(i) => 1 + walk(t, t.splits[i].left).max(walk(t, t.splits[i].right)),
            }
        }
        if self.splits.is_empty() {
            0
        } else {
            walk(self, Child::Split(0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format_version: u32,
    /// Log-odds of the training prior.
    pub base: f64,
    pub nu: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Mean logistic loss on the training set after each round, starting with
    /// the base-only model.
    pub train_loss: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z) - y z`, the logistic loss at log-odds `z`.
fn logistic_loss(z: f64, y: bool) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - if y { z } else { 0.0 }
}

fn mean_loss(raw: &[f64], labels: &[bool]) -> f64 {
    raw.iter().zip(labels).map(|(&z, &y)| logistic_loss(z, y)).sum::<f64>() / raw.len() as f64
}

impl Forest {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.base + self.nu * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.predict_raw(x))
    }

    pub fn predict_class(&self, x: &[f64], cut: f64) -> bool {
        self.predict_proba(x) >= cut
    }

    /// Leaf reached in every tree; equal signatures give equal predictions.
    pub fn leaf_signature(&self, x: &[f64]) -> Vec<usize> {
        self.trees.iter().map(|t| t.leaf_index(x)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = json::to_canonical_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Forest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if f.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported forest format_version {}",
                f.format_version
            )));
        }
        Ok(f)
    }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    resid: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    n_features: usize,
    tree: Tree,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn best_split(&self, idx: &[usize]) -> Option<BestSplit> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.resid[i]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        for f in 0..self.n_features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = 0.0;
            for k in 1..n {
                left += self.resid[order[k - 1]];
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if lo == hi || k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let right = total - left;
                let gain = left * left / k as f64 + right * right / (n - k) as f64 - parent;
                if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold: lo + 0.5 * (hi - lo),
                    });
                }
            }
        }
        best
    }

    fn leaf(&mut self, idx: &[usize]) -> Child {
        let r: f64 = idx.iter().map(|&i| self.resid[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        let v = if h > 1e-12 { r / h } else { 0.0 };
        self.tree.leaves.push(v);
        Child::Leaf(self.tree.leaves.len() - 1)
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> Child {
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let Some(best) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let slot = self.tree.splits.len();
        self.tree.splits.push(SplitNode {
            feature: best.feature,
            threshold: best.threshold,
            left: Child::Leaf(0),
            right: Child::Leaf(0),
        });
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][best.feature] <= best.threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.tree.splits[slot].left = left;
        self.tree.splits[slot].right = right;
        Child::Split(slot)
    }
}

/// Fits a forest on feature rows `x` (all of equal length) and binary labels.
pub fn train_gbdt(x: &[Vec<f64>], labels: &[bool], cfg: &GbdtConfig) -> Result<Forest> {
    cfg.validate()?;
    if x.len() != labels.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let n_features = x.first().map_or(0, Vec::len);
    if n_features == 0 {
        return Err(Error::Fit("gbdt needs at least one sample with one feature".into()));
    }
    for row in x {
        if row.len() != n_features {
            return Err(Error::Shape {
                expected: n_features,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("gbdt features must be finite".into()));
        }
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Fit("gbdt labels contain a single class".into()));
    }
    let prior = pos as f64 / labels.len() as f64;
    let base = (prior / (1.0 - prior)).ln();

    let mut raw = vec![base; x.len()];
    let mut train_loss = vec![mean_loss(&raw, labels)];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let all: Vec<usize> = (0..x.len()).collect();
    for round in 0..cfg.n_trees {
        let p: Vec<f64> = raw.iter().map(|&z| sigmoid(z)).collect();
        let resid: Vec<f64> = p.iter().zip(labels).map(|(&p, &y)| f64::from(u8::from(y)) - p).collect();
        let hess: Vec<f64> = p.iter().map(|&p| p * (1.0 - p)).collect();
        let mut g = Grower {
            x,
            resid: &resid,
            hess: &hess,
            max_depth: cfg.max_depth,
            min_leaf: cfg.min_leaf,
            n_features,
            tree: Tree {
                splits: Vec::new(),
                leaves: Vec::new(),
            },
        };
        g.grow(&all, 0);
        let mut tree = g.tree;
        let leaf_of: Vec<usize> = x.iter().map(|row| tree.leaf_index(row)).collect();

        let prev = *train_loss.last().unwrap();
        let mut next_raw: Vec<f64>;
        let mut halvings = 0;
        loop {
            next_raw = raw
                .iter()
                .zip(&leaf_of)
                .map(|(&z, &l)| z + cfg.nu * tree.leaves[l])
                .collect();
            let loss = mean_loss(&next_raw, labels);
            if loss <= prev || halvings == MAX_STEP_HALVINGS {
                break;
            }
            // overshooting Newton step; damp it
            tree.leaves.iter_mut().for_each(|v| *v *= 0.5);
            halvings += 1;
        }
        if halvings == MAX_STEP_HALVINGS {
            tree.leaves.iter_mut().for_each(|v| *v = 0.0);
            next_raw = raw.clone();
        }
        if halvings > 0 {
            log::debug!("gbdt round {round}: step halved {halvings} times");
        }
        raw = next_raw;
        train_loss.push(mean_loss(&raw, labels));
        trees.push(tree);
    }
    Ok(Forest {
        format_version: FOREST_FORMAT_VERSION,
        base,
        nu: cfg.nu,
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_leaf,
        n_features,
        trees,
        train_loss,
    })
}
