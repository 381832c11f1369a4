//! Random-forest feature ranking.
//!
//! Trees are grown on seeded bootstrap resamples; each split maximizes the
//! weighted Gini decrease over a seeded random subset of features. Feature
//! importance is mean decrease in impurity: the total weighted impurity
//! decrease at nodes splitting on a feature, normalized per tree and averaged
//! over the forest.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forest hyperparameters. Defaults follow common classifier practice:
/// 100 trees, unlimited depth, `ceil(sqrt(d))` split candidates.
#[derive(Debug, Clone)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees to purity.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` uses `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::InvalidConfig(
                "min_samples_split must be >= 2".into(),
            ));
        }
        if let Some(k) = self.features_per_split {
            if k == 0 || k > n_features {
                return Err(Error::InvalidConfig(format!(
                    "features_per_split must be in [1, {n_features}], got {k}"
                )));
            }
        }
        Ok(())
    }

    fn split_candidates(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .min(n_features)
    }
}

/// Gini impurity of a class-count vector: `1 - sum(p_i^2)`.
pub fn gini_impurity(class_counts: &[usize]) -> Result<f64> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("gini of an empty node".into()));
    }
    let total = total as f64;
    let sum_sq: f64 = class_counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum();
    Ok(1.0 - sum_sq)
}

enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        counts: [usize; 2],
    },
}

/// One fitted tree plus its per-feature weighted impurity decreases.
pub struct DecisionTree {
    root: TreeNode,
    decreases: Vec<f64>,
}

impl DecisionTree {
    fn predict_counts(&self, row: &[f64]) -> [usize; 2] {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { counts } => return *counts,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }
}

/// A fitted forest. Immutable and shareable after construction.
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_features: usize,
}

impl RandomForest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Majority-vote prediction, mostly for sanity checks; the forest's job
    /// in this pipeline is feature ranking.
    pub fn predict(&self, row: &[f64]) -> u8 {
        let mut votes = [0usize; 2];
        for tree in &self.trees {
            let counts = tree.predict_counts(row);
            if counts[1] > counts[0] {
                votes[1] += 1;
            } else {
                votes[0] += 1;
            }
        }
        u8::from(votes[1] > votes[0])
    }

    /// Mean decrease in impurity per feature, normalized to sum to 1.
    pub fn importances(&self) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.n_features];
        for tree in &self.trees {
            let total: f64 = tree.decreases.iter().sum();
            if total > 0.0 {
                for (m, d) in mean.iter_mut().zip(&tree.decreases) {
                    *m += d / total;
                }
            }
        }
        let sum: f64 = mean.iter().sum();
        if sum <= 0.0 {
            return Err(Error::EmptyInput(
                "forest produced no informative splits".into(),
            ));
        }
        for m in &mut mean {
            *m /= sum;
        }
        Ok(mean)
    }
}

/// Fits a random forest on a row-major matrix with binary labels.
pub fn fit_random_forest(x: &[Vec<f64>], y: &[u8], config: &ForestConfig) -> Result<RandomForest> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} labels",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("need at least 2 samples".into()));
    }
    let n_features = x[0].len();
    if x.iter().any(|r| r.len() != n_features) {
        return Err(Error::ShapeMismatch("ragged feature matrix".into()));
    }
    config.validate(n_features)?;
    if y.iter().all(|&l| l == y[0]) {
        return Err(Error::SingleClass);
    }

    let trees = (0..config.n_trees)
        .map(|t| {
            // Per-tree stream: results do not depend on growth order.
            let stream = config
                .seed
                .wrapping_add((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let indices: Vec<usize> = if config.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            grow_tree(x, y, indices, config, &mut rng)
        })
        .collect();

    Ok(RandomForest { trees, n_features })
}

fn grow_tree(
    x: &[Vec<f64>],
    y: &[u8],
    indices: Vec<usize>,
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> DecisionTree {
    let n_features = x[0].len();
    let mut decreases = vec![0.0; n_features];
    let n_total = indices.len();
    let root = grow_node(x, y, indices, 0, n_total, config, rng, &mut decreases);
    DecisionTree { root, decreases }
}

fn class_counts(y: &[u8], indices: &[usize]) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for &i in indices {
        counts[y[i] as usize] += 1;
    }
    counts
}

#[allow(clippy::too_many_arguments)]
fn grow_node(
    x: &[Vec<f64>],
    y: &[u8],
    indices: Vec<usize>,
    depth: usize,
    n_total: usize,
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
    decreases: &mut [f64],
) -> TreeNode {
    let counts = class_counts(y, &indices);
    let node_impurity = gini_impurity(&counts).expect("node is nonempty");
    let at_depth_limit = config.max_depth.is_some_and(|d| depth >= d);
    if node_impurity == 0.0 || indices.len() < config.min_samples_split || at_depth_limit {
        return TreeNode::Leaf { counts };
    }

    let n_features = x[0].len();
    let k = config.split_candidates(n_features);
    let mut candidates: Vec<usize> = (0..n_features).collect();
    candidates.shuffle(rng);
    candidates.truncate(k);
    // Fixed evaluation order makes the strict-improvement tie-break
    // reproducible: lowest feature index wins among equal decreases.
    candidates.sort_unstable();

    let mut best: Option<(f64, usize, f64)> = None;
    for &feature in &candidates {
        let mut column: Vec<(f64, u8)> =
            indices.iter().map(|&i| (x[i][feature], y[i])).collect();
        column.sort_by(|a, b| a.0.total_cmp(&b.0));

        let n = column.len() as f64;
        let mut left = [0usize; 2];
        let mut right = counts;
        for i in 0..column.len() - 1 {
            left[column[i].1 as usize] += 1;
            right[column[i].1 as usize] -= 1;
            if column[i].0 == column[i + 1].0 {
                continue;
            }
            let n_left = (i + 1) as f64;
            let n_right = n - n_left;
            let decrease = node_impurity
                - (n_left / n) * gini_impurity(&left).expect("nonempty")
                - (n_right / n) * gini_impurity(&right).expect("nonempty");
            if best.is_none_or(|(b, _, _)| decrease > b) {
                let threshold = (column[i].0 + column[i + 1].0) / 2.0;
                best = Some((decrease, feature, threshold));
            }
        }
    }

    let Some((decrease, feature, threshold)) = best else {
        return TreeNode::Leaf { counts };
    };
    if decrease <= 0.0 {
        return TreeNode::Leaf { counts };
    }

    decreases[feature] += (indices.len() as f64 / n_total as f64) * decrease;

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        indices.into_iter().partition(|&i| x[i][feature] <= threshold);
    let left = grow_node(x, y, left_idx, depth + 1, n_total, config, rng, decreases);
    let right = grow_node(x, y, right_idx, depth + 1, n_total, config, rng, decreases);
    TreeNode::Split {
        feature,
        threshold,
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Per-feature importance scores with a descending ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// (feature name, importance) in original column order.
    pub scores: Vec<(String, f64)>,
    /// Feature names sorted by importance descending; ties keep column order.
    pub ranking: Vec<String>,
}

/// Extracts normalized importances from a fitted forest and pairs them with
/// feature names.
pub fn feature_importances(
    forest: &RandomForest,
    feature_names: &[String],
) -> Result<ImportanceReport> {
    if feature_names.len() != forest.n_features() {
        return Err(Error::ShapeMismatch(format!(
            "{} names vs {} features",
            feature_names.len(),
            forest.n_features()
        )));
    }
    let values = forest.importances()?;
    let scores: Vec<(String, f64)> = feature_names
        .iter()
        .cloned()
        .zip(values.iter().copied())
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let ranking = order.iter().map(|&i| feature_names[i].clone()).collect();
    Ok(ImportanceReport { scores, ranking })
}

/// The `k` highest-importance features, returned in the dataset's original
/// column order (the order sentences are written in).
pub fn select_top_k(report: &ImportanceReport, k: usize) -> Result<Vec<String>> {
    if k > report.scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} features",
            report.scores.len()
        )));
    }
    let top: Vec<&String> = report.ranking[..k].iter().collect();
    Ok(report
        .scores
        .iter()
        .map(|(name, _)| name)
        .filter(|name| top.contains(name))
        .cloned()
        .collect())
}

/// Writes `Feature,Importance` rows sorted by importance descending.
pub fn write_importance_csv(report: &ImportanceReport, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = String::from("Feature,Importance\n");
    for name in &report.ranking {
        let score = report
            .scores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .expect("ranking names come from scores");
        out.push_str(&format!("{name},{score}\n"));
    }
    file.write_all(out.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
