//! Gradient-boosted regression trees for binary classification.
//!
//! Each round fits a tree to the first and second derivatives of the
//! log-loss at the current margin. Leaves take the regularized Newton step
//! `-T_alpha(G) / (H + lambda)` and splits are chosen by exact enumeration
//! over present values, with missing (sentinel) cells sent to whichever side
//! yields the larger gain.

mod attribution;
mod dataset;
mod io;
mod split;
mod tree;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attribution::{interventional_shap, Attribution};
pub use dataset::{Dataset, DenseRow, RowView};
pub use split::{
    find_best_split, leaf_score, leaf_weight, soft_threshold, split_gain, DefaultDirection, GradStats,
    SplitCandidate, PRESENCE_THRESHOLD,
};
pub use tree::{FlatTree, Tree, TreeNode};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub base_score: f64,
    pub sentinel: f64,
    pub seed: u64,
    /// Keep per-node hessian cover; required for path attribution.
    pub record_cover: bool,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 6,
            learning_rate: 0.1,
            subsample: 1.0,
            colsample_bytree: 1.0,
            reg_alpha: 0.0,
            reg_lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: 0.5,
            sentinel: crate::featurize::SENTINEL as f64,
            seed: 0,
            record_cover: true,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("gbdt.{f}"), m));
        if self.n_estimators < 1 {
            return bad("n_estimators", "must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate", "must lie in (0, 1]");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample", "must lie in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad("colsample_bytree", "must lie in (0, 1]");
        }
        for (name, v) in [
            ("reg_alpha", self.reg_alpha),
            ("reg_lambda", self.reg_lambda),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and >= 0");
            }
        }
        if !(self.base_score > 0.0 && self.base_score < 1.0) {
            return bad("base_score", "must lie in (0, 1)");
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean binary log-loss of margins against labels.
pub fn log_loss(margins: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            // log(1 + exp(-s m)) computed stably
            let z = if y { -m } else { m };
            if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .sum();
    total / margins.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    pub(crate) has_cover: bool,
}

impl GbdtModel {
    /// Model with no trees; predicts `base_score` everywhere.
    pub fn empty(params: GbdtParams, feature_names: Vec<String>) -> Self {
        Self {
            has_cover: params.record_cover,
            params,
            feature_names,
            trees: Vec::new(),
        }
    }

    pub fn base_margin(&self) -> f64 {
        logit(self.params.base_score)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// First `n` trees only.
    pub fn truncated(&self, n: usize) -> GbdtModel {
        GbdtModel {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    fn check_schema(&self, data: &Dataset) -> Result<()> {
        if data.feature_names() != self.feature_names.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "model expects {} features, data has {} (or different names/order)",
                self.feature_names.len(),
                data.n_features()
            )));
        }
        Ok(())
    }

    pub fn predict_margin_row<R: RowView + ?Sized>(&self, row: &R) -> f64 {
        let eta = self.params.learning_rate;
        self.base_margin() + self.trees.iter().map(|t| eta * t.predict(row)).sum::<f64>()
    }

    pub fn predict_margin(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_schema(data)?;
        let rows = data.row_major();
        Ok((0..data.n_rows())
            .into_par_iter()
            .map(|i| self.predict_margin_row(&rows.row(i)))
            .collect())
    }

    pub fn predict_proba(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(self.predict_margin(data)?.into_iter().map(sigmoid).collect())
    }

    /// Margin of a dense row; cells equal to the model's sentinel are missing.
    pub fn predict_margin_dense(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_features() {
            return Err(Error::SchemaMismatch(format!(
                "row has {} values, model expects {}",
                values.len(),
                self.n_features()
            )));
        }
        Ok(self.predict_margin_row(&DenseRow {
            values,
            sentinel: self.params.sentinel,
        }))
    }

    /// Sum of realized split gains per feature.
    pub fn gain_importance(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features()];
        for t in &self.trees {
            for node in &t.nodes {
                if let TreeNode::Split { feature, gain, .. } = *node {
                    out[feature] += gain;
                }
            }
        }
        out
    }

    /// Per-path attribution of one row's margin.
    pub fn path_contributions<R: RowView + ?Sized>(&self, row: &R) -> Result<Attribution> {
        attribution::path_contributions(self, row)
    }

    /// Mean absolute path contribution per feature over the rows of `data`.
    pub fn mean_abs_contributions(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_schema(data)?;
        if !self.has_cover {
            return Err(Error::MissingCover);
        }
        let rows = data.row_major();
        let expected: Vec<Vec<f64>> = self.trees.iter().map(Tree::expected_values).collect();
        let n = data.n_rows();
        let chunk = 256;
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; self.n_features()];
                let mut contrib = vec![0.0; self.n_features()];
                for i in c * chunk..((c + 1) * chunk).min(n) {
                    contrib.iter_mut().for_each(|x| *x = 0.0);
                    attribution::accumulate_paths(self, &expected, &rows.row(i), &mut contrib);
                    for (a, x) in acc.iter_mut().zip(&contrib) {
                        *a += x.abs();
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; self.n_features()];
        for p in partials {
            for (o, x) in out.iter_mut().zip(p) {
                *o += x;
            }
        }
        if n > 0 {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        Ok(out)
    }

    pub fn has_cover(&self) -> bool {
        self.has_cover
    }
}

/// Features sampled for tree `t`, ascending.
fn tree_features(n_features: usize, params: &GbdtParams, t: usize) -> Vec<usize> {
    if params.colsample_bytree >= 1.0 {
        return (0..n_features).collect();
    }
    let k = ((params.colsample_bytree * n_features as f64).round() as usize).clamp(1, n_features);
    let mut all: Vec<usize> = (0..n_features).collect();
    let mut rng = rng::substream(params.seed, "colsample", t as u64);
    all.shuffle(&mut rng);
    let mut chosen = all[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Fits a model. Deterministic for a fixed seed regardless of thread count.
pub fn train(data: &Dataset, labels: &[bool], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if data.n_rows() == 0 {
        return Err(Error::InvalidArgument("empty training matrix".into()));
    }
    if labels.len() != data.n_rows() {
        return Err(Error::SchemaMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            data.n_rows()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::SingleClass("negatives"));
    }
    if n_pos == labels.len() {
        return Err(Error::SingleClass("positives"));
    }

    let sorted: Vec<Vec<(f64, u32)>> = (0..data.n_features())
        .into_par_iter()
        .map(|j| {
            let mut c: Vec<(f64, u32)> = data.column(j).iter().map(|&(r, v)| (v, r)).collect();
            c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            c
        })
        .collect();

    let n = data.n_rows();
    let mut model = GbdtModel::empty(params.clone(), data.feature_names().to_vec());
    let mut margin = vec![model.base_margin(); n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut in_sample = vec![true; n];

    for t in 0..params.n_estimators {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            g[i] = p - if labels[i] { 1.0 } else { 0.0 };
            h[i] = p * (1.0 - p);
        }
        if params.subsample < 1.0 {
            for (i, s) in in_sample.iter_mut().enumerate() {
                *s = rng::keyed_unit(params.seed, t as u64, data.row_keys()[i]) < params.subsample;
            }
        }
        let features = tree_features(data.n_features(), params, t);
        let grown = grow_tree(data, &sorted, &g, &h, &in_sample, &features, params);
        for i in 0..n {
            if let TreeNode::Leaf { weight, .. } = grown.tree.nodes[grown.row_node[i] as usize] {
                margin[i] += params.learning_rate * weight;
            }
        }
        model.trees.push(grown.tree);
    }
    Ok(model)
}

struct Grown {
    tree: Tree,
    row_node: Vec<u32>,
}

struct PendingSplit {
    feature: usize,
    threshold: f64,
    default_direction: DefaultDirection,
    left: usize,
    right: usize,
}

fn grow_tree(
    data: &Dataset,
    sorted: &[Vec<(f64, u32)>],
    g: &[f64],
    h: &[f64],
    in_sample: &[bool],
    features: &[usize],
    params: &GbdtParams,
) -> Grown {
    let n = data.n_rows();
    let mut root = GradStats::default();
    for i in 0..n {
        if in_sample[i] {
            root.add(g[i], h[i]);
        }
    }
    let leaf = |s: &GradStats| TreeNode::Leaf {
        weight: leaf_weight(s.g, s.h, params.reg_alpha, params.reg_lambda),
        cover: s.h,
    };

    let mut nodes = vec![leaf(&root)];
    let mut row_node = vec![0u32; n];
    let mut level: Vec<(usize, GradStats)> = vec![(0, root)];
    let mut depth = 0;

    while !level.is_empty() && depth < params.max_depth {
        let mut slot = vec![u32::MAX; nodes.len()];
        for (s, &(node, _)) in level.iter().enumerate() {
            slot[node] = s as u32;
        }
        let per_feature: Vec<Vec<Option<SplitCandidate>>> = features
            .par_iter()
            .map(|&f| {
                let mut buffers: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); level.len()];
                for &(v, r) in &sorted[f] {
                    let r = r as usize;
                    if !in_sample[r] {
                        continue;
                    }
                    let s = slot[row_node[r] as usize];
                    if s != u32::MAX {
                        buffers[s as usize].push((v, g[r], h[r]));
                    }
                }
                buffers
                    .iter()
                    .zip(&level)
                    .map(|(b, &(_, stats))| split::scan_sorted(b, stats, params))
                    .collect()
            })
            .collect();

        let mut pending: Vec<Option<PendingSplit>> = Vec::with_capacity(level.len());
        let mut next = Vec::new();
        for (s, &(node, _)) in level.iter().enumerate() {
            let mut best: Option<(usize, SplitCandidate)> = None;
            for (k, &f) in features.iter().enumerate() {
                if let Some(c) = per_feature[k][s] {
                    if best.as_ref().is_none_or(|(_, b)| c.gain > b.gain) {
                        best = Some((f, c));
                    }
                }
            }
            match best {
                Some((feature, c)) if c.gain > params.gamma => {
                    let (left, right) = (nodes.len(), nodes.len() + 1);
                    nodes.push(leaf(&c.left));
                    nodes.push(leaf(&c.right));
                    let cover = nodes[node].cover();
                    nodes[node] = TreeNode::Split {
                        feature,
                        threshold: c.threshold,
                        default_direction: c.default_direction,
                        left,
                        right,
                        gain: c.gain,
                        cover,
                    };
                    next.push((left, c.left));
                    next.push((right, c.right));
                    pending.push(Some(PendingSplit {
                        feature,
                        threshold: c.threshold,
                        default_direction: c.default_direction,
                        left,
                        right,
                    }));
                }
                _ => pending.push(None),
            }
        }

        // route every row (sampled or not) through the new splits
        let mut by_node: Vec<Option<&PendingSplit>> = vec![None; nodes.len()];
        let mut split_features: Vec<usize> = Vec::new();
        for (&(node, _), p) in level.iter().zip(&pending) {
            if let Some(p) = p {
                by_node[node] = Some(p);
                split_features.push(p.feature);
            }
        }
        split_features.sort_unstable();
        split_features.dedup();
        let mut routed = vec![false; n];
        for &f in &split_features {
            for &(r, v) in data.column(f) {
                let r = r as usize;
                if let Some(p) = by_node[row_node[r] as usize] {
                    if p.feature == f && !routed[r] {
                        row_node[r] = if v < p.threshold { p.left } else { p.right } as u32;
                        routed[r] = true;
                    }
                }
            }
        }
        for r in 0..n {
            if routed[r] {
                continue;
            }
            if let Some(p) = by_node[row_node[r] as usize] {
                row_node[r] = match p.default_direction {
                    DefaultDirection::Left => p.left,
                    DefaultDirection::Right => p.right,
                } as u32;
            }
        }

        level = next;
        depth += 1;
    }

    Grown {
        tree: Tree { nodes },
        row_node,
    }
}
