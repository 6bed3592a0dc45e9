//! Additive per-feature attributions of a row's margin.

use super::dataset::RowView;
use super::tree::{Tree, TreeNode};
use super::{Dataset, GbdtModel};
use crate::error::{Error, Result};

/// `bias + contributions.sum()` equals the row's margin.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub bias: f64,
    pub contributions: Vec<f64>,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.bias + self.contributions.iter().sum::<f64>()
    }
}

pub(super) fn accumulate_paths<R: RowView + ?Sized>(
    model: &GbdtModel,
    expected: &[Vec<f64>],
    row: &R,
    out: &mut [f64],
) {
    let eta = model.params.learning_rate;
    for (tree, ev) in model.trees.iter().zip(expected) {
        let mut i = 0;
        while let node @ TreeNode::Split { feature, .. } = &tree.nodes[i] {
            let next = Tree::step(node, row);
            out[*feature] += eta * (ev[next] - ev[i]);
            i = next;
        }
    }
}

/// Credits each split on the row's path with the change in cover-weighted
/// expected value between the node and the child taken.
pub(super) fn path_contributions<R: RowView + ?Sized>(model: &GbdtModel, row: &R) -> Result<Attribution> {
    if !model.has_cover {
        return Err(Error::MissingCover);
    }
    let expected: Vec<Vec<f64>> = model.trees.iter().map(Tree::expected_values).collect();
    let eta = model.params.learning_rate;
    let bias = model.base_margin() + expected.iter().map(|ev| eta * ev[0]).sum::<f64>();
    let mut contributions = vec![0.0; model.n_features()];
    accumulate_paths(model, &expected, row, &mut contributions);
    Ok(Attribution { bias, contributions })
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

struct Interventional<'a> {
    fact: &'a [f64],
    on_x: Vec<usize>,
    on_z: Vec<usize>,
}

impl Interventional<'_> {
    fn walk<X: RowView + ?Sized, Z: RowView + ?Sized>(
        &mut self,
        tree: &Tree,
        i: usize,
        x: &X,
        z: &Z,
        scale: f64,
        phi: &mut [f64],
    ) {
        let node = &tree.nodes[i];
        let feature = match *node {
            TreeNode::Leaf { weight, .. } => {
                let (a, b) = (self.on_x.len(), self.on_z.len());
                let v = weight * scale;
                if a > 0 {
                    let w = self.fact[a - 1] * self.fact[b] / self.fact[a + b];
                    for &f in &self.on_x {
                        phi[f] += v * w;
                    }
                }
                if b > 0 {
                    let w = self.fact[a] * self.fact[b - 1] / self.fact[a + b];
                    for &f in &self.on_z {
                        phi[f] -= v * w;
                    }
                }
                return;
            }
            TreeNode::Split { feature, .. } => feature,
        };
        let (cx, cz) = (Tree::step(node, x), Tree::step(node, z));
        if self.on_x.contains(&feature) {
            self.walk(tree, cx, x, z, scale, phi);
        } else if self.on_z.contains(&feature) {
            self.walk(tree, cz, x, z, scale, phi);
        } else if cx == cz {
            self.walk(tree, cx, x, z, scale, phi);
        } else {
            self.on_x.push(feature);
            self.walk(tree, cx, x, z, scale, phi);
            self.on_x.pop();
            self.on_z.push(feature);
            self.walk(tree, cz, x, z, scale, phi);
            self.on_z.pop();
        }
    }
}

/// Interventional Shapley values of `row` against a background sample.
/// The bias is the mean background margin. Slower than path attribution:
/// cost grows with the background size.
pub fn interventional_shap<R: RowView + ?Sized>(model: &GbdtModel, row: &R, background: &Dataset) -> Result<Attribution> {
    if background.feature_names() != model.feature_names.as_slice() {
        return Err(Error::SchemaMismatch("background columns differ from the model".into()));
    }
    if background.n_rows() == 0 {
        return Err(Error::InvalidArgument("empty background sample".into()));
    }
    let max_depth = model.trees.iter().map(Tree::depth).max().unwrap_or(0);
    let fact = factorials(max_depth + 1);
    let rows = background.row_major();
    let nb = background.n_rows() as f64;
    let eta = model.params.learning_rate;
    let mut phi = vec![0.0; model.n_features()];
    let mut bias = model.base_margin();
    let mut state = Interventional {
        fact: &fact,
        on_x: Vec::new(),
        on_z: Vec::new(),
    };
    for k in 0..background.n_rows() {
        let z = rows.row(k);
        for tree in &model.trees {
            bias += eta * tree.predict(&z) / nb;
            state.walk(tree, 0, row, &z, eta / nb, &mut phi);
        }
    }
    Ok(Attribution {
        bias,
        contributions: phi,
    })
}
