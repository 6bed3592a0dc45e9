use serde::{Deserialize, Serialize};

use super::dataset::RowView;
use super::split::DefaultDirection;

/// Node of a regression tree, stored in an arena with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        default_direction: DefaultDirection,
        left: usize,
        right: usize,
        /// Realized loss reduction.
        gain: f64,
        /// Hessian mass of the training rows that reached the node.
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match *self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Child taken by a row at a split node.
    #[inline]
    pub(crate) fn step<R: RowView + ?Sized>(node: &TreeNode, row: &R) -> usize {
        match *node {
            TreeNode::Split {
                feature,
                threshold,
                default_direction,
                left,
                right,
                ..
            } => match row.value(feature) {
                Some(v) if v < threshold => left,
                Some(_) => right,
                None => match default_direction {
                    DefaultDirection::Left => left,
                    DefaultDirection::Right => right,
                },
            },
            TreeNode::Leaf { .. } => unreachable!("step on a leaf"),
        }
    }

    pub fn leaf_index<R: RowView + ?Sized>(&self, row: &R) -> usize {
        let mut i = 0;
        while let node @ TreeNode::Split { .. } = &self.nodes[i] {
            i = Self::step(node, row);
        }
        i
    }

    pub fn predict<R: RowView + ?Sized>(&self, row: &R) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            TreeNode::Leaf { weight, .. } => weight,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Cover-weighted mean leaf value below every node.
    pub fn expected_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes.len()];
        fn go(t: &Tree, i: usize, out: &mut [f64]) -> f64 {
            let v = match t.nodes[i] {
                TreeNode::Leaf { weight, .. } => weight,
                TreeNode::Split { left, right, .. } => {
                    let (el, er) = (go(t, left, out), go(t, right, out));
                    let (cl, cr) = (t.nodes[left].cover(), t.nodes[right].cover());
                    if cl + cr > 0.0 {
                        (cl * el + cr * er) / (cl + cr)
                    } else {
                        0.5 * (el + er)
                    }
                }
            };
            out[i] = v;
            v
        }
        go(self, 0, &mut out);
        out
    }
}

/// Flattened arrays as written to model files. Leaves carry `feature = -1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatTree {
    pub feature: Vec<i64>,
    pub threshold: Vec<f64>,
    pub default_left: Vec<bool>,
    pub left: Vec<i64>,
    pub right: Vec<i64>,
    pub weight: Vec<f64>,
    pub gain: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<Vec<f64>>,
}

impl FlatTree {
    pub fn from_tree(tree: &Tree, with_cover: bool) -> Self {
        let n = tree.nodes.len();
        let mut f = FlatTree {
            feature: Vec::with_capacity(n),
            threshold: Vec::with_capacity(n),
            default_left: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
            gain: Vec::with_capacity(n),
            cover: with_cover.then(|| tree.nodes.iter().map(TreeNode::cover).collect()),
        };
        for node in &tree.nodes {
            match *node {
                TreeNode::Split {
                    feature,
                    threshold,
                    default_direction,
                    left,
                    right,
                    gain,
                    ..
                } => {
                    f.feature.push(feature as i64);
                    f.threshold.push(threshold);
                    f.default_left.push(default_direction == DefaultDirection::Left);
                    f.left.push(left as i64);
                    f.right.push(right as i64);
                    f.weight.push(0.0);
                    f.gain.push(gain);
                }
                TreeNode::Leaf { weight, .. } => {
                    f.feature.push(-1);
                    f.threshold.push(0.0);
                    f.default_left.push(false);
                    f.left.push(-1);
                    f.right.push(-1);
                    f.weight.push(weight);
                    f.gain.push(0.0);
                }
            }
        }
        f
    }

    pub fn to_tree(&self, n_features: usize) -> Result<Tree, String> {
        let n = self.feature.len();
        let lens = [
            self.threshold.len(),
            self.default_left.len(),
            self.left.len(),
            self.right.len(),
            self.weight.len(),
            self.gain.len(),
            self.cover.as_ref().map_or(n, Vec::len),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err("tree arrays are empty or of unequal length".into());
        }
        let child = |c: i64, i: usize| -> Result<usize, String> {
            // children always come after their parent, which also rules out cycles
            if c <= i as i64 || c as usize >= n {
                Err(format!("node {i} has invalid child {c}"))
            } else {
                Ok(c as usize)
            }
        };
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let cover = self.cover.as_ref().map_or(f64::NAN, |c| c[i]);
            if self.feature[i] < 0 {
                nodes.push(TreeNode::Leaf {
                    weight: self.weight[i],
                    cover,
                });
            } else {
                let feature = self.feature[i] as usize;
                if feature >= n_features {
                    return Err(format!("node {i} uses feature {feature} beyond {n_features}"));
                }
                nodes.push(TreeNode::Split {
                    feature,
                    threshold: self.threshold[i],
                    default_direction: if self.default_left[i] {
                        DefaultDirection::Left
                    } else {
                        DefaultDirection::Right
                    },
                    left: child(self.left[i], i)?,
                    right: child(self.right[i], i)?,
                    gain: self.gain[i],
                    cover,
                });
            }
        }
        Ok(Tree { nodes })
    }
}
