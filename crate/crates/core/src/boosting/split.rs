//! Exact greedy split enumeration with learned default directions.

use serde::{Deserialize, Serialize};

use super::GbdtParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultDirection {
    Left,
    Right,
}

/// Gradient and hessian sums over a set of rows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradStats {
    pub g: f64,
    pub h: f64,
    pub n: usize,
}

impl GradStats {
    pub fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1;
    }

    fn plus(self, o: GradStats) -> GradStats {
        GradStats {
            g: self.g + o.g,
            h: self.h + o.h,
            n: self.n + o.n,
        }
    }

    fn minus(self, o: GradStats) -> GradStats {
        GradStats {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }
}

/// Soft-thresholding by the L1 penalty.
pub fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

/// Optimal leaf weight `-T_alpha(G) / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, alpha: f64, lambda: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    if t == 0.0 {
        return 0.0;
    }
    -t / (h + lambda)
}

/// Structure score of a leaf, `T_alpha(G)^2 / (H + lambda)`.
pub fn leaf_score(g: f64, h: f64, alpha: f64, lambda: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    if t == 0.0 {
        return 0.0;
    }
    t * t / (h + lambda)
}

/// Loss reduction of a split, before subtracting `gamma`.
pub fn split_gain(left: GradStats, right: GradStats, alpha: f64, lambda: f64) -> f64 {
    0.5 * (leaf_score(left.g, left.h, alpha, lambda) + leaf_score(right.g, right.h, alpha, lambda)
        - leaf_score(left.g + right.g, left.h + right.h, alpha, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    /// Present values `< threshold` go left.
    pub threshold: f64,
    pub default_direction: DefaultDirection,
    /// Loss reduction before `gamma`.
    pub gain: f64,
    pub left: GradStats,
    pub right: GradStats,
}

/// Threshold used when present rows all go left and missing rows go right.
pub const PRESENCE_THRESHOLD: f64 = f64::MAX;

/// Scans present cells sorted by value. `total` covers every row of the
/// node, so the missing rows are `total - sum(present)`.
pub(crate) fn scan_sorted(present: &[(f64, f64, f64)], total: GradStats, params: &GbdtParams) -> Option<SplitCandidate> {
    if present.is_empty() || total.n < 2 {
        return None;
    }
    let (alpha, lambda) = (params.reg_alpha, params.reg_lambda);
    let mut present_sum = GradStats::default();
    for &(_, g, h) in present {
        present_sum.add(g, h);
    }
    let missing = if present_sum.n == total.n {
        GradStats::default()
    } else {
        total.minus(present_sum)
    };
    let valid = |s: &GradStats| s.n > 0 && s.h >= params.min_child_weight;

    let mut best: Option<SplitCandidate> = None;
    let mut consider = |threshold: f64, left: GradStats, right: GradStats, dir: DefaultDirection| {
        if !valid(&left) || !valid(&right) {
            return;
        }
        let gain = split_gain(left, right, alpha, lambda);
        if !gain.is_finite() {
            return;
        }
        if best.is_none_or(|b| gain > b.gain) {
            best = Some(SplitCandidate {
                threshold,
                default_direction: dir,
                gain,
                left,
                right,
            });
        }
    };

    let mut acc = GradStats::default();
    let mut i = 0;
    while i < present.len() {
        let v = present[i].0;
        while i < present.len() && present[i].0 == v {
            acc.add(present[i].1, present[i].2);
            i += 1;
        }
        let right_present = present_sum.minus(acc);
        if i < present.len() {
            let threshold = 0.5 * (v + present[i].0);
            // missing left first so that exact ties default left
            consider(threshold, acc.plus(missing), right_present, DefaultDirection::Left);
            if missing.n > 0 {
                consider(threshold, acc, right_present.plus(missing), DefaultDirection::Right);
            }
        } else if missing.n > 0 {
            // present vs missing
            consider(PRESENCE_THRESHOLD, acc, missing, DefaultDirection::Right);
        }
    }
    best
}

/// Best split of one feature over a set of rows. `values[i]` equal to
/// `params.sentinel` marks a missing cell. Returns `None` when no split
/// satisfies `min_child_weight` or when every value is missing; the caller
/// still compares the gain against `gamma`.
pub fn find_best_split(values: &[f64], g: &[f64], h: &[f64], params: &GbdtParams) -> Option<SplitCandidate> {
    assert!(values.len() == g.len() && g.len() == h.len());
    let mut total = GradStats::default();
    let mut present = Vec::new();
    for i in 0..values.len() {
        total.add(g[i], h[i]);
        if values[i] != params.sentinel {
            present.push((values[i], g[i], h[i]));
        }
    }
    present.sort_by(|a, b| a.0.total_cmp(&b.0));
    scan_sorted(&present, total, params)
}
