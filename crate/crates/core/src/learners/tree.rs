//! CART regression tree grown greedily on squared error.

use nalgebra::DMatrix;

/// Splits must lower the node's squared error by more than this fraction
/// of `max(1, parent SSE)`; smaller improvements count as ties.
pub const SPLIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub root: Node,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(left).max(walk(right)),
            }
        }
        walk(&self.root)
    }

    pub fn leaves(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 1,
                Node::Split { left, right, .. } => walk(left) + walk(right),
            }
        }
        walk(&self.root)
    }
}

/// Best split of the rows in `idx`: `(feature, threshold, sse)`.
///
/// Candidates are midpoints between consecutive distinct sorted values
/// leaving at least `min_leaf` rows on each side. Features are scanned in
/// index order and thresholds in increasing order, and a candidate
/// replaces the incumbent only when it is better by more than the
/// tolerance, so ties go to the lowest feature and smallest threshold.
pub fn best_split(
    x: &DMatrix<f64>,
    y: &[f64],
    idx: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    if n < 2 * min_leaf {
        return None;
    }
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let parent: f64 = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    let tol = SPLIT_TOLERANCE * parent.max(1.0);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut best_sse = parent - tol;
    let mut order = idx.to_vec();
    for f in 0..x.ncols() {
        order.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]).then(a.cmp(&b)));
        // Sums of centered targets keep the SSE arithmetic well conditioned.
        let total: f64 = order.iter().map(|&i| y[i] - mean).sum();
        let total_sq: f64 = order.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 0..n - 1 {
            let yi = y[order[k]] - mean;
            s += yi;
            sq += yi * yi;
            let nl = k + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (lo, hi) = (x[(order[k], f)], x[(order[k + 1], f)]);
            if lo == hi {
                continue;
            }
            let sse = (sq - s * s / nl as f64) + ((total_sq - sq) - (total - s).powi(2) / nr as f64);
            if sse < best_sse - if best.is_some() { tol } else { 0.0 } {
                best_sse = sse;
                best = Some((f, 0.5 * (lo + hi), sse));
            }
        }
    }
    best
}

fn grow(x: &DMatrix<f64>, y: &[f64], idx: &[usize], depth: usize, max_depth: usize, min_leaf: usize) -> Node {
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    if depth >= max_depth {
        return Node::Leaf(mean);
    }
    match best_split(x, y, idx, min_leaf) {
        None => Node::Leaf(mean),
        Some((feature, threshold, _)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[(i, feature)] <= threshold);
            Node::Split {
                feature,
                threshold,
                left: Box::new(grow(x, y, &l, depth + 1, max_depth, min_leaf)),
                right: Box::new(grow(x, y, &r, depth + 1, max_depth, min_leaf)),
            }
        }
    }
}

/// Fits a regression tree; leaves predict the mean of their rows.
pub fn fit_tree(x: &DMatrix<f64>, y: &[f64], max_depth: usize, min_leaf: usize) -> Tree {
    assert_eq!(x.nrows(), y.len());
    assert!(!y.is_empty() && min_leaf >= 1);
    let idx: Vec<usize> = (0..y.len()).collect();
    Tree {
        root: grow(x, y, &idx, 0, max_depth, min_leaf),
    }
}
