//! CART trees and random forests.
//!
//! Trees serialize in pre-order, big-endian:
//!
//! ```text
//! split:            0u8 | feature u32 | threshold f64 | left | right
//! class leaf:       1u8 | k u32 | k x f64 probabilities
//! regression leaf:  2u8 | value f64
//! ```
//!
//! A forest is `task u8 (0 classification, 1 regression) | n_classes u32 |
//! n_trees u32 | per tree: byte_len u32 | tree`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MlError, MlResult};
use crate::rng::rng_for;

pub const DEFAULT_TREES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
    Class(Vec<f64>),
    Value(f64),
}

impl Node {
    pub fn predict(&self, row: &[f64]) -> &Node {
        match self {
            Node::Split { feature, threshold, left, right } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
            leaf => leaf,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            Node::Split { left, right, .. } => 1 + left.n_nodes() + right.n_nodes(),
            _ => 1,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Node::Split { feature, threshold, left, right } => {
                out.push(0);
                out.extend_from_slice(&(*feature as u32).to_be_bytes());
                out.extend_from_slice(&threshold.to_be_bytes());
                left.encode(out);
                right.encode(out);
            }
            Node::Class(p) => {
                out.push(1);
                out.extend_from_slice(&(p.len() as u32).to_be_bytes());
                for v in p {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Node::Value(v) => {
                out.push(2);
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> MlResult<Node> {
        let mut r = Reader { bytes, pos: 0 };
        let node = r.node(0)?;
        if r.pos != bytes.len() {
            return Err(MlError::invalid(format!("{} trailing bytes after tree", bytes.len() - r.pos)));
        }
        Ok(node)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> MlResult<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| MlError::invalid("truncated tree encoding"))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn u32(&mut self) -> MlResult<u32> {
        Ok(u32::from_be_bytes(self.take()?))
    }

    fn f64(&mut self) -> MlResult<f64> {
        Ok(f64::from_be_bytes(self.take()?))
    }

    fn node(&mut self, depth: usize) -> MlResult<Node> {
        if depth > 10_000 {
            return Err(MlError::invalid("tree encoding nested too deeply"));
        }
        match self.take::<1>()?[0] {
            0 => {
                let feature = self.u32()? as usize;
                let threshold = self.f64()?;
                let left = Box::new(self.node(depth + 1)?);
                let right = Box::new(self.node(depth + 1)?);
                Ok(Node::Split { feature, threshold, left, right })
            }
            1 => {
                let k = self.u32()? as usize;
                if k > self.bytes.len() {
                    return Err(MlError::invalid("class count exceeds payload"));
                }
                Ok(Node::Class((0..k).map(|_| self.f64()).collect::<MlResult<_>>()?))
            }
            2 => Ok(Node::Value(self.f64()?)),
            t => Err(MlError::invalid(format!("unknown node tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub task: Task,
    pub n_classes: usize,
    /// Candidate features per node; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
}

/// Training data with labels already mapped to class indices for
/// classification.
struct Training<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    params: TreeParams,
    mtry: usize,
}

enum Best {
    None,
    Found { feature: usize, threshold: f64, cost: f64 },
}

impl Training<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        match self.params.task {
            Task::Classification => {
                let mut p = vec![0.0; self.params.n_classes];
                for &i in idx {
                    p[self.y[i] as usize] += 1.0;
                }
                let n = idx.len() as f64;
                p.iter_mut().for_each(|v| *v /= n);
                Node::Class(p)
            }
            Task::Regression => Node::Value(idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64),
        }
    }

    fn pure(&self, idx: &[usize]) -> bool {
        let first = self.y[idx[0]];
        idx.iter().all(|&i| self.y[i] == first)
    }

    /// Best split of `idx` on `feature`: lowest weighted Gini impurity or
    /// sum of squared errors, earliest threshold on ties.
    fn best_on(&self, feature: usize, idx: &[usize], best: &mut Best) {
        let mut pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (self.x[(i, feature)], self.y[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let mut consider = |cost: f64, a: f64, b: f64| {
            let better = match best {
                Best::None => true,
                Best::Found { cost: c, .. } => cost < *c,
            };
            if better {
                let mut t = a + (b - a) / 2.0;
                if t >= b {
                    t = a;
                }
                *best = Best::Found { feature, threshold: t, cost };
            }
        };
        match self.params.task {
            Task::Classification => {
                let k = self.params.n_classes;
                let mut right = vec![0.0; k];
                for &(_, y) in &pairs {
                    right[y as usize] += 1.0;
                }
                let mut left = vec![0.0; k];
                for s in 1..n {
                    let y = pairs[s - 1].1 as usize;
                    left[y] += 1.0;
                    right[y] -= 1.0;
                    if pairs[s - 1].0 == pairs[s].0 {
                        continue;
                    }
                    let (nl, nr) = (s as f64, (n - s) as f64);
                    let sl: f64 = left.iter().map(|c| c * c).sum();
                    let sr: f64 = right.iter().map(|c| c * c).sum();
                    // nl * gini(left) + nr * gini(right)
                    let cost = (nl - sl / nl) + (nr - sr / nr);
                    consider(cost, pairs[s - 1].0, pairs[s].0);
                }
            }
            Task::Regression => {
                let (mut sr, mut qr) = (0.0, 0.0);
                for &(_, y) in &pairs {
                    sr += y;
                    qr += y * y;
                }
                let (mut sl, mut ql) = (0.0, 0.0);
                for s in 1..n {
                    let y = pairs[s - 1].1;
                    sl += y;
                    ql += y * y;
                    sr -= y;
                    qr -= y * y;
                    if pairs[s - 1].0 == pairs[s].0 {
                        continue;
                    }
                    let (nl, nr) = (s as f64, (n - s) as f64);
                    let cost = (ql - sl * sl / nl) + (qr - sr * sr / nr);
                    consider(cost, pairs[s - 1].0, pairs[s].0);
                }
            }
        }
    }

    fn grow(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Node {
        if idx.len() < 2 || self.pure(idx) {
            return self.leaf(idx);
        }
        let mut features: Vec<usize> = (0..self.x.ncols()).collect();
        features.shuffle(rng);
        let mut best = Best::None;
        for f in &features[..self.mtry] {
            self.best_on(*f, idx, &mut best);
        }
        // No valid split among the sampled candidates: try the others.
        for f in &features[self.mtry..] {
            if !matches!(best, Best::None) {
                break;
            }
            self.best_on(*f, idx, &mut best);
        }
        let Best::Found { feature, threshold, .. } = best else {
            return self.leaf(idx);
        };
        let mut cut = 0;
        for i in 0..idx.len() {
            if self.x[(idx[i], feature)] <= threshold {
                idx.swap(i, cut);
                cut += 1;
            }
        }
        let (l, r) = idx.split_at_mut(cut);
        let left = Box::new(self.grow(l, rng));
        let right = Box::new(self.grow(r, rng));
        Node::Split { feature, threshold, left, right }
    }
}

/// Trains one unpruned tree on a bootstrap sample.
pub fn train_tree(x: &DMatrix<f64>, y: &[f64], params: TreeParams, rng: &mut ChaCha8Rng) -> MlResult<Node> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(MlError::invalid("cannot train a tree on empty data"));
    }
    if y.len() != n {
        return Err(MlError::invalid(format!("{n} rows but {} labels", y.len())));
    }
    if params.task == Task::Classification {
        if let Some(bad) = y.iter().find(|&&v| v < 0.0 || v.fract() != 0.0 || v as usize >= params.n_classes) {
            return Err(MlError::invalid(format!("label {bad} outside 0..{}", params.n_classes)));
        }
    }
    let p = x.ncols();
    let mtry = params.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p);
    let t = Training { x, y, params, mtry };
    let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    Ok(t.grow(&mut idx, rng))
}

/// Trains `n_trees` trees; tree `t` uses its own stream derived from
/// `base_seed`.
pub fn train_local_trees(x: &DMatrix<f64>, y: &[f64], n_trees: usize, params: TreeParams, base_seed: u64) -> MlResult<Vec<Node>> {
    if x.nrows() == 0 {
        return Err(MlError::invalid("cannot train trees on empty data"));
    }
    (0..n_trees).map(|t| train_tree(x, y, params, &mut rng_for(base_seed, &[t as u64]))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub task: Task,
    pub n_classes: usize,
    pub trees: Vec<Node>,
}

impl Forest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.task {
            Task::Classification => {
                let mut votes = vec![0usize; self.n_classes.max(1)];
                for t in &self.trees {
                    if let Node::Class(p) = t.predict(row) {
                        votes[argmax(p)] += 1;
                    }
                }
                argmax_count(&votes) as f64
            }
            Task::Regression => {
                let sum: f64 = self
                    .trees
                    .iter()
                    .map(|t| match t.predict(row) {
                        Node::Value(v) => *v,
                        _ => 0.0,
                    })
                    .sum();
                sum / self.trees.len() as f64
            }
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(i, j)]);
                self.predict_row(&row)
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![match self.task {
            Task::Classification => 0,
            Task::Regression => 1,
        }];
        out.extend_from_slice(&(self.n_classes as u32).to_be_bytes());
        out.extend_from_slice(&(self.trees.len() as u32).to_be_bytes());
        let mut buf = Vec::new();
        for t in &self.trees {
            buf.clear();
            t.encode(&mut buf);
            out.extend_from_slice(&(buf.len() as u32).to_be_bytes());
            out.extend_from_slice(&buf);
        }
        out
    }

    /// Decodes a forest and returns it with the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> MlResult<(Forest, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let task = match r.take::<1>()?[0] {
            0 => Task::Classification,
            1 => Task::Regression,
            t => return Err(MlError::invalid(format!("unknown task tag {t}"))),
        };
        let n_classes = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let body = bytes.get(r.pos..r.pos + len).ok_or_else(|| MlError::invalid("truncated forest"))?;
            trees.push(Node::decode(body)?);
            r.pos += len;
        }
        Ok((Forest { task, n_classes, trees }, r.pos))
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn argmax_count(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, c) in v.iter().enumerate() {
        if *c > v[best] {
            best = i;
        }
    }
    best
}

/// Largest-remainder apportionment of `total` by `weights`; leftover units
/// go to the largest remainders, lower index first on ties.
pub fn apportion(weights: &[u64], total: usize) -> MlResult<Vec<usize>> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return Err(MlError::invalid("apportionment needs a positive total weight"));
    }
    let mut counts = Vec::with_capacity(weights.len());
    let mut rema = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let q = total as u128 * w as u128;
        counts.push((q / sum) as usize);
        rema.push((q % sum, i));
    }
    let left = total - counts.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Concatenates local trees in the given order after checking that each
/// participant supplied its allotment.
pub fn merge_forests(locals: Vec<(Vec<Node>, usize)>, task: Task, n_classes: usize, target: usize) -> MlResult<Forest> {
    let mut trees = Vec::with_capacity(target);
    for (i, (local, expected)) in locals.into_iter().enumerate() {
        if local.len() != expected {
            return Err(MlError::invalid(format!("participant {i} supplied {} trees, expected {expected}", local.len())));
        }
        trees.extend(local);
    }
    if trees.len() != target {
        return Err(MlError::invalid(format!("merged forest has {} trees, expected {target}", trees.len())));
    }
    Ok(Forest { task, n_classes, trees })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class_params(k: usize) -> TreeParams {
        TreeParams { task: Task::Classification, n_classes: k, mtry: None }
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(apportion(&[5, 5], 100).unwrap(), vec![50, 50]);
        assert_eq!(apportion(&[10, 90], 100).unwrap(), vec![10, 90]);
        assert_eq!(apportion(&[1, 1, 1], 100).unwrap(), vec![34, 33, 33]);
        assert!(apportion(&[0, 0], 100).is_err());
    }

    #[test]
    fn single_class_gives_single_leaves() {
        let x = DMatrix::from_fn(20, 3, |i, j| (i * 7 + j) as f64);
        let trees = train_local_trees(&x, &[1.0; 20], 5, class_params(2), 1).unwrap();
        assert!(trees.iter().all(|t| *t == Node::Class(vec![0.0, 1.0])));
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let x = DMatrix::from_fn(40, 2, |i, j| if j == 0 { i as f64 } else { ((i * 13) % 7) as f64 });
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 1.0 }).collect();
        let forest =
            Forest { task: Task::Classification, n_classes: 2, trees: train_local_trees(&x, &y, 25, class_params(2), 7).unwrap() };
        assert_eq!(forest.predict(&x), y);
    }

    #[test]
    fn deterministic_per_seed() {
        let x = DMatrix::from_fn(30, 4, |i, j| ((i * 31 + j * 17) % 11) as f64);
        let y: Vec<f64> = (0..30).map(|i| (i % 3) as f64).collect();
        let a = train_local_trees(&x, &y, 3, class_params(3), 5).unwrap();
        assert_eq!(a, train_local_trees(&x, &y, 3, class_params(3), 5).unwrap());
        assert_ne!(a, train_local_trees(&x, &y, 3, class_params(3), 6).unwrap());
        assert!(train_local_trees(&DMatrix::zeros(0, 2), &[], 1, class_params(2), 0).is_err());
    }

    #[test]
    fn prediction_rules() {
        let ones = Forest { task: Task::Classification, n_classes: 2, trees: vec![Node::Class(vec![0.0, 1.0]); 3] };
        assert_eq!(ones.predict(&DMatrix::zeros(2, 1)), vec![1.0, 1.0]);
        let tie = Forest { task: Task::Classification, n_classes: 2, trees: vec![Node::Class(vec![1.0, 0.0]), Node::Class(vec![0.0, 1.0])] };
        assert_eq!(tie.predict_row(&[0.0]), 0.0);
        let reg = Forest { task: Task::Regression, n_classes: 0, trees: vec![Node::Value(2.0), Node::Value(4.0)] };
        assert_eq!(reg.predict_row(&[0.0]), 3.0);
    }

    #[test]
    fn regression_tree_fits_step_function() {
        let x = DMatrix::from_fn(30, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..30).map(|i| if i < 15 { -1.0 } else { 2.0 }).collect();
        let p = TreeParams { task: Task::Regression, n_classes: 0, mtry: None };
        let f = Forest { task: Task::Regression, n_classes: 0, trees: train_local_trees(&x, &y, 20, p, 3).unwrap() };
        let pred = f.predict(&x);
        assert!((pred[0] + 1.0).abs() < 1e-12 && (pred[29] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn merge_checks_allotments() {
        let leaf = || Node::Value(1.0);
        let f = merge_forests(vec![(vec![leaf(); 2], 2), (vec![leaf()], 1)], Task::Regression, 0, 3).unwrap();
        assert_eq!(f.trees.len(), 3);
        assert!(merge_forests(vec![(vec![leaf()], 2), (vec![leaf()], 1)], Task::Regression, 0, 3).is_err());
    }

    #[test]
    fn forest_encoding_round_trips() {
        let x = DMatrix::from_fn(25, 3, |i, j| ((i * 7 + j * 3) % 10) as f64 / 3.0);
        let y: Vec<f64> = (0..25).map(|i| (i % 2) as f64).collect();
        let f = Forest { task: Task::Classification, n_classes: 2, trees: train_local_trees(&x, &y, 4, class_params(2), 2).unwrap() };
        let bytes = f.encode();
        let (back, used) = Forest::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(used, bytes.len());
        assert!(Forest::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn apportionment_sums_exactly(weights in proptest::collection::vec(0u64..1000, 1..10), total in 0usize..500) {
            prop_assume!(weights.iter().any(|&w| w > 0));
            let c = apportion(&weights, total).unwrap();
            prop_assert_eq!(c.iter().sum::<usize>(), total);
            let w: u64 = weights.iter().sum();
            for (ci, wi) in c.iter().zip(&weights) {
                let exact = total as f64 * *wi as f64 / w as f64;
                prop_assert!((*ci as f64 - exact).abs() < 1.0);
            }
        }

        #[test]
        fn class_leaves_are_distributions(seed in any::<u64>()) {
            let x = DMatrix::from_fn(15, 2, |i, j| ((i as u64 * 7 + j as u64 + seed) % 5) as f64);
            let y: Vec<f64> = (0..15).map(|i| ((i as u64 + seed) % 3) as f64).collect();
            let trees = train_local_trees(&x, &y, 2, class_params(3), seed).unwrap();
            fn check(n: &Node) -> bool {
                match n {
                    Node::Split { left, right, .. } => check(left) && check(right),
                    Node::Class(p) => (p.iter().sum::<f64>() - 1.0).abs() < 1e-12,
                    Node::Value(_) => false,
                }
            }
            prop_assert!(trees.iter().all(check));
        }
    }
}
