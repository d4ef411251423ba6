//! Detection losses: RPN objective, smooth-L1, output cross-entropy and box
//! regression, and the triplet co-occurrence enhancement term.

use std::fmt;

use thiserror::Error;

use crate::graphs::CoGraph;
use crate::numerics::{Matrix, NodeId, Tape};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("anchor {index} is positive but has no box target")]
    MissingBoxTarget { index: usize },
    #[error("anchor {index} is negative but carries a box target")]
    UnexpectedBoxTarget { index: usize },
    #[error("region {index} has label {label}, catalog has {n} classes")]
    BadLabel { index: usize, label: usize, n: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Probabilities are clipped into this range before any logarithm.
pub const PROB_CLIP: (f64, f64) = (1e-12, 1.0 - 1e-12);

/// Smooth-L1 on a scalar residual: `0.5 x^2` for `|x| < 1`, `|x| - 0.5`
/// otherwise; continuous and C^1 at the branch point.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Per-anchor region-proposal predictions.
#[derive(Debug, Clone)]
pub struct RpnBatch {
    /// Objectness probabilities p_i.
    pub objectness: Vec<f64>,
    /// Box regression outputs t_i.
    pub box_deltas: Vec<[f64; 4]>,
}

/// Supervision for one anchor batch.
#[derive(Debug, Clone)]
pub struct RpnTargets {
    /// Objectness labels p*_i.
    pub positive: Vec<bool>,
    /// Box targets t*_i, present exactly where the anchor is positive.
    pub box_targets: Vec<Option<[f64; 4]>>,
}

/// Two-part RPN objective: mean binary log loss over the batch plus the
/// lambda-weighted smooth-L1 box term averaged over anchors and gated by the
/// objectness label.
pub fn rpn_loss(preds: &RpnBatch, targets: &RpnTargets, lambda: f64) -> Result<f64> {
    let n = preds.objectness.len();
    if preds.box_deltas.len() != n || targets.positive.len() != n || targets.box_targets.len() != n
    {
        return Err(LossError::Shape(format!(
            "rpn batch: {n} objectness, {} deltas, {} labels, {} targets",
            preds.box_deltas.len(),
            targets.positive.len(),
            targets.box_targets.len()
        )));
    }
    if n == 0 {
        return Err(LossError::Shape("rpn batch is empty".into()));
    }
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..n {
        let p = preds.objectness[i].clamp(PROB_CLIP.0, PROB_CLIP.1);
        cls += if targets.positive[i] { -p.ln() } else { -(1.0 - p).ln() };
        match (targets.positive[i], &targets.box_targets[i]) {
            (true, Some(target)) => {
                for c in 0..4 {
                    reg += smooth_l1(preds.box_deltas[i][c] - target[c]);
                }
            }
            (true, None) => return Err(LossError::MissingBoxTarget { index: i }),
            (false, Some(_)) => return Err(LossError::UnexpectedBoxTarget { index: i }),
            (false, None) => {}
        }
    }
    Ok(cls / n as f64 + lambda * reg / n as f64)
}

fn check_labels(labels: &[usize], m: usize, n: usize) -> Result<()> {
    if labels.len() != m {
        return Err(LossError::Shape(format!("{} labels for {m} regions", labels.len())));
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= n {
            return Err(LossError::BadLabel { index, label, n });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy of the class scores against one label per
/// region, recorded on the tape.
pub fn output_cls_loss(tape: &mut Tape, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (m, n) = (tape.value(scores).rows(), tape.value(scores).cols());
    check_labels(labels, m, n)?;
    let probs = tape.softmax_rows(scores)?;
    let probs = tape.clamp(probs, PROB_CLIP.0, PROB_CLIP.1);
    let logp = tape.log(probs);
    let mut mask = Matrix::zeros(m, n);
    for (i, &label) in labels.iter().enumerate() {
        mask.set(i, label, 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.hadamard(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / m as f64))
}

/// Smooth-L1 box regression on the tape: per-region coordinate residuals
/// against constant targets, optionally gated per region, averaged over all
/// regions.
pub fn output_box_loss(
    tape: &mut Tape,
    deltas: NodeId,
    targets: &Matrix,
    gate: Option<&[bool]>,
) -> Result<NodeId> {
    let (m, c) = (tape.value(deltas).rows(), tape.value(deltas).cols());
    if targets.rows() != m || targets.cols() != c {
        return Err(LossError::Shape(format!(
            "box targets {}x{} against deltas {m}x{c}",
            targets.rows(),
            targets.cols()
        )));
    }
    if gate.is_some_and(|g| g.len() != m) {
        return Err(LossError::Shape("one gate flag per region".into()));
    }
    let target_node = tape.constant(targets.clone());
    let diff = tape.sub(deltas, target_node)?;
    let mut per_coord = tape.smooth_l1(diff);
    if let Some(gate) = gate {
        let mut mask = Matrix::zeros(m, c);
        for (i, &keep) in gate.iter().enumerate() {
            if keep {
                for j in 0..c {
                    mask.set(i, j, 1.0);
                }
            }
        }
        let mask = tape.constant(mask);
        per_coord = tape.hadamard(per_coord, mask)?;
    }
    let total = tape.sum(per_coord);
    Ok(tape.scale(total, 1.0 / m as f64))
}

/// Non-fatal conditions from neighbor-set construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LossWarning {
    /// Fewer than k+1 other classes exist; sets were truncated.
    NeighborSetsTruncated { requested: usize, available: usize },
}

impl fmt::Display for LossWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NeighborSetsTruncated { requested, available } => write!(
                f,
                "neighbor sets truncated: requested k+1 = {requested}, only {available} other classes"
            ),
        }
    }
}

/// Per-label positive/negative neighbor sets over the co-occurrence graph:
/// positives are the k+1 largest-weight neighbors, negatives the k+1
/// smallest (zero-weight classes included, the label itself excluded). Ties
/// break by ascending class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn build(co: &CoGraph, k: usize) -> (Self, Vec<LossWarning>) {
        let n = co.n();
        let requested = k + 1;
        let take = requested.min(n.saturating_sub(1));
        let mut warnings = Vec::new();
        if take < requested {
            warnings.push(LossWarning::NeighborSetsTruncated { requested, available: take });
        }
        let mut positives = Vec::with_capacity(n);
        let mut negatives = Vec::with_capacity(n);
        for label in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&c| c != label).collect();
            others.sort_by(|&a, &b| {
                co.weights()
                    .get(label, b)
                    .partial_cmp(&co.weights().get(label, a))
                    .expect("graph weights are finite")
                    .then(a.cmp(&b))
            });
            positives.push(others[..take].to_vec());
            let mut ascending = others;
            ascending.sort_by(|&a, &b| {
                co.weights()
                    .get(label, a)
                    .partial_cmp(&co.weights().get(label, b))
                    .expect("graph weights are finite")
                    .then(a.cmp(&b))
            });
            negatives.push(ascending[..take].to_vec());
        }
        (Self { positives, negatives }, warnings)
    }

    pub fn n(&self) -> usize {
        self.positives.len()
    }

    pub fn positives(&self, label: usize) -> &[usize] {
        &self.positives[label]
    }

    pub fn negatives(&self, label: usize) -> &[usize] {
        &self.negatives[label]
    }
}

/// Triplet co-occurrence enhancement term, recorded on the tape. For each
/// anchor region i with ground-truth label l_i, rewards image-level coverage
/// (over all regions) of l_i's positive neighbor labels proportionally to
/// p_i(l_i), and penalizes coverage of negative neighbor labels by the
/// complementary weight:
///
/// `L_aux^i = p_i(l_i) * sum_j [1 - prod_m (1 - p_m(pos_j))]
///          - (1 - p_i(l_i)) * sum_q [1 - prod_n (1 - p_n(neg_q))]`
///
/// summed over anchors. Training maximizes this term by minimizing its
/// negation; the caller applies the sign and weight.
pub fn aux_loss(
    tape: &mut Tape,
    pseudo_probs: NodeId,
    labels: &[usize],
    sets: &NeighborSets,
) -> Result<NodeId> {
    let (m, n) = (tape.value(pseudo_probs).rows(), tape.value(pseudo_probs).cols());
    check_labels(labels, m, n)?;
    if sets.n() != n {
        return Err(LossError::Shape(format!(
            "neighbor sets over {} classes, probabilities over {n}",
            sets.n()
        )));
    }
    // Image-level coverage per class: 1 - prod_m (1 - p_mc), shape 1 x N.
    let ones_mn = tape.constant(Matrix::filled(m, n, 1.0));
    let complement = tape.sub(ones_mn, pseudo_probs)?;
    let product = tape.col_product(complement);
    let ones_1n = tape.constant(Matrix::filled(1, n, 1.0));
    let coverage = tape.sub(ones_1n, product)?;

    let mut total: Option<NodeId> = None;
    for (i, &label) in labels.iter().enumerate() {
        let p_anchor = tape.pick(pseudo_probs, i, label);
        let one = tape.constant(Matrix::filled(1, 1, 1.0));
        let p_complement = tape.sub(one, p_anchor)?;
        let sum_over = |tape: &mut Tape, classes: &[usize]| -> Result<NodeId> {
            let mut acc: Option<NodeId> = None;
            for &c in classes {
                let term = tape.pick(coverage, 0, c);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            Ok(acc.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1))))
        };
        let pos_sum = sum_over(tape, sets.positives(label))?;
        let neg_sum = sum_over(tape, sets.negatives(label))?;
        let reward = tape.hadamard(p_anchor, pos_sum)?;
        let penalty = tape.hadamard(p_complement, neg_sum)?;
        let term = tape.sub(reward, penalty)?;
        total = Some(match total {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    total.ok_or_else(|| LossError::Shape("aux loss needs at least one anchor".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{CoGraph, GraphExport, GraphKind};

    fn rng_vals(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    fn co_from_weights(n: usize, entries: &[(usize, usize, f64)]) -> CoGraph {
        let export = GraphExport {
            n,
            kind: GraphKind::Co,
            edges: entries.iter().map(|&(i, j, w)| (i, j, w)).collect(),
            known: None,
        };
        CoGraph::from_export(&export).unwrap()
    }

    #[test]
    fn smooth_l1_branches_and_continuity() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-3.0), 2.5);
        // Both branches give 0.5 at |x| = 1.
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert!((smooth_l1(1.0 - 1e-12) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rpn_loss_degenerate_cases() {
        let perfect = RpnBatch {
            objectness: vec![1.0, 0.0],
            box_deltas: vec![[0.1, 0.2, -0.3, 0.4], [0.0; 4]],
        };
        let targets = RpnTargets {
            positive: vec![true, false],
            box_targets: vec![Some([0.1, 0.2, -0.3, 0.4]), None],
        };
        assert!(rpn_loss(&perfect, &targets, 1.0).unwrap() <= 1e-10);

        let single = RpnBatch { objectness: vec![0.5], box_deltas: vec![[0.0; 4]] };
        let neg = RpnTargets { positive: vec![false], box_targets: vec![None] };
        assert!((rpn_loss(&single, &neg, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rpn_loss_matches_summation_oracle() {
        let n = 8;
        let probs: Vec<f64> =
            rng_vals(1, n).into_iter().map(|v| 0.5 + 0.49 * v).collect();
        let deltas: Vec<[f64; 4]> = (0..n)
            .map(|i| {
                let v = rng_vals(10 + i as u64, 4);
                [v[0], v[1], v[2], v[3]]
            })
            .collect();
        let positive: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let box_targets: Vec<Option<[f64; 4]>> = (0..n)
            .map(|i| {
                positive[i].then(|| {
                    let v = rng_vals(30 + i as u64, 4);
                    [v[0], v[1], v[2], v[3]]
                })
            })
            .collect();
        let lambda = 1.7;
        let got = rpn_loss(
            &RpnBatch { objectness: probs.clone(), box_deltas: deltas.clone() },
            &RpnTargets { positive: positive.clone(), box_targets: box_targets.clone() },
            lambda,
        )
        .unwrap();
        // Independent accumulation, written as the two explicit sums.
        let mut expected = 0.0;
        for i in 0..n {
            let p = probs[i];
            expected += if positive[i] { -p.ln() } else { -(1.0 - p).ln() } / n as f64;
        }
        for i in 0..n {
            if let Some(t) = box_targets[i] {
                let mut term = 0.0;
                for c in 0..4 {
                    let x: f64 = deltas[i][c] - t[c];
                    term += if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
                }
                expected += lambda * term / n as f64;
            }
        }
        assert!((got - expected).abs() < 1e-10);
        assert!(got >= 0.0);
    }

    #[test]
    fn rpn_loss_box_term_vanishes_without_positives() {
        let batch = RpnBatch {
            objectness: vec![0.2, 0.8],
            box_deltas: vec![[5.0, 5.0, 5.0, 5.0], [3.0; 4]],
        };
        let targets = RpnTargets { positive: vec![false, false], box_targets: vec![None, None] };
        let with_huge_lambda = rpn_loss(&batch, &targets, 1e9).unwrap();
        let with_zero_lambda = rpn_loss(&batch, &targets, 0.0).unwrap();
        assert_eq!(with_huge_lambda, with_zero_lambda);
    }

    #[test]
    fn rpn_loss_validates_target_consistency() {
        let batch = RpnBatch { objectness: vec![0.5], box_deltas: vec![[0.0; 4]] };
        let missing = RpnTargets { positive: vec![true], box_targets: vec![None] };
        assert!(matches!(
            rpn_loss(&batch, &missing, 1.0),
            Err(LossError::MissingBoxTarget { index: 0 })
        ));
        let spurious =
            RpnTargets { positive: vec![false], box_targets: vec![Some([0.0; 4])] };
        assert!(matches!(
            rpn_loss(&batch, &spurious, 1.0),
            Err(LossError::UnexpectedBoxTarget { index: 0 })
        ));
    }

    #[test]
    fn output_cls_loss_examples_and_oracle() {
        // Saturated correct scores: loss effectively zero.
        let mut tape = Tape::new();
        let mut scores = Matrix::zeros(2, 3);
        scores.set(0, 1, 40.0);
        scores.set(1, 2, 40.0);
        let node = tape.parameter(scores);
        let loss = output_cls_loss(&mut tape, node, &[1, 2]).unwrap();
        assert!(tape.value(loss).get(0, 0) <= 1e-10);

        // Uniform scores over N = 4: ln 4 per region.
        let mut tape = Tape::new();
        let node = tape.parameter(Matrix::zeros(3, 4));
        let loss = output_cls_loss(&mut tape, node, &[0, 3, 1]).unwrap();
        assert!((tape.value(loss).get(0, 0) - 4.0f64.ln()).abs() < 1e-12);

        // Random case against an explicit per-row softmax/log oracle.
        let (m, n) = (4, 5);
        let scores_v = Matrix::from_vec(m, n, rng_vals(3, m * n)).unwrap();
        let labels = [2usize, 0, 4, 1];
        let mut tape = Tape::new();
        let node = tape.parameter(scores_v.clone());
        let loss = output_cls_loss(&mut tape, node, &labels).unwrap();
        let mut expected = 0.0;
        for i in 0..m {
            let row = scores_v.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let p = (row[labels[i]] - max).exp() / denom;
            expected -= p.ln() / m as f64;
        }
        assert!((tape.value(loss).get(0, 0) - expected).abs() < 1e-10);
    }

    #[test]
    fn neighbor_sets_rank_with_deterministic_ties() {
        // Label 0 weights: w(0,1) = 0.9, w(0,2) = 0.4, w(0,3) = 0.4, w(0,4) = 0.
        let co = co_from_weights(
            5,
            &[(0, 1, 0.9), (1, 0, 0.9), (0, 2, 0.4), (2, 0, 0.4), (0, 3, 0.4), (3, 0, 0.4)],
        );
        let (sets, warnings) = NeighborSets::build(&co, 1);
        assert!(warnings.is_empty());
        // Positives: 0.9 then the 0.4 tie broken toward class 2.
        assert_eq!(sets.positives(0), &[1, 2]);
        // Negatives: zero-weight class 4 first, then the 0.4 tie toward 2.
        assert_eq!(sets.negatives(0), &[4, 2]);
        // The label itself never appears.
        for label in 0..5 {
            assert!(!sets.positives(label).contains(&label));
            assert!(!sets.negatives(label).contains(&label));
        }
    }

    #[test]
    fn neighbor_sets_truncate_with_warning() {
        let co = co_from_weights(3, &[(0, 1, 0.5), (1, 0, 0.5)]);
        let (sets, warnings) = NeighborSets::build(&co, 4);
        assert_eq!(
            warnings,
            vec![LossWarning::NeighborSetsTruncated { requested: 5, available: 2 }]
        );
        assert_eq!(sets.positives(0).len(), 2);
        assert_eq!(sets.negatives(2).len(), 2);
    }

    fn fixture_sets() -> NeighborSets {
        // k = 0: label 0 -> pos {1}, neg {3}; label 2 -> pos {1}, neg {3}.
        let co = co_from_weights(
            4,
            &[
                (0, 1, 0.9),
                (1, 0, 0.9),
                (0, 2, 0.4),
                (2, 0, 0.4),
                (0, 3, 0.1),
                (3, 0, 0.1),
                (2, 1, 0.6),
                (1, 2, 0.6),
            ],
        );
        let (sets, warnings) = NeighborSets::build(&co, 0);
        assert!(warnings.is_empty());
        assert_eq!(sets.positives(0), &[1]);
        assert_eq!(sets.negatives(0), &[3]);
        assert_eq!(sets.positives(2), &[1]);
        assert_eq!(sets.negatives(2), &[3]);
        sets
    }

    #[test]
    fn aux_loss_matches_hand_expanded_fixture() {
        // M = 2, N = 4, k = 0; expanded by hand:
        //   coverage(1) = 1 - (1-0.1)(1-0.3) = 0.37
        //   coverage(3) = 1 - (1-0.05)(1-0.1) = 0.145
        //   anchor 0 (label 0): 0.7*0.37 - 0.3*0.145 = 0.2155
        //   anchor 1 (label 2): 0.4*0.37 - 0.6*0.145 = 0.061
        let sets = fixture_sets();
        let probs = Matrix::from_rows(&[
            vec![0.7, 0.1, 0.15, 0.05],
            vec![0.2, 0.3, 0.4, 0.1],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let node = tape.parameter(probs);
        let loss = aux_loss(&mut tape, node, &[0, 2], &sets).unwrap();
        assert!((tape.value(loss).get(0, 0) - 0.2765).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_saturated_extremes() {
        let sets = fixture_sets();
        // Anchor fully confident, its positive label covered with certainty,
        // negatives nowhere: reward = k+1 = 1, penalty weight 0.
        let mut probs = Matrix::zeros(1, 4);
        probs.set(0, 0, 1.0);
        probs.set(0, 1, 1.0);
        let mut tape = Tape::new();
        let node = tape.parameter(probs);
        let loss = aux_loss(&mut tape, node, &[0], &sets).unwrap();
        assert!((tape.value(loss).get(0, 0) - 1.0).abs() < 1e-12);

        // Anchor certain of the wrong thing and the negative label covered
        // with certainty: -(k+1).
        let mut probs = Matrix::zeros(1, 4);
        probs.set(0, 3, 1.0);
        let mut tape = Tape::new();
        let node = tape.parameter(probs);
        let loss = aux_loss(&mut tape, node, &[0], &sets).unwrap();
        assert!((tape.value(loss).get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_monotone_in_positive_coverage() {
        let sets = fixture_sets();
        let base = Matrix::from_rows(&[
            vec![0.7, 0.1, 0.15, 0.05],
            vec![0.2, 0.3, 0.4, 0.1],
        ])
        .unwrap();
        let eval = |probs: Matrix| {
            let mut tape = Tape::new();
            let node = tape.parameter(probs);
            let loss = aux_loss(&mut tape, node, &[0, 2], &sets).unwrap();
            tape.value(loss).get(0, 0)
        };
        let baseline = eval(base.clone());
        // Raising any region's probability of positive label 1 never hurts.
        for region in 0..2 {
            let mut bumped = base.clone();
            bumped.set(region, 1, bumped.get(region, 1) + 0.05);
            assert!(eval(bumped) >= baseline - 1e-15);
        }
    }

    #[test]
    fn aux_loss_gradient_matches_finite_differences() {
        let sets = fixture_sets();
        let base = Matrix::from_rows(&[
            vec![0.7, 0.1, 0.15, 0.05],
            vec![0.2, 0.3, 0.4, 0.1],
        ])
        .unwrap();
        let labels = [0usize, 2];
        let mut tape = Tape::new();
        let node = tape.parameter(base.clone());
        let loss = aux_loss(&mut tape, node, &labels, &sets).unwrap();
        let analytic = tape.backward(loss).unwrap().get(node).unwrap().clone();
        let step = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p.set(i, j, p.get(i, j) + delta);
                    let mut t = Tape::new();
                    let nd = t.parameter(p);
                    let l = aux_loss(&mut t, nd, &labels, &sets).unwrap();
                    t.value(l).get(0, 0)
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let a = analytic.get(i, j);
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-7,
                    "({i},{j}): {a} vs {fd}"
                );
            }
        }
    }

    /// Combined objective (cross-entropy + box smooth-L1 + weighted negated
    /// auxiliary term) stays finite and its gradient w.r.t. the score and
    /// pseudo-logit inputs matches finite differences.
    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let sets = fixture_sets();
        let (m, n) = (2, 4);
        let scores_v = Matrix::from_vec(m, n, rng_vals(5, m * n)).unwrap();
        let pseudo_v = Matrix::from_vec(m, n, rng_vals(6, m * n)).unwrap();
        let deltas_v = Matrix::from_vec(m, 4, rng_vals(7, m * 4)).unwrap();
        let targets = Matrix::from_vec(m, 4, rng_vals(8, m * 4)).unwrap();
        let labels = [0usize, 2];
        let lambda_aux = 0.1;

        let build = |t: &mut Tape, scores: NodeId, pseudo: NodeId, deltas: NodeId| -> NodeId {
            let cls = output_cls_loss(t, scores, &labels).unwrap();
            let boxes = output_box_loss(t, deltas, &targets, None).unwrap();
            let probs = t.softmax_rows(pseudo).unwrap();
            let aux = aux_loss(t, probs, &labels, &sets).unwrap();
            let neg_aux = t.scale(aux, -lambda_aux);
            let partial = t.add(cls, boxes).unwrap();
            t.add(partial, neg_aux).unwrap()
        };

        let mut tape = Tape::new();
        let scores = tape.parameter(scores_v.clone());
        let pseudo = tape.parameter(pseudo_v.clone());
        let deltas = tape.parameter(deltas_v.clone());
        let loss = build(&mut tape, scores, pseudo, deltas);
        assert!(tape.value(loss).get(0, 0).is_finite());
        let grads = tape.backward(loss).unwrap();
        let step = 1e-5;
        let check = |which: usize, i: usize, j: usize, analytic: f64| {
            let eval = |delta: f64| {
                let mut sv = scores_v.clone();
                let mut pv = pseudo_v.clone();
                let mut dv = deltas_v.clone();
                match which {
                    0 => sv.set(i, j, sv.get(i, j) + delta),
                    1 => pv.set(i, j, pv.get(i, j) + delta),
                    _ => dv.set(i, j, dv.get(i, j) + delta),
                }
                let mut t = Tape::new();
                let s = t.parameter(sv);
                let p = t.parameter(pv);
                let d = t.parameter(dv);
                let l = build(&mut t, s, p, d);
                t.value(l).get(0, 0)
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            assert!(
                (analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()) + 1e-7,
                "input {which} ({i},{j}): {analytic} vs {fd}"
            );
        };
        for i in 0..m {
            for j in 0..n {
                check(0, i, j, grads.get(scores).unwrap().get(i, j));
                check(1, i, j, grads.get(pseudo).unwrap().get(i, j));
            }
        }
        for i in 0..m {
            for j in 0..4 {
                check(2, i, j, grads.get(deltas).unwrap().get(i, j));
            }
        }
    }

    #[test]
    fn output_box_loss_gate_zeroes_unsupervised_rows() {
        let mut tape = Tape::new();
        let deltas = tape.parameter(Matrix::filled(2, 4, 3.0));
        let targets = Matrix::zeros(2, 4);
        let loss =
            output_box_loss(&mut tape, deltas, &targets, Some(&[true, false])).unwrap();
        // Row 0 contributes 4 * (3 - 0.5), row 1 nothing; mean over M = 2.
        assert!((tape.value(loss).get(0, 0) - 4.0 * 2.5 / 2.0).abs() < 1e-12);
    }
}
