//! Per-image relational feature extraction: pseudo-classification logits,
//! class-graph condensation onto regions, the visual semantic graph, and the
//! assembled heterogeneous region-graph stack.
//!
//! Every operation records onto the gradient tape so the relational stack is
//! differentiable end to end with respect to the learned parameters and the
//! pseudo logits.

use crate::metrics::BBox;
use crate::numerics::{Matrix, NodeId, NumericsError, Result, Tape};

/// One image's region proposals: visual features (one row per region), the
/// proposal boxes, and optional ground-truth class labels for training.
#[derive(Debug, Clone)]
pub struct RoIBatch {
    pub features: Matrix,
    pub boxes: Vec<BBox>,
    pub labels: Option<Vec<usize>>,
}

impl RoIBatch {
    pub fn new(features: Matrix, boxes: Vec<BBox>, labels: Option<Vec<usize>>) -> Result<Self> {
        let m = features.rows();
        if m == 0 {
            return Err(NumericsError::Empty { op: "RoIBatch::new" });
        }
        if boxes.len() != m || labels.as_ref().is_some_and(|l| l.len() != m) {
            return Err(NumericsError::DimMismatch {
                op: "RoIBatch::new",
                left_rows: m,
                left_cols: features.cols(),
                right_rows: boxes.len(),
                right_cols: labels.as_ref().map_or(m, |l| l.len()),
            });
        }
        Ok(Self { features, boxes, labels })
    }

    pub fn m(&self) -> usize {
        self.features.rows()
    }
}

/// Pseudo-classification logits: one fully connected layer over the region
/// features, `logits = features * w + b` with `w` h x N and `b` 1 x N.
pub fn pseudo_classify(
    tape: &mut Tape,
    features: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let product = tape.matmul(features, w)?;
    tape.add_row_broadcast(product, b)
}

/// Condenses an N x N class graph onto M regions through the pseudo
/// probabilities: `softmax_rows(logits) * class_graph * softmax_rows(logits)^T`.
pub fn condense(tape: &mut Tape, class_graph: NodeId, logits: NodeId) -> Result<NodeId> {
    let probs = tape.softmax_rows(logits)?;
    let left = tape.matmul(probs, class_graph)?;
    let probs_t = tape.transpose(probs);
    tape.matmul(left, probs_t)
}

/// Options for the visual semantic graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct VisualGraphOptions {
    /// Normalize latent rows to unit length before the dot products
    /// (cosine similarity instead of raw inner products).
    pub cosine: bool,
    /// Dot the raw region features instead of the latent outputs, skipping
    /// the learned projection entirely.
    pub raw_features: bool,
}

/// Latent region vectors `F(Z)`: an affine map plus ReLU (`w` h x h',
/// `b` 1 x h').
pub fn visual_latent(tape: &mut Tape, features: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let affine = tape.matmul(features, w)?;
    let affine = tape.add_row_broadcast(affine, b)?;
    Ok(tape.relu(affine))
}

/// Gram matrix of latent rows, optionally unit-normalized first (cosine
/// similarity). Symmetric positive semidefinite by construction.
pub fn gram_graph(tape: &mut Tape, latent: NodeId, cosine: bool) -> Result<NodeId> {
    let rows = if cosine { tape.row_unit_normalize(latent, 1e-12) } else { latent };
    let rows_t = tape.transpose(rows);
    tape.matmul(rows, rows_t)
}

/// Visual semantic graph: Gram matrix of the latent region vectors,
/// `G = F(Z) * F(Z)^T`.
pub fn visual_semantic_graph(
    tape: &mut Tape,
    features: NodeId,
    w: NodeId,
    b: NodeId,
    options: VisualGraphOptions,
) -> Result<NodeId> {
    let latent = if options.raw_features {
        features
    } else {
        visual_latent(tape, features, w, b)?
    };
    gram_graph(tape, latent, options.cosine)
}

/// Edge-type tag for one channel of the heterogeneous region graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelTag {
    CondensedCo,
    CondensedSize,
    VisualSemantic,
    Identity,
}

/// Ordered stack of M x M adjacency channels feeding the graph transformer.
#[derive(Debug, Clone)]
pub struct HeterogeneousRoIGraph {
    channels: Vec<(ChannelTag, NodeId)>,
    m: usize,
}

impl HeterogeneousRoIGraph {
    /// Builds a stack from explicit channels; all must be square with equal
    /// dimension. [`assemble`] is the conventional constructor.
    pub fn from_parts(tape: &Tape, channels: Vec<(ChannelTag, NodeId)>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or(NumericsError::Empty { op: "HeterogeneousRoIGraph::from_parts" })?;
        let m = tape.value(first.1).rows();
        for (_, node) in &channels {
            let value = tape.value(*node);
            if value.rows() != m || value.cols() != m {
                return Err(NumericsError::DimMismatch {
                    op: "HeterogeneousRoIGraph::from_parts",
                    left_rows: m,
                    left_cols: m,
                    right_rows: value.rows(),
                    right_cols: value.cols(),
                });
            }
        }
        Ok(Self { channels, m })
    }

    pub fn channels(&self) -> &[(ChannelTag, NodeId)] {
        &self.channels
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// Stacks the three relational channels (plus the identity channel when
/// requested) in a fixed order: condensed co-occurrence, condensed size,
/// visual semantic, identity.
pub fn assemble(
    tape: &mut Tape,
    condensed_co: NodeId,
    condensed_size: NodeId,
    visual: NodeId,
    include_identity: bool,
) -> Result<HeterogeneousRoIGraph> {
    let m = tape.value(condensed_co).rows();
    let mut channels = vec![
        (ChannelTag::CondensedCo, condensed_co),
        (ChannelTag::CondensedSize, condensed_size),
        (ChannelTag::VisualSemantic, visual),
    ];
    for (tag, node) in &channels {
        let value = tape.value(*node);
        if value.rows() != m || value.cols() != m {
            return Err(NumericsError::DimMismatch {
                op: match tag {
                    ChannelTag::CondensedCo => "assemble: condensed_co",
                    ChannelTag::CondensedSize => "assemble: condensed_size",
                    _ => "assemble: visual",
                },
                left_rows: m,
                left_cols: m,
                right_rows: value.rows(),
                right_cols: value.cols(),
            });
        }
    }
    if include_identity {
        let identity = tape.constant(Matrix::identity(m));
        channels.push((ChannelTag::Identity, identity));
    }
    Ok(HeterogeneousRoIGraph { channels, m })
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn boxes(m: usize) -> Vec<BBox> {
        (0..m).map(|i| BBox::new(i as f64 * 20.0, 0.0, 10.0, 10.0)).collect()
    }

    #[test]
    fn batch_validates_shapes() {
        assert!(RoIBatch::new(Matrix::zeros(3, 4), boxes(3), None).is_ok());
        assert!(RoIBatch::new(Matrix::zeros(3, 4), boxes(2), None).is_err());
        assert!(RoIBatch::new(Matrix::zeros(3, 4), boxes(3), Some(vec![0, 1])).is_err());
    }

    #[test]
    fn pseudo_classify_zero_params_gives_uniform_softmax() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(2, 3, rng_vals(1, 6)).unwrap());
        let w = tape.parameter(Matrix::zeros(3, 4));
        let b = tape.parameter(Matrix::zeros(1, 4));
        let logits = pseudo_classify(&mut tape, z, w, b).unwrap();
        assert_eq!(tape.value(logits).rows(), 2);
        assert_eq!(tape.value(logits).cols(), 4);
        let probs = tape.softmax_rows(logits).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((tape.value(probs).get(i, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pseudo_classify_matches_triple_loop_oracle() {
        let zv = Matrix::from_vec(5, 3, rng_vals(2, 15)).unwrap();
        let wv = Matrix::from_vec(3, 4, rng_vals(3, 12)).unwrap();
        let bv = Matrix::from_vec(1, 4, rng_vals(4, 4)).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(zv.clone());
        let w = tape.parameter(wv.clone());
        let b = tape.parameter(bv.clone());
        let logits = pseudo_classify(&mut tape, z, w, b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut expected = bv.get(0, j);
                for k in 0..3 {
                    expected += zv.get(i, k) * wv.get(k, j);
                }
                assert!((tape.value(logits).get(i, j) - expected).abs() < 1e-12);
            }
        }
        // M = 1 single region keeps a 1 x N shape.
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(1, 3, rng_vals(5, 3)).unwrap());
        let w = tape.parameter(wv);
        let b = tape.parameter(bv);
        let logits = pseudo_classify(&mut tape, z, w, b).unwrap();
        assert_eq!((tape.value(logits).rows(), tape.value(logits).cols()), (1, 4));
    }

    fn saturated_logits(labels: &[usize], n: usize) -> Matrix {
        let mut logits = Matrix::zeros(labels.len(), n);
        for (i, &l) in labels.iter().enumerate() {
            logits.set(i, l, 30.0);
        }
        logits
    }

    #[test]
    fn condense_saturated_probs_pick_out_class_entries() {
        let n = 4;
        let a = Matrix::from_vec(n, n, (0..16).map(|v| v as f64 / 10.0).collect()).unwrap();
        let labels = [2usize, 0, 3];
        let mut tape = Tape::new();
        let class_graph = tape.constant(a.clone());
        let logits = tape.parameter(saturated_logits(&labels, n));
        let condensed = condense(&mut tape, class_graph, logits).unwrap();
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                assert!(
                    (tape.value(condensed).get(i, j) - a.get(li, lj)).abs() < 1e-6,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn condense_uniform_probs_average_everything() {
        let n = 4;
        let a = Matrix::from_vec(n, n, rng_vals(6, 16)).unwrap();
        let mean = a.sum() / 16.0;
        let mut tape = Tape::new();
        let class_graph = tape.constant(a);
        let logits = tape.parameter(Matrix::zeros(3, n));
        let condensed = condense(&mut tape, class_graph, logits).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((tape.value(condensed).get(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condense_preserves_symmetry_and_softmax_shift_invariance() {
        let n = 5;
        let raw = Matrix::from_vec(n, n, rng_vals(7, 25)).unwrap();
        let sym = raw.add(&raw.transpose()).unwrap();
        let logits_v = Matrix::from_vec(3, n, rng_vals(8, 15)).unwrap();

        let run = |logits_value: Matrix| {
            let mut tape = Tape::new();
            let class_graph = tape.constant(sym.clone());
            let logits = tape.parameter(logits_value);
            let condensed = condense(&mut tape, class_graph, logits).unwrap();
            tape.value(condensed).clone()
        };
        let base = run(logits_v.clone());
        for i in 0..3 {
            for j in 0..3 {
                assert!((base.get(i, j) - base.get(j, i)).abs() < 1e-9);
            }
        }
        // Shifting any row of the logits by a constant leaves the result.
        let mut shifted = logits_v;
        for j in 0..n {
            shifted.set(1, j, shifted.get(1, j) + 7.25);
        }
        let other = run(shifted);
        for i in 0..3 {
            for j in 0..3 {
                assert!((base.get(i, j) - other.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn condense_identity_class_graph_with_distinct_onehots() {
        let n = 6;
        let labels = [4usize, 1, 3];
        let mut tape = Tape::new();
        let class_graph = tape.constant(Matrix::identity(n));
        let logits = tape.parameter(saturated_logits(&labels, n));
        let condensed = condense(&mut tape, class_graph, logits).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((tape.value(condensed).get(i, j) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn condense_is_differentiable_wrt_logits() {
        let n = 4;
        let a = Matrix::from_vec(n, n, rng_vals(9, 16)).unwrap();
        let logits0 = Matrix::from_vec(3, n, rng_vals(10, 12)).unwrap();
        let build = |tape: &mut Tape, logits: NodeId| {
            let class_graph = tape.constant(a.clone());
            let condensed = condense(tape, class_graph, logits).unwrap();
            tape.sum(condensed)
        };
        let mut tape = Tape::new();
        let logits = tape.parameter(logits0.clone());
        let loss = build(&mut tape, logits);
        let analytic = tape.backward(loss).unwrap().get(logits).unwrap().clone();
        let step = 1e-5;
        for i in 0..3 {
            for j in 0..n {
                let eval = |delta: f64| {
                    let mut v = logits0.clone();
                    v.set(i, j, v.get(i, j) + delta);
                    let mut t = Tape::new();
                    let node = t.parameter(v);
                    let l = build(&mut t, node);
                    t.value(l).get(0, 0)
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let a = analytic.get(i, j);
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-7,
                    "({i},{j}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn visual_graph_basic_properties() {
        let m = 4;
        let h = 3;
        let mut fv = Matrix::from_vec(m, h, rng_vals(11, 12)).unwrap();
        // Regions 1 and 2 share identical features.
        for j in 0..h {
            fv.set(2, j, fv.get(1, j));
        }
        let mut tape = Tape::new();
        let z = tape.constant(fv);
        let w = tape.parameter(Matrix::from_vec(h, 5, rng_vals(12, 15)).unwrap());
        let b = tape.parameter(Matrix::from_vec(1, 5, rng_vals(13, 5)).unwrap());
        let g = visual_semantic_graph(&mut tape, z, w, b, VisualGraphOptions::default()).unwrap();
        let gv = tape.value(g);
        assert_eq!((gv.rows(), gv.cols()), (m, m));
        for k in 0..m {
            assert_eq!(gv.get(1, k), gv.get(2, k));
            assert_eq!(gv.get(k, 1), gv.get(k, 2));
            for l in 0..m {
                assert!((gv.get(k, l) - gv.get(l, k)).abs() < 1e-12);
            }
        }
        // Positive semidefinite: x^T G x >= -1e-9 for sampled x.
        for s in 0..20 {
            let x = Matrix::from_vec(m, 1, rng_vals(100 + s, m)).unwrap();
            let gx = gv.matmul(&x).unwrap();
            let quad = x.transpose().matmul(&gx).unwrap().get(0, 0);
            assert!(quad >= -1e-9, "x^T G x = {quad}");
        }
    }

    #[test]
    fn visual_graph_zero_projection_gives_zero_graph() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(3, 4, rng_vals(14, 12)).unwrap());
        let w = tape.parameter(Matrix::zeros(4, 5));
        let b = tape.parameter(Matrix::zeros(1, 5));
        let g = visual_semantic_graph(&mut tape, z, w, b, VisualGraphOptions::default()).unwrap();
        assert_eq!(tape.value(g), &Matrix::zeros(3, 3));
    }

    #[test]
    fn visual_graph_permutation_equivariance() {
        let m = 4;
        let h = 3;
        let fv = Matrix::from_vec(m, h, rng_vals(15, 12)).unwrap();
        let wv = Matrix::from_vec(h, 4, rng_vals(16, 12)).unwrap();
        let bv = Matrix::from_vec(1, 4, rng_vals(17, 4)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Matrix::zeros(m, h);
        for i in 0..m {
            for j in 0..h {
                permuted.set(perm[i], j, fv.get(i, j));
            }
        }
        let run = |features: Matrix| {
            let mut tape = Tape::new();
            let z = tape.constant(features);
            let w = tape.parameter(wv.clone());
            let b = tape.parameter(bv.clone());
            let g =
                visual_semantic_graph(&mut tape, z, w, b, VisualGraphOptions::default()).unwrap();
            tape.value(g).clone()
        };
        let base = run(fv);
        let shuffled = run(permuted);
        for i in 0..m {
            for j in 0..m {
                assert_eq!(base.get(i, j), shuffled.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn visual_graph_toggles() {
        let fv = Matrix::from_vec(3, 4, rng_vals(18, 12)).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(fv.clone());
        let w = tape.parameter(Matrix::from_vec(4, 4, rng_vals(19, 16)).unwrap());
        let b = tape.parameter(Matrix::from_vec(1, 4, rng_vals(20, 4).iter().map(|v| v + 1.0).collect()).unwrap());
        let opts = VisualGraphOptions { cosine: true, raw_features: false };
        let g = visual_semantic_graph(&mut tape, z, w, b, opts).unwrap();
        for i in 0..3 {
            assert!((tape.value(g).get(i, i) - 1.0).abs() < 1e-9, "cosine diagonal");
        }

        let mut tape = Tape::new();
        let z = tape.constant(fv.clone());
        let w = tape.parameter(Matrix::zeros(4, 4));
        let b = tape.parameter(Matrix::zeros(1, 4));
        let opts = VisualGraphOptions { cosine: false, raw_features: true };
        let g = visual_semantic_graph(&mut tape, z, w, b, opts).unwrap();
        let expected = fv.matmul(&fv.transpose()).unwrap();
        assert_eq!(tape.value(g), &expected);
    }

    #[test]
    fn assemble_orders_channels_and_validates() {
        let m = 3;
        let mut tape = Tape::new();
        let co = tape.constant(Matrix::filled(m, m, 0.3));
        let size = tape.constant(Matrix::filled(m, m, 2.0));
        let visual = tape.constant(Matrix::filled(m, m, 0.1));
        let stack = assemble(&mut tape, co, size, visual, true).unwrap();
        assert_eq!(stack.k(), 4);
        assert_eq!(stack.m(), m);
        let tags: Vec<ChannelTag> = stack.channels().iter().map(|(t, _)| *t).collect();
        assert_eq!(
            tags,
            vec![
                ChannelTag::CondensedCo,
                ChannelTag::CondensedSize,
                ChannelTag::VisualSemantic,
                ChannelTag::Identity
            ]
        );
        let identity = stack.channels()[3].1;
        assert_eq!(tape.value(identity), &Matrix::identity(m));

        let without = assemble(&mut tape, co, size, visual, false).unwrap();
        assert_eq!(without.k(), 3);
        assert!(!without.channels().iter().any(|(t, _)| *t == ChannelTag::Identity));

        let bad = tape.constant(Matrix::zeros(2, 2));
        assert!(assemble(&mut tape, co, size, bad, true).is_err());

        // M = 1 degenerate stack.
        let mut tape = Tape::new();
        let one = tape.constant(Matrix::filled(1, 1, 0.5));
        let stack = assemble(&mut tape, one, one, one, true).unwrap();
        assert_eq!((stack.k(), stack.m()), (4, 1));
    }
}
