//! Graph-transformer fusion: node attributes from shared classifier weights,
//! meta-path composites over the heterogeneous region graph, GCN node
//! embeddings, and the fused classification / box-regression heads.

use crate::numerics::{Matrix, NodeId, NumericsError, Result, Tape};
use crate::relational::HeterogeneousRoIGraph;

/// Node attributes: each region's attribute is the pseudo-probability-
/// weighted sum of the classifier weight columns, `X = softmax_rows(logits)
/// * classifier_weights^T`. `classifier_weights` is the H x N final head
/// weight matrix whose columns are the per-class vectors; sharing that node
/// here closes the attribute/classifier weight loop.
pub fn node_attributes(
    tape: &mut Tape,
    logits: NodeId,
    classifier_weights: NodeId,
) -> Result<NodeId> {
    let probs = tape.softmax_rows(logits)?;
    let omega = tape.transpose(classifier_weights);
    tape.matmul(probs, omega)
}

/// Convex combination of the adjacency channels for one output channel:
/// `sum_k alpha[channel][k] * A_k`.
fn select_adjacency(
    tape: &mut Tape,
    graph: &HeterogeneousRoIGraph,
    alpha: NodeId,
    channel: usize,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (k, (_, adjacency)) in graph.channels().iter().enumerate() {
        let coefficient = tape.pick(alpha, channel, k);
        let term = tape.mul_scalar_node(*adjacency, coefficient)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or(NumericsError::Empty { op: "select_adjacency" })
}

/// Two-stage graph transformer: each output channel softly selects one
/// adjacency per stage (softmax over the K channels) and multiplies the two
/// selections into an M x M meta-path composite. Returns one composite per
/// channel row of the selection weights.
pub fn gtn_forward(
    tape: &mut Tape,
    graph: &HeterogeneousRoIGraph,
    w_phi1: NodeId,
    w_phi2: NodeId,
) -> Result<Vec<NodeId>> {
    let k = graph.k();
    let (c1, k1) = (tape.value(w_phi1).rows(), tape.value(w_phi1).cols());
    let (c2, k2) = (tape.value(w_phi2).rows(), tape.value(w_phi2).cols());
    if k1 != k || k2 != k || c1 != c2 {
        return Err(NumericsError::DimMismatch {
            op: "gtn_forward: selection weights",
            left_rows: c1,
            left_cols: k1,
            right_rows: c2,
            right_cols: k2,
        });
    }
    let alpha1 = tape.softmax_rows(w_phi1)?;
    let alpha2 = tape.softmax_rows(w_phi2)?;
    let mut composites = Vec::with_capacity(c1);
    for channel in 0..c1 {
        let q1 = select_adjacency(tape, graph, alpha1, channel)?;
        let q2 = select_adjacency(tape, graph, alpha2, channel)?;
        composites.push(tape.matmul(q1, q2)?);
    }
    Ok(composites)
}

/// One-layer GCN per composite channel, outputs averaged: per channel
/// `ReLU(row_normalize(A + I) * X * W)`. The +I self-loop keeps every row
/// degree at least 1, so the normalization is always defined for the
/// nonnegative composites.
pub fn gcn_embed(
    tape: &mut Tape,
    composites: &[NodeId],
    attributes: NodeId,
    gcn_weights: &[NodeId],
) -> Result<NodeId> {
    if composites.is_empty() || composites.len() != gcn_weights.len() {
        return Err(NumericsError::Empty { op: "gcn_embed" });
    }
    let m = tape.value(composites[0]).rows();
    let identity = tape.constant(Matrix::identity(m));
    let mut acc: Option<NodeId> = None;
    for (&adjacency, &weight) in composites.iter().zip(gcn_weights) {
        let with_loops = tape.add(adjacency, identity)?;
        let normalized = tape.row_normalize(with_loops)?;
        let mixed = tape.matmul(normalized, attributes)?;
        let projected = tape.matmul(mixed, weight)?;
        let hidden = tape.relu(projected);
        acc = Some(match acc {
            None => hidden,
            Some(prev) => tape.add(prev, hidden)?,
        });
    }
    Ok(tape.scale(acc.expect("nonempty checked above"), 1.0 / composites.len() as f64))
}

/// Output of the fused detection heads.
#[derive(Debug, Clone, Copy)]
pub struct FusedHead {
    /// M x (h + d_emb) concatenation; the left block is the visual input.
    pub fused: NodeId,
    /// M x N class scores (pre-softmax).
    pub class_scores: NodeId,
    /// M x 4 box regression deltas (dx, dy, dw, dh).
    pub box_deltas: NodeId,
}

/// Concatenates visual features with node embeddings and applies the two
/// affine heads. `w_cls` is the same H x N matrix fed to [`node_attributes`].
#[allow(clippy::too_many_arguments)]
pub fn fuse_and_head(
    tape: &mut Tape,
    visual: NodeId,
    embeddings: NodeId,
    w_cls: NodeId,
    b_cls: NodeId,
    w_box: NodeId,
    b_box: NodeId,
) -> Result<FusedHead> {
    let fused = tape.concat_cols(visual, embeddings)?;
    let scores = tape.matmul(fused, w_cls)?;
    let class_scores = tape.add_row_broadcast(scores, b_cls)?;
    let deltas = tape.matmul(fused, w_box)?;
    let box_deltas = tape.add_row_broadcast(deltas, b_box)?;
    Ok(FusedHead { fused, class_scores, box_deltas })
}
