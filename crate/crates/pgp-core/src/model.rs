//! Model assembly: parameter groups, seeded initialization, the per-scene
//! forward pass (full relational stack or visual-only baseline), box-delta
//! coding, and versioned binary checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::fusion::{fuse_and_head, gcn_embed, gtn_forward, node_attributes};
use crate::metrics::BBox;
use crate::numerics::{Gradients, Matrix, NodeId, NumericsError, Tape};
use crate::relational::{
    condense, gram_graph, pseudo_classify, visual_latent, ChannelTag, HeterogeneousRoIGraph,
};
use crate::world::WorldSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("model error: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Checkpoint format tag; bump when the layout changes.
const CHECKPOINT_MAGIC: &[u8; 8] = b"PGPCKPT1";

/// Reserved ChaCha stream for parameter initialization, distinct from the
/// batch-sampling stream used by training.
const INIT_STREAM: u64 = 0x7061_7261;

/// GTN soft-selection weights for the two composite stages.
#[derive(Debug, Clone, PartialEq)]
pub struct GtnParams {
    /// C x K selection logits, first stage.
    pub w_phi1: Matrix,
    /// C x K selection logits, second stage.
    pub w_phi2: Matrix,
}

/// Parameters that exist only when the relational stack is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalParams {
    /// h x N pseudo-classifier weights.
    pub pseudo_w: Matrix,
    /// 1 x N pseudo-classifier bias.
    pub pseudo_b: Matrix,
    pub gtn: GtnParams,
    /// One H x d_emb projection per GTN output channel.
    pub gcn: Vec<Matrix>,
}

/// All learned parameters. The head input dimension H is `hidden_dim +
/// embed_dim` with the relational stack and `hidden_dim` without it; the
/// classification weights double as the node-attribute dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// h x h' visual transform.
    pub visual_w: Matrix,
    /// 1 x h' visual bias.
    pub visual_b: Matrix,
    pub relational: Option<RelationalParams>,
    /// H x N classification head (shared with node attributes).
    pub head_cls_w: Matrix,
    /// 1 x N classification bias.
    pub head_cls_b: Matrix,
    /// H x 4 box-regression head.
    pub head_box_w: Matrix,
    /// 1 x 4 box-regression bias.
    pub head_box_b: Matrix,
}

/// Number of adjacency channels the config yields.
pub fn channel_count(config: &ModelConfig) -> usize {
    config.use_co as usize
        + config.use_size as usize
        + 1
        + config.include_identity as usize
}

/// Head input dimension for the configured variant.
pub fn fused_dim(config: &ModelConfig) -> usize {
    if config.relational {
        config.hidden_dim + config.embed_dim
    } else {
        config.hidden_dim
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("shape matches data")
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    gaussian(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

impl ModelParams {
    /// Seeded Xavier-style initialization; biases start at zero and GTN
    /// selection logits near uniform.
    pub fn init(world: &WorldSpec, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let (h, n) = (world.feature_dim, world.classes);
        let (hp, d) = (config.hidden_dim, config.embed_dim);
        let big_h = fused_dim(config);
        let visual_w = xavier(&mut rng, h, hp);
        let visual_b = Matrix::zeros(1, hp);
        let relational = config.relational.then(|| {
            let k = channel_count(config);
            RelationalParams {
                pseudo_w: xavier(&mut rng, h, n),
                pseudo_b: Matrix::zeros(1, n),
                gtn: GtnParams {
                    w_phi1: gaussian(&mut rng, config.channels, k, 0.1),
                    w_phi2: gaussian(&mut rng, config.channels, k, 0.1),
                },
                gcn: (0..config.channels).map(|_| xavier(&mut rng, big_h, d)).collect(),
            }
        });
        Self {
            visual_w,
            visual_b,
            relational,
            head_cls_w: xavier(&mut rng, big_h, n),
            head_cls_b: Matrix::zeros(1, n),
            head_box_w: xavier(&mut rng, big_h, 4),
            head_box_b: Matrix::zeros(1, 4),
        }
    }

    /// Same-layout parameters with every entry zero (optimizer state,
    /// gradient accumulators).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.fields_mut() {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    m.set(i, j, 0.0);
                }
            }
        }
        out
    }

    /// Named fields in a fixed order; names are stable checkpoint keys.
    pub fn fields(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("visual_w".into(), &self.visual_w),
            ("visual_b".into(), &self.visual_b),
        ];
        if let Some(r) = &self.relational {
            out.push(("pseudo_w".into(), &r.pseudo_w));
            out.push(("pseudo_b".into(), &r.pseudo_b));
            out.push(("gtn_phi1".into(), &r.gtn.w_phi1));
            out.push(("gtn_phi2".into(), &r.gtn.w_phi2));
            for (c, w) in r.gcn.iter().enumerate() {
                out.push((format!("gcn_{c:02}"), w));
            }
        }
        out.push(("head_cls_w".into(), &self.head_cls_w));
        out.push(("head_cls_b".into(), &self.head_cls_b));
        out.push(("head_box_w".into(), &self.head_box_w));
        out.push(("head_box_b".into(), &self.head_box_b));
        out
    }

    /// Mutable view in the same order as [`fields`].
    pub fn fields_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("visual_w".into(), &mut self.visual_w),
            ("visual_b".into(), &mut self.visual_b),
        ];
        if let Some(r) = &mut self.relational {
            out.push(("pseudo_w".into(), &mut r.pseudo_w));
            out.push(("pseudo_b".into(), &mut r.pseudo_b));
            out.push(("gtn_phi1".into(), &mut r.gtn.w_phi1));
            out.push(("gtn_phi2".into(), &mut r.gtn.w_phi2));
            for (c, w) in r.gcn.iter_mut().enumerate() {
                out.push((format!("gcn_{c:02}"), w));
            }
        }
        out.push(("head_cls_w".into(), &mut self.head_cls_w));
        out.push(("head_cls_b".into(), &mut self.head_cls_b));
        out.push(("head_box_w".into(), &mut self.head_box_w));
        out.push(("head_box_b".into(), &mut self.head_box_b));
        out
    }

    /// In-place `self += scale * other`, matching layouts required.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let other_fields = other.fields();
        for ((_, dst), (_, src)) in self.fields_mut().into_iter().zip(other_fields) {
            for i in 0..dst.rows() {
                for j in 0..dst.cols() {
                    dst.set(i, j, dst.get(i, j) + scale * src.get(i, j));
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, m)| m.is_finite())
    }
}

/// Tape node handles mirroring [`ModelParams`], produced by insertion.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub visual_w: NodeId,
    pub visual_b: NodeId,
    pub relational: Option<RelationalNodes>,
    pub head_cls_w: NodeId,
    pub head_cls_b: NodeId,
    pub head_box_w: NodeId,
    pub head_box_b: NodeId,
}

#[derive(Debug, Clone)]
pub struct RelationalNodes {
    pub pseudo_w: NodeId,
    pub pseudo_b: NodeId,
    pub w_phi1: NodeId,
    pub w_phi2: NodeId,
    pub gcn: Vec<NodeId>,
}

impl ModelParams {
    /// Inserts every parameter as a tracked tape leaf (training).
    pub fn insert_as_parameters(&self, tape: &mut Tape) -> ParamNodes {
        self.insert(tape, true)
    }

    /// Inserts every parameter as an untracked constant (evaluation).
    pub fn insert_as_constants(&self, tape: &mut Tape) -> ParamNodes {
        self.insert(tape, false)
    }

    fn insert(&self, tape: &mut Tape, tracked: bool) -> ParamNodes {
        let mut put = |m: &Matrix| {
            if tracked {
                tape.parameter(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        ParamNodes {
            visual_w: put(&self.visual_w),
            visual_b: put(&self.visual_b),
            relational: self.relational.as_ref().map(|r| RelationalNodes {
                pseudo_w: put(&r.pseudo_w),
                pseudo_b: put(&r.pseudo_b),
                w_phi1: put(&r.gtn.w_phi1),
                w_phi2: put(&r.gtn.w_phi2),
                gcn: r.gcn.iter().map(&mut put).collect(),
            }),
            head_cls_w: put(&self.head_cls_w),
            head_cls_b: put(&self.head_cls_b),
            head_box_w: put(&self.head_box_w),
            head_box_b: put(&self.head_box_b),
        }
    }
}

impl ParamNodes {
    /// Extracts this parameter set's gradients into a params-shaped struct;
    /// untouched parameters yield zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients, template: &ModelParams) -> ModelParams {
        let mut out = template.zeros_like();
        let nodes = self.node_list();
        for ((_, dst), node) in out.fields_mut().into_iter().zip(nodes) {
            if let Some(g) = grads.get(node) {
                debug_assert_eq!((g.rows(), g.cols()), (dst.rows(), dst.cols()));
                *dst = g.clone();
            } else {
                debug_assert_eq!(tape.value(node).rows(), dst.rows());
            }
        }
        out
    }

    /// Node handles in [`ModelParams::fields`] order.
    fn node_list(&self) -> Vec<NodeId> {
        let mut out = vec![self.visual_w, self.visual_b];
        if let Some(r) = &self.relational {
            out.push(r.pseudo_w);
            out.push(r.pseudo_b);
            out.push(r.w_phi1);
            out.push(r.w_phi2);
            out.extend(r.gcn.iter().copied());
        }
        out.extend([self.head_cls_w, self.head_cls_b, self.head_box_w, self.head_box_b]);
        out
    }
}

/// Class-graph priors fed to the condensers, dense N x N.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPriors {
    pub co: Matrix,
    pub size: Matrix,
}

/// Forward-pass outputs for one scene.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// M x N classification scores (pre-softmax).
    pub class_scores: NodeId,
    /// M x 4 box-regression deltas.
    pub box_deltas: NodeId,
    /// M x N pseudo-classifier logits when the relational stack ran.
    pub pseudo_logits: Option<NodeId>,
}

/// Runs the configured variant on one scene's features (M x h). The full
/// stack pseudo-classifies regions, condenses the class-graph priors onto
/// them, stacks the heterogeneous channels, composes GTN meta-paths, embeds
/// via the GCN over shared-weight node attributes, and classifies the
/// concatenated visual+embedding rows; the visual-only baseline classifies
/// the transformed visual rows directly.
pub fn forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    features: &Matrix,
    priors: Option<&GraphPriors>,
    config: &ModelConfig,
) -> Result<Forward> {
    let feats = tape.constant(features.clone());
    let latent = visual_latent(tape, feats, nodes.visual_w, nodes.visual_b)?;
    let Some(relational) = &nodes.relational else {
        let scores = tape.matmul(latent, nodes.head_cls_w)?;
        let class_scores = tape.add_row_broadcast(scores, nodes.head_cls_b)?;
        let deltas = tape.matmul(latent, nodes.head_box_w)?;
        let box_deltas = tape.add_row_broadcast(deltas, nodes.head_box_b)?;
        return Ok(Forward { class_scores, box_deltas, pseudo_logits: None });
    };
    let priors = priors.ok_or_else(|| {
        ModelError::Invalid("relational forward needs graph priors".into())
    })?;

    let pseudo = pseudo_classify(tape, feats, relational.pseudo_w, relational.pseudo_b)?;
    let mut channels: Vec<(ChannelTag, NodeId)> = Vec::new();
    if config.use_co {
        let co = tape.constant(priors.co.clone());
        channels.push((ChannelTag::CondensedCo, condense(tape, co, pseudo)?));
    }
    if config.use_size {
        let size = tape.constant(priors.size.clone());
        channels.push((ChannelTag::CondensedSize, condense(tape, size, pseudo)?));
    }
    let graph_latent = if config.visual_raw { feats } else { latent };
    channels.push((
        ChannelTag::VisualSemantic,
        gram_graph(tape, graph_latent, config.visual_cosine)?,
    ));
    if config.include_identity {
        let identity = tape.constant(Matrix::identity(features.rows()));
        channels.push((ChannelTag::Identity, identity));
    }
    let graph = HeterogeneousRoIGraph::from_parts(tape, channels)?;
    let composites = gtn_forward(tape, &graph, relational.w_phi1, relational.w_phi2)?;
    let attributes = node_attributes(tape, pseudo, nodes.head_cls_w)?;
    let embeddings = gcn_embed(tape, &composites, attributes, &relational.gcn)?;
    let head = fuse_and_head(
        tape,
        latent,
        embeddings,
        nodes.head_cls_w,
        nodes.head_cls_b,
        nodes.head_box_w,
        nodes.head_box_b,
    )?;
    Ok(Forward {
        class_scores: head.class_scores,
        box_deltas: head.box_deltas,
        pseudo_logits: Some(pseudo),
    })
}

/// Standard box-regression target: center offsets normalized by the proposal
/// extent and log extent ratios.
pub fn encode_box_target(proposal: &BBox, ground_truth: &BBox) -> [f64; 4] {
    let (pcx, pcy) = (proposal.x + proposal.w / 2.0, proposal.y + proposal.h / 2.0);
    let (gcx, gcy) = (
        ground_truth.x + ground_truth.w / 2.0,
        ground_truth.y + ground_truth.h / 2.0,
    );
    [
        (gcx - pcx) / proposal.w,
        (gcy - pcy) / proposal.h,
        (ground_truth.w / proposal.w).ln(),
        (ground_truth.h / proposal.h).ln(),
    ]
}

/// Applies predicted deltas to a proposal. Log-scale deltas are clamped to
/// [-4, 4] so an untrained head cannot produce degenerate boxes.
pub fn decode_box(proposal: &BBox, deltas: &[f64; 4]) -> BBox {
    let (pcx, pcy) = (proposal.x + proposal.w / 2.0, proposal.y + proposal.h / 2.0);
    let cx = pcx + deltas[0] * proposal.w;
    let cy = pcy + deltas[1] * proposal.h;
    let w = proposal.w * deltas[2].clamp(-4.0, 4.0).exp();
    let h = proposal.h * deltas[3].clamp(-4.0, 4.0).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Writes a versioned binary checkpoint: magic tag, parameter count, then
/// name-sorted entries of (name, rows, cols, row-major f64 data), all
/// little-endian.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut entries = params.fields();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(CHECKPOINT_MAGIC)?;
    writer.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, matrix) in entries {
        writer.write_all(&(name.len() as u32).to_le_bytes())?;
        writer.write_all(name.as_bytes())?;
        writer.write_all(&(matrix.rows() as u32).to_le_bytes())?;
        writer.write_all(&(matrix.cols() as u32).to_le_bytes())?;
        for v in matrix.data() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a checkpoint into the layout implied by (world, config); any
/// mismatch in version tag, parameter names, or shapes is a checkpoint
/// error naming the offending entry.
pub fn load_checkpoint(path: &Path, world: &WorldSpec, config: &ModelConfig) -> Result<ModelParams> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "format tag {:?} does not match expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
        )));
    }
    let count = read_u32(&mut reader)? as usize;
    let mut template = ModelParams::init(world, config, 0).zeros_like();
    let mut expected: std::collections::BTreeMap<String, &mut Matrix> =
        template.fields_mut().into_iter().collect();
    if count != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            expected.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut reader)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        reader.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = read_u32(&mut reader)? as usize;
        let cols = read_u32(&mut reader)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            reader.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let slot = expected.get_mut(&name).ok_or_else(|| {
            ModelError::Checkpoint(format!("unexpected parameter {name:?}"))
        })?;
        if slot.rows() != rows || slot.cols() != cols {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name:?} is {rows}x{cols}, model expects {}x{}",
                slot.rows(),
                slot.cols()
            )));
        }
        **slot = Matrix::from_vec(rows, cols, data)
            .map_err(|e| ModelError::Checkpoint(format!("parameter {name:?}: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(ModelError::Checkpoint(format!("duplicate parameter {name:?}")));
        }
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(template)
}
