//! Graph-quality ablations: perturb the co-occurrence graph (drop edges, add
//! spurious edges, or silence whole classes), retrain with the same seed, and
//! report per-class AP deltas against the unperturbed baseline.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::evaluate::{evaluate, EvalError, EvalSummary, Evaluation};
use crate::graphs::{CoGraph, GraphError, GraphExport, GraphKind};
use crate::losses::NeighborSets;
use crate::model::GraphPriors;
use crate::numerics::Matrix;
use crate::train::{train, TrainError, TrainOutcome};
use crate::world::Scene;

#[derive(Debug, Error)]
pub enum AblateError {
    #[error("invalid ablation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, AblateError>;

/// RNG stream for perturbation choices, distinct from init/batch streams.
const ABLATE_STREAM: u64 = 0x6162_6c38;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    EdgeRemove,
    EdgeAdd,
    NodeRemove,
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EdgeRemove => "edge_remove",
            Self::EdgeAdd => "edge_add",
            Self::NodeRemove => "node_remove",
        })
    }
}

/// What to perturb and how much, with its own seed so the same trained
/// baseline can face many perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub fraction: f64,
    pub seed: u64,
}

impl AblationSpec {
    /// Fractions live in [0, 1): zero is the do-nothing control, one would
    /// erase the entire graph and is rejected up front.
    pub fn validate(&self) -> Result<()> {
        if !self.fraction.is_finite() || !(0.0..1.0).contains(&self.fraction) {
            return Err(AblateError::Invalid(format!(
                "fraction must lie in [0, 1), got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// A perturbed co-occurrence graph plus what was done to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub graph: CoGraph,
    /// Classes whose rows and columns were zeroed (node_remove only), sorted.
    pub removed_classes: Vec<usize>,
    pub edges_removed: usize,
    pub edges_added: usize,
}

/// Draws `count` items from `pool` without replacement, in draw order.
fn choose<T: Copy>(rng: &mut ChaCha8Rng, pool: &mut Vec<T>, count: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = rng.random_range(0..pool.len());
        out.push(pool.swap_remove(idx));
    }
    out
}

/// Applies the requested perturbation to a copy of the graph. Edges are
/// unordered off-diagonal pairs; removals zero them, additions inject
/// weights drawn uniformly from the existing weight pool, and node removal
/// zeroes whole rows and columns. Edge counts for both edge modes are
/// `round(fraction * existing_edges)` so equal fractions are comparable
/// across modes.
///
/// Additions fill zero pairs first; once the graph runs out of empty slots
/// (a fully connected graph has none) the remaining count piles extra pool
/// draws onto randomly chosen existing edges, so the operation still injects
/// spurious weight instead of silently doing nothing.
pub fn perturb_co_graph(co: &CoGraph, spec: &AblationSpec) -> Result<Perturbation> {
    spec.validate()?;
    let n = co.n();
    let mut dense = co.weights().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(ABLATE_STREAM);

    let mut existing: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if dense.get(i, j) != 0.0 {
                existing.push((i, j));
            }
        }
    }

    let mut removed_classes = Vec::new();
    let mut edges_removed = 0;
    let mut edges_added = 0;
    match spec.mode {
        AblationMode::EdgeRemove => {
            let count = (spec.fraction * existing.len() as f64).round() as usize;
            if count == existing.len() && count > 0 {
                return Err(AblateError::Invalid(format!(
                    "fraction {} would remove all {} edges",
                    spec.fraction,
                    existing.len()
                )));
            }
            for (i, j) in choose(&mut rng, &mut existing, count) {
                dense.set(i, j, 0.0);
                dense.set(j, i, 0.0);
                edges_removed += 1;
            }
        }
        AblationMode::EdgeAdd => {
            let pool: Vec<f64> = existing.iter().map(|&(i, j)| dense.get(i, j)).collect();
            let mut zero_pairs: Vec<(usize, usize)> = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if dense.get(i, j) == 0.0 {
                        zero_pairs.push((i, j));
                    }
                }
            }
            let count = (spec.fraction * existing.len() as f64).round() as usize;
            if count > 0 && pool.is_empty() {
                return Err(AblateError::Invalid(
                    "cannot add edges: the graph has no existing weights to draw from".into(),
                ));
            }
            let inserts = count.min(zero_pairs.len());
            for (i, j) in choose(&mut rng, &mut zero_pairs, inserts) {
                let w = pool[rng.random_range(0..pool.len())];
                dense.set(i, j, w);
                dense.set(j, i, w);
                edges_added += 1;
            }
            for (i, j) in choose(&mut rng, &mut existing, count - inserts) {
                let w = dense.get(i, j) + pool[rng.random_range(0..pool.len())];
                dense.set(i, j, w);
                dense.set(j, i, w);
                edges_added += 1;
            }
        }
        AblationMode::NodeRemove => {
            let count = (spec.fraction * n as f64).round() as usize;
            if count == n && count > 0 {
                return Err(AblateError::Invalid(format!(
                    "fraction {} would remove every class",
                    spec.fraction
                )));
            }
            let mut classes: Vec<usize> = (0..n).collect();
            removed_classes = choose(&mut rng, &mut classes, count);
            removed_classes.sort_unstable();
            for &c in &removed_classes {
                for k in 0..n {
                    dense.set(c, k, 0.0);
                    dense.set(k, c, 0.0);
                }
            }
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let w = dense.get(i, j);
            if w != 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    let graph = CoGraph::from_export(&GraphExport { n, kind: GraphKind::Co, edges, known: None })?;
    Ok(Perturbation { graph, removed_classes, edges_removed, edges_added })
}

/// Trains a fresh model against the given graphs and evaluates it on the test
/// scenes. Handles the visual-only variant (no graphs touched) and skips
/// neighbor sets when the auxiliary loss is off.
pub fn fit_and_evaluate(
    config: &RunConfig,
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    co: &CoGraph,
    size: &Matrix,
) -> Result<(TrainOutcome, Evaluation)> {
    if !config.model.relational {
        let outcome = train(config, train_scenes, None, None)?;
        let eval = evaluate(&outcome.params, config, test_scenes, None)?;
        return Ok((outcome, eval));
    }
    let priors = GraphPriors { co: co.weights().clone(), size: size.clone() };
    let built;
    let sets = if config.training.lambda_aux > 0.0 {
        built = NeighborSets::build(co, config.training.neighbor_k).0;
        Some(&built)
    } else {
        None
    };
    let outcome = train(config, train_scenes, Some(&priors), sets)?;
    let eval = evaluate(&outcome.params, config, test_scenes, Some(&priors))?;
    Ok((outcome, eval))
}

/// AP50 before and after the perturbation for one retained class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDelta {
    pub class: usize,
    pub baseline_ap50: f64,
    pub ablated_ap50: f64,
    pub delta: f64,
}

/// Comparative report for one perturbation. Retained classes are everything
/// node removal kept (all classes for edge modes); retained AP50 means are
/// taken over the retained classes present in the test ground truth, which is
/// the set the per-class table lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub fraction: f64,
    pub seed: u64,
    pub edges_removed: usize,
    pub edges_added: usize,
    pub removed_classes: Vec<usize>,
    pub retained_classes: Vec<usize>,
    pub baseline_map: f64,
    pub ablated_map: f64,
    pub baseline_ap50: f64,
    pub ablated_ap50: f64,
    pub baseline_hard_ap50: Option<f64>,
    pub ablated_hard_ap50: Option<f64>,
    pub baseline_retained_ap50: Option<f64>,
    pub ablated_retained_ap50: Option<f64>,
    pub per_class: Vec<ClassDelta>,
}

/// Joins the two evaluations into the comparative report.
pub fn ablation_report(
    spec: &AblationSpec,
    perturbation: &Perturbation,
    baseline: &EvalSummary,
    ablated: &EvalSummary,
    classes: usize,
) -> AblationReport {
    let retained_classes: Vec<usize> =
        (0..classes).filter(|c| !perturbation.removed_classes.contains(c)).collect();
    let mut per_class = Vec::new();
    for row in &baseline.per_class_ap50 {
        if !retained_classes.contains(&row.class) {
            continue;
        }
        let Some(after) = ablated.per_class_ap50.iter().find(|r| r.class == row.class) else {
            continue;
        };
        per_class.push(ClassDelta {
            class: row.class,
            baseline_ap50: row.ap50,
            ablated_ap50: after.ap50,
            delta: after.ap50 - row.ap50,
        });
    }
    let mean = |f: fn(&ClassDelta) -> f64| -> Option<f64> {
        if per_class.is_empty() {
            None
        } else {
            Some(per_class.iter().map(f).sum::<f64>() / per_class.len() as f64)
        }
    };
    AblationReport {
        mode: spec.mode,
        fraction: spec.fraction,
        seed: spec.seed,
        edges_removed: perturbation.edges_removed,
        edges_added: perturbation.edges_added,
        removed_classes: perturbation.removed_classes.clone(),
        retained_classes,
        baseline_map: baseline.map,
        ablated_map: ablated.map,
        baseline_ap50: baseline.ap50,
        ablated_ap50: ablated.ap50,
        baseline_hard_ap50: baseline.hard_ap50,
        ablated_hard_ap50: ablated.hard_ap50,
        baseline_retained_ap50: mean(|d| d.baseline_ap50),
        ablated_retained_ap50: mean(|d| d.ablated_ap50),
        per_class,
    }
}

/// Everything one ablation run produces.
#[derive(Debug)]
pub struct AblationOutcome {
    pub report: AblationReport,
    pub baseline: Evaluation,
    pub ablated: Evaluation,
}

/// Full ablation: perturb the co-graph, train baseline and ablated models
/// with identical seeds, evaluate both, and diff them.
pub fn run_ablation(
    config: &RunConfig,
    spec: &AblationSpec,
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    co: &CoGraph,
    size: &Matrix,
) -> Result<AblationOutcome> {
    if !config.model.relational || !config.model.use_co {
        return Err(AblateError::Invalid(
            "co-graph ablation needs the relational model with the co channel enabled".into(),
        ));
    }
    let perturbation = perturb_co_graph(co, spec)?;
    let (_, baseline) = fit_and_evaluate(config, train_scenes, test_scenes, co, size)?;
    let (_, ablated) =
        fit_and_evaluate(config, train_scenes, test_scenes, &perturbation.graph, size)?;
    let report =
        ablation_report(spec, &perturbation, &baseline.summary, &ablated.summary, config.world.classes);
    Ok(AblationOutcome { report, baseline, ablated })
}
