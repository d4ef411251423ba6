//! Deterministic mini-batch training loop.
//!
//! Each step samples a batch of scenes, builds one gradient tape per scene
//! (in parallel), reduces the per-scene gradients in batch order, and applies
//! one AdamW update. Identical configs and seeds produce bit-identical
//! parameter trajectories regardless of worker count.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::losses::{aux_loss, output_box_loss, output_cls_loss, LossError, NeighborSets};
use crate::model::{encode_box_target, forward, GraphPriors, ModelError, ModelParams};
use crate::numerics::{Matrix, NumericsError, Tape};
use crate::optim::AdamW;
use crate::world::Scene;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step}; offending batch: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
    #[error("parameters became non-finite after the update at step {step}")]
    NonFiniteParams { step: usize },
    #[error("failed to write training log")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// RNG stream for batch sampling, kept distinct from parameter init and the
/// world streams so adding steps never perturbs initialization.
const BATCH_STREAM: u64 = 0x6261_7463;

/// Batch-mean loss components for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// The minimized objective: cls + lambda_box * box + pseudo - lambda_aux * aux.
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub pseudo_ce: f64,
    /// The raw enhancement term (maximized; enters the objective negated).
    pub aux: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
}

struct ScenePass {
    grads: ModelParams,
    total: f64,
    cls: f64,
    boxes: f64,
    pseudo_ce: f64,
    aux: f64,
}

/// True when the error is the tape rejecting an overflowed or NaN value,
/// whichever layer it bubbled up through.
fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Numerics(NumericsError::NonFinite { .. })
            | TrainError::Loss(LossError::Numerics(NumericsError::NonFinite { .. }))
            | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
    )
}

/// One scene's forward pass, objective, and gradients on a fresh tape.
fn scene_pass(
    params: &ModelParams,
    config: &RunConfig,
    scene: &Scene,
    priors: Option<&GraphPriors>,
    sets: Option<&NeighborSets>,
) -> Result<ScenePass> {
    let t = &config.training;
    let mut tape = Tape::new();
    let nodes = params.insert_as_parameters(&mut tape);
    let out = forward(&mut tape, &nodes, &scene.features, priors, &config.model)?;

    let cls = output_cls_loss(&mut tape, out.class_scores, &scene.labels)?;
    let mut targets = Matrix::zeros(scene.m(), 4);
    for (i, (proposal, gt)) in scene.proposals.iter().zip(&scene.boxes).enumerate() {
        for (j, v) in encode_box_target(proposal, gt).into_iter().enumerate() {
            targets.set(i, j, v);
        }
    }
    let boxes = output_box_loss(&mut tape, out.box_deltas, &targets, None)?;
    let boxes_scaled = tape.scale(boxes, t.lambda_box);
    let mut total = tape.add(cls, boxes_scaled)?;

    let mut pseudo_ce = 0.0;
    let mut aux = 0.0;
    if let Some(pseudo_logits) = out.pseudo_logits {
        if t.pseudo_ce_weight > 0.0 {
            let ce = output_cls_loss(&mut tape, pseudo_logits, &scene.labels)?;
            pseudo_ce = tape.value(ce).get(0, 0);
            let scaled = tape.scale(ce, t.pseudo_ce_weight);
            total = tape.add(total, scaled)?;
        }
        if t.lambda_aux > 0.0 {
            let sets = sets
                .ok_or_else(|| TrainError::Invalid("auxiliary loss needs neighbor sets".into()))?;
            let probs = tape.softmax_rows(pseudo_logits)?;
            let enhancement = aux_loss(&mut tape, probs, &scene.labels, sets)?;
            aux = tape.value(enhancement).get(0, 0);
            let scaled = tape.scale(enhancement, -t.lambda_aux);
            total = tape.add(total, scaled)?;
        }
    }

    let total_value = tape.value(total).get(0, 0);
    let cls_value = tape.value(cls).get(0, 0);
    let boxes_value = tape.value(boxes).get(0, 0);
    let grads = if total_value.is_finite() {
        let gradients = tape.backward(total)?;
        nodes.gradients(&tape, &gradients, params)
    } else {
        // The caller aborts on the non-finite value; skip the useless backward.
        params.zeros_like()
    };
    Ok(ScenePass { grads, total: total_value, cls: cls_value, boxes: boxes_value, pseudo_ce, aux })
}

/// Trains a fresh model on the given scenes and returns the final parameters
/// with the per-step loss log. `priors` are required for the relational
/// variant, `sets` whenever `lambda_aux > 0` on that variant.
pub fn train(
    config: &RunConfig,
    scenes: &[Scene],
    priors: Option<&GraphPriors>,
    sets: Option<&NeighborSets>,
) -> Result<TrainOutcome> {
    let t = &config.training;
    if scenes.is_empty() {
        return Err(TrainError::Invalid("training needs at least one scene".into()));
    }
    if config.model.relational && priors.is_none() {
        return Err(TrainError::Invalid("relational training needs graph priors".into()));
    }
    if config.model.relational && t.lambda_aux > 0.0 && sets.is_none() {
        return Err(TrainError::Invalid("auxiliary loss needs neighbor sets".into()));
    }

    let mut params = ModelParams::init(&config.world, &config.model, t.seed);
    let mut optimizer = AdamW::new(&params, t.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(BATCH_STREAM);

    let mut log = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let batch: Vec<usize> =
            (0..t.batch_size).map(|_| rng.random_range(0..scenes.len())).collect();
        let passes: Vec<Result<ScenePass>> = batch
            .par_iter()
            .map(|&i| scene_pass(&params, config, &scenes[i], priors, sets))
            .collect();
        // Surface errors in batch order so failures are seed-stable too. A
        // non-finite value inside a scene's tape (overflow, NaN) is reported
        // with the step and scene that produced it.
        let passes: Vec<ScenePass> = passes
            .into_iter()
            .zip(&batch)
            .map(|(result, &i)| {
                result.map_err(|e| {
                    if is_non_finite(&e) {
                        TrainError::NonFiniteLoss { step, dump: format!("scene {i}: {e}") }
                    } else {
                        e
                    }
                })
            })
            .collect::<Result<_>>()?;

        let inv = 1.0 / t.batch_size as f64;
        let mut grads = params.zeros_like();
        let mut row = StepLog { step, total: 0.0, cls: 0.0, boxes: 0.0, pseudo_ce: 0.0, aux: 0.0 };
        for pass in &passes {
            grads.add_scaled(&pass.grads, inv);
            row.total += inv * pass.total;
            row.cls += inv * pass.cls;
            row.boxes += inv * pass.boxes;
            row.pseudo_ce += inv * pass.pseudo_ce;
            row.aux += inv * pass.aux;
        }
        if !row.total.is_finite() {
            let dump = batch
                .iter()
                .zip(&passes)
                .map(|(i, p)| format!("scene {i}: total {}", p.total))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(TrainError::NonFiniteLoss { step, dump });
        }

        optimizer.step(&mut params, &grads);
        if !params.is_finite() {
            return Err(TrainError::NonFiniteParams { step });
        }
        log.push(row);
    }
    Ok(TrainOutcome { params, log })
}

/// Writes the step log as CSV. Floats use the shortest round-trip form, so
/// identical runs serialize to identical bytes.
pub fn write_train_log<W: Write>(mut writer: W, log: &[StepLog]) -> Result<()> {
    writeln!(writer, "step,total,cls,box,pseudo_ce,aux")?;
    for row in log {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            row.step, row.total, row.cls, row.boxes, row.pseudo_ce, row.aux
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::graphs::{build_co_graph, build_size_graph, PillCatalog};
    use crate::world::{
        render_scenes, sample_prescriptions, sample_world, scenes_to_annotations, WorldSpec,
    };

    struct Fixture {
        config: RunConfig,
        scenes: Vec<Scene>,
        priors: GraphPriors,
        sets: NeighborSets,
    }

    fn tiny_fixture() -> Fixture {
        let mut config = RunConfig::desk_default();
        config.world = WorldSpec {
            classes: 5,
            diagnoses: 4,
            hard_groups: vec![vec![0, 1]],
            size_table: vec![1.0, 1.0, 2.0, 0.7, 1.5],
            feature_dim: 12,
            noise_std: 0.1,
            occlusion_rate: 0.3,
            seed: 11,
        };
        config.model.hidden_dim = 10;
        config.model.embed_dim = 6;
        config.model.channels = 4;
        config.training.steps = 30;
        config.training.batch_size = 4;
        config.training.learning_rate = 5e-3;
        config.training.neighbor_k = 1;
        config.validate().expect("fixture config is valid");

        let world = sample_world(&config.world).expect("world samples");
        let corpus = sample_prescriptions(&world, 40).expect("corpus samples");
        let scenes = render_scenes(&world, &corpus, 24).expect("scenes render");
        let catalog = PillCatalog::with_placeholder_names(config.world.classes).expect("catalog");
        let co = build_co_graph(&corpus, &catalog).expect("co graph").graph;
        let size = build_size_graph(&scenes_to_annotations(&scenes), &catalog).expect("size graph");
        let (sets, _) = NeighborSets::build(&co, config.training.neighbor_k);
        let priors = GraphPriors {
            co: co.weights().clone(),
            size: size.weights_with_unknown_as_unit(),
        };
        Fixture { config, scenes, priors, sets }
    }

    #[test]
    fn loss_decreases_on_a_tiny_world() {
        let f = tiny_fixture();
        let outcome = train(&f.config, &f.scenes, Some(&f.priors), Some(&f.sets)).expect("trains");
        assert_eq!(outcome.log.len(), f.config.training.steps);
        let first = outcome.log.first().expect("has steps");
        let last = outcome.log.last().expect("has steps");
        assert!(
            last.cls < first.cls,
            "cross-entropy should drop: first {} last {}",
            first.cls,
            last.cls
        );
        assert!(last.total < first.total, "objective should drop");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let f = tiny_fixture();
        let a = train(&f.config, &f.scenes, Some(&f.priors), Some(&f.sets)).expect("trains");
        let b = train(&f.config, &f.scenes, Some(&f.priors), Some(&f.sets)).expect("trains");
        assert_eq!(a.log, b.log);
        for ((name_a, field_a), (name_b, field_b)) in
            a.params.fields().into_iter().zip(b.params.fields())
        {
            assert_eq!(name_a, name_b);
            assert_eq!(field_a, field_b, "{name_a} diverged between identical runs");
        }
    }

    #[test]
    fn disabling_extras_reduces_to_detection_losses() {
        let mut f = tiny_fixture();
        f.config.training.lambda_aux = 0.0;
        f.config.training.pseudo_ce_weight = 0.0;
        f.config.training.steps = 5;
        let outcome = train(&f.config, &f.scenes, Some(&f.priors), Some(&f.sets)).expect("trains");
        for row in &outcome.log {
            assert_eq!(row.pseudo_ce, 0.0);
            assert_eq!(row.aux, 0.0);
            // total is assembled on the tape as cls + lambda_box * box with no
            // other terms; the batch means only differ by accumulation order.
            let want = row.cls + f.config.training.lambda_box * row.boxes;
            assert!(
                (row.total - want).abs() <= 1e-12 * want.abs().max(1.0),
                "step {}: total {} vs detection-only {}",
                row.step,
                row.total,
                want
            );
        }
    }

    #[test]
    fn visual_only_ignores_priors_and_trains() {
        let mut f = tiny_fixture();
        f.config.model.relational = false;
        f.config.training.steps = 10;
        let outcome = train(&f.config, &f.scenes, None, None).expect("trains without priors");
        assert!(outcome.params.relational.is_none());
        assert_eq!(outcome.log.len(), 10);
        for row in &outcome.log {
            assert_eq!(row.pseudo_ce, 0.0);
            assert_eq!(row.aux, 0.0);
        }
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let f = tiny_fixture();
        let err = train(&f.config, &f.scenes, None, Some(&f.sets)).unwrap_err();
        assert!(matches!(err, TrainError::Invalid(_)), "got {err}");
        let err = train(&f.config, &f.scenes, Some(&f.priors), None).unwrap_err();
        assert!(matches!(err, TrainError::Invalid(_)), "got {err}");
        let err = train(&f.config, &[], Some(&f.priors), Some(&f.sets)).unwrap_err();
        assert!(matches!(err, TrainError::Invalid(_)), "got {err}");
    }

    #[test]
    fn non_finite_loss_aborts_with_the_offending_batch() {
        let mut f = tiny_fixture();
        // A catastrophic learning rate overflows the parameters on the first
        // update; the loop must stop there rather than log NaNs.
        f.config.training.learning_rate = 1e300;
        let err = train(&f.config, &f.scenes, Some(&f.priors), Some(&f.sets)).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, dump } => {
                assert!(step >= 1, "first update causes the blowup, not step 0");
                assert!(dump.contains("scene"), "dump names the scene: {dump}");
            }
            TrainError::NonFiniteParams { step } => assert!(step >= 1),
            other => panic!("expected a non-finite abort, got {other}"),
        }
    }

    #[test]
    fn log_serializes_deterministically() {
        let f = tiny_fixture();
        let mut short = f.config.clone();
        short.training.steps = 3;
        let outcome = train(&short, &f.scenes, Some(&f.priors), Some(&f.sets)).expect("trains");
        let mut a = Vec::new();
        write_train_log(&mut a, &outcome.log).expect("writes");
        let mut b = Vec::new();
        write_train_log(&mut b, &outcome.log).expect("writes");
        assert_eq!(a, b);
        let text = String::from_utf8(a).expect("utf8");
        assert!(text.starts_with("step,total,cls,box,pseudo_ce,aux\n"));
        assert_eq!(text.lines().count(), 4);
        // Every float round-trips exactly through its printed form.
        for (line, row) in text.lines().skip(1).zip(&outcome.log) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1].parse::<f64>().expect("parses"), row.total);
        }
    }
}
