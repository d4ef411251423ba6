//! Evaluation: run a trained model over scenes, decode one detection per
//! region, and report COCO-style AP with per-class, hard-group, occlusion,
//! and calibration breakdowns.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, RunConfig};
use crate::metrics::{map_report, Detection, EvalReport, GroundTruthBox, MetricsError};
use crate::model::{decode_box, forward, GraphPriors, ModelError, ModelParams};
use crate::numerics::{NumericsError, Tape};
use crate::world::Scene;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid evaluation setup: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Equal-width confidence bins for the reliability diagram.
pub const RELIABILITY_BINS: usize = 10;

/// Runs the model on one scene and decodes one detection per region: the
/// argmax class (lowest index on ties), its softmax probability as the
/// confidence, and the proposal refined by the predicted deltas.
pub fn detect_scene(
    params: &ModelParams,
    config: &ModelConfig,
    scene: &Scene,
    priors: Option<&GraphPriors>,
    image: usize,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let nodes = params.insert_as_constants(&mut tape);
    let out = forward(&mut tape, &nodes, &scene.features, priors, config)?;
    let probs = tape.value(out.class_scores).softmax_rows()?;
    let deltas = tape.value(out.box_deltas).clone();

    let mut detections = Vec::with_capacity(scene.m());
    for i in 0..scene.m() {
        let (mut class, mut confidence) = (0, probs.get(i, 0));
        for j in 1..probs.cols() {
            if probs.get(i, j) > confidence {
                class = j;
                confidence = probs.get(i, j);
            }
        }
        let d = [deltas.get(i, 0), deltas.get(i, 1), deltas.get(i, 2), deltas.get(i, 3)];
        detections.push(Detection {
            image,
            bbox: decode_box(&scene.proposals[i], &d),
            class,
            confidence,
        });
    }
    Ok(detections)
}

/// Detections over a scene list; the image id is the scene's position in the
/// slice. Scenes run in parallel; output order follows input order.
pub fn detections_for_scenes(
    params: &ModelParams,
    config: &ModelConfig,
    scenes: &[Scene],
    priors: Option<&GraphPriors>,
) -> Result<Vec<Detection>> {
    let per_scene: Vec<Result<Vec<Detection>>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| detect_scene(params, config, scene, priors, i))
        .collect();
    let mut out = Vec::new();
    for result in per_scene {
        out.extend(result?);
    }
    Ok(out)
}

/// Ground-truth boxes for a scene list, named consistently with
/// [`detections_for_scenes`].
pub fn ground_truth_for_scenes(scenes: &[Scene]) -> Vec<GroundTruthBox> {
    let mut out = Vec::new();
    for (image, scene) in scenes.iter().enumerate() {
        for (bbox, &label) in scene.boxes.iter().zip(&scene.labels) {
            out.push(GroundTruthBox { image, bbox: *bbox, class: label });
        }
    }
    out
}

/// One reliability bin, mirrored into a round-trippable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityRow {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// AP at IoU 0.50 for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAp50 {
    pub class: usize,
    pub ap50: f64,
}

/// The headline numbers of one evaluation; serializes losslessly to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub images: usize,
    pub detections: usize,
    pub ground_truth_boxes: usize,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ece: f64,
    /// Mean AP50 over the hard-group classes, when any are present.
    pub hard_ap50: Option<f64>,
    /// Mean AP50 over all remaining classes, when any are present.
    pub easy_ap50: Option<f64>,
    /// Images containing at least one ground-truth pair with IoU > 0.3.
    pub occluded_images: usize,
    pub occluded_map: Option<f64>,
    pub occluded_ap50: Option<f64>,
    pub per_class_ap50: Vec<ClassAp50>,
    pub reliability: Vec<ReliabilityRow>,
}

/// Everything one evaluation produces: the full report (per-class CSV source),
/// the occlusion-subset report when the subset is nonempty, and the summary.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub occluded_report: Option<EvalReport>,
    pub summary: EvalSummary,
}

fn mean_ap50_over(rows: &[ClassAp50], keep: &BTreeSet<usize>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| keep.contains(&r.class)).map(|r| r.ap50).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Full evaluation of a model over scenes. The occlusion subset re-runs the
/// matcher on the images with an overlapping ground-truth pair; the hard-group
/// breakdown averages per-class AP50 over the spec's hard classes.
pub fn evaluate(
    params: &ModelParams,
    config: &RunConfig,
    scenes: &[Scene],
    priors: Option<&GraphPriors>,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(EvalError::Invalid("evaluation needs at least one scene".into()));
    }
    let detections = detections_for_scenes(params, &config.model, scenes, priors)?;
    let ground_truth = ground_truth_for_scenes(scenes);
    let report = map_report(&detections, &ground_truth, RELIABILITY_BINS)?;

    let per_class_ap50: Vec<ClassAp50> = report
        .per_class
        .iter()
        .filter(|r| r.iou_pct == 50)
        .map(|r| ClassAp50 { class: r.class, ap50: r.ap })
        .collect();
    let hard: BTreeSet<usize> = config.world.hard_classes().into_iter().collect();
    let easy: BTreeSet<usize> =
        (0..config.world.classes).filter(|c| !hard.contains(c)).collect();
    let hard_ap50 = mean_ap50_over(&per_class_ap50, &hard);
    let easy_ap50 = mean_ap50_over(&per_class_ap50, &easy);

    let occluded: BTreeSet<usize> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_occluded_pair())
        .map(|(i, _)| i)
        .collect();
    let occluded_report = if occluded.is_empty() {
        None
    } else {
        let od: Vec<Detection> =
            detections.iter().filter(|d| occluded.contains(&d.image)).cloned().collect();
        let og: Vec<GroundTruthBox> =
            ground_truth.iter().filter(|g| occluded.contains(&g.image)).cloned().collect();
        Some(map_report(&od, &og, RELIABILITY_BINS)?)
    };

    let summary = EvalSummary {
        images: scenes.len(),
        detections: detections.len(),
        ground_truth_boxes: ground_truth.len(),
        map: report.map,
        ap50: report.ap50,
        ap75: report.ap75,
        ap_small: report.ap_small,
        ap_medium: report.ap_medium,
        ap_large: report.ap_large,
        ece: report.reliability.ece,
        hard_ap50,
        easy_ap50,
        occluded_images: occluded.len(),
        occluded_map: occluded_report.as_ref().map(|r| r.map),
        occluded_ap50: occluded_report.as_ref().map(|r| r.ap50),
        per_class_ap50,
        reliability: report
            .reliability
            .bins
            .iter()
            .map(|b| ReliabilityRow {
                mean_confidence: b.mean_confidence,
                accuracy: b.accuracy,
                count: b.count,
            })
            .collect(),
    };
    Ok(Evaluation { report, occluded_report, summary })
}
