//! Seeded synthetic pill world: latent disease-pill structure, prescription
//! sampling, and feature-space multi-pill scenes with controllable
//! hard-sample groups, size structure, and occlusion.
//!
//! Scenes are feature-space only — regions carry class-prototype features
//! rather than pixels — which isolates the relational mechanism under test.
//! Everything derives deterministically from the spec seed: the world itself
//! uses the base ChaCha stream, the prescription sampler a reserved stream,
//! and each scene the stream `1 + scene_index`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{AnnotationSet, ImageAnnotation, LabeledBox, Prescription, PrescriptionCorpus};
use crate::metrics::{iou, BBox};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Perturbation radius for hard-group prototypes. Members are
/// `normalize(base + EPS * u)` with `u` a unit vector orthogonal to the base,
/// so within-group cosine is at least `(1 - EPS^2) / (1 + EPS^2)` (about
/// 0.956) and cross-group cosine at most `EPS^2 / (1 + EPS^2)` (about 0.022).
const HARD_GROUP_EPS: f64 = 0.15;

/// Ground-truth box area for a class of unit size at camera scale 1.
const BASE_AREA: f64 = 1024.0;

/// Pills per rendered scene, inclusive.
const PILLS_PER_SCENE: (usize, usize) = (5, 10);

/// Reserved ChaCha stream for the prescription sampler.
const CORPUS_STREAM: u64 = u64::MAX;

/// Full description of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    /// Number of pill classes N.
    pub classes: usize,
    /// Number of diagnoses D.
    pub diagnoses: usize,
    /// Disjoint sets of classes sharing near-identical appearance prototypes.
    pub hard_groups: Vec<Vec<usize>>,
    /// Per-class physical size scalar (relative box area), length N.
    pub size_table: Vec<f64>,
    /// Feature dimension h of region features.
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise_std: f64,
    /// Probability that a rendered scene contains a forced-occlusion pair.
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(WorldError::InvalidSpec("need at least one class".into()));
        }
        if self.diagnoses == 0 {
            return Err(WorldError::InvalidSpec("need at least one diagnosis".into()));
        }
        if self.feature_dim == 0 {
            return Err(WorldError::InvalidSpec("feature_dim must be positive".into()));
        }
        if self.size_table.len() != self.classes {
            return Err(WorldError::InvalidSpec(format!(
                "size_table has {} entries for {} classes",
                self.size_table.len(),
                self.classes
            )));
        }
        if self.size_table.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(WorldError::InvalidSpec("size_table entries must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(WorldError::InvalidSpec("noise_std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(WorldError::InvalidSpec("occlusion_rate must lie in [0, 1]".into()));
        }
        let mut seen = vec![false; self.classes];
        for group in &self.hard_groups {
            for &class in group {
                if class >= self.classes {
                    return Err(WorldError::InvalidSpec(format!(
                        "hard group member {class} out of range for {} classes",
                        self.classes
                    )));
                }
                if seen[class] {
                    return Err(WorldError::InvalidSpec(format!(
                        "hard groups must be disjoint; class {class} repeats"
                    )));
                }
                seen[class] = true;
            }
        }
        // One base direction per hard group plus one per ungrouped class; the
        // construction needs them mutually orthogonal.
        let grouped: usize = self.hard_groups.iter().map(Vec::len).sum();
        let bases = self.hard_groups.len() + (self.classes - grouped);
        if bases > self.feature_dim {
            return Err(WorldError::InvalidSpec(format!(
                "feature_dim {} cannot hold {bases} orthogonal prototype bases",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Classes belonging to any hard group, ascending.
    pub fn hard_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.hard_groups.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// A sampled world: per-class appearance prototypes (unit rows) and the
/// disease-pill bipartite weights behind prescription sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    spec: WorldSpec,
    prototypes: Matrix,
    /// Per diagnosis: (pill, inclusion weight), sorted by pill id.
    support: Vec<Vec<(usize, f64)>>,
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    /// N x h matrix of unit-norm class prototypes.
    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn support(&self, diagnosis: usize) -> &[(usize, f64)] {
        &self.support[diagnosis]
    }

    pub fn diagnosis_name(&self, diagnosis: usize) -> String {
        format!("dx-{diagnosis:03}")
    }

    /// Classes that no diagnosis can prescribe; they never appear in corpora
    /// or scenes sampled from this world.
    pub fn uncovered_classes(&self) -> Vec<usize> {
        let mut covered = vec![false; self.spec.classes];
        for pills in &self.support {
            for &(pill, _) in pills {
                covered[pill] = true;
            }
        }
        (0..self.spec.classes).filter(|&c| !covered[c]).collect()
    }

    /// Exact probability, per unordered class pair, that one sampled
    /// prescription contains both classes, enumerated over every reachable
    /// diagnosis subset. Entries are symmetric with zero diagonal and are not
    /// conditioned on the prescription being non-empty; normalize before
    /// comparing against empirical pair frequencies (the non-empty
    /// conditioning cancels under normalization).
    pub fn latent_pair_probabilities(&self) -> Matrix {
        let n = self.spec.classes;
        let d = self.spec.diagnoses;
        let k_max = d.min(MAX_DIAGNOSES_PER_PRESCRIPTION);
        let mut joint = Matrix::zeros(n, n);
        let mut subset: Vec<usize> = Vec::new();
        for k in 1..=k_max {
            let subset_weight = 1.0 / (k_max as f64 * binomial(d, k));
            enumerate_subsets(d, k, &mut subset, &mut |chosen| {
                let inclusion = self.inclusion_probabilities(chosen);
                for i in 0..n {
                    if inclusion[i] == 0.0 {
                        continue;
                    }
                    for j in (i + 1)..n {
                        let p = inclusion[i] * inclusion[j] * subset_weight;
                        if p > 0.0 {
                            joint.set(i, j, joint.get(i, j) + p);
                            joint.set(j, i, joint.get(i, j));
                        }
                    }
                }
            });
        }
        joint
    }

    /// P(pill included | prescription drew exactly this diagnosis set).
    fn inclusion_probabilities(&self, diagnoses: &[usize]) -> Vec<f64> {
        let mut miss = vec![1.0; self.spec.classes];
        for &d in diagnoses {
            for &(pill, weight) in &self.support[d] {
                miss[pill] *= 1.0 - weight;
            }
        }
        miss.into_iter().map(|m| 1.0 - m).collect()
    }
}

const MAX_DIAGNOSES_PER_PRESCRIPTION: usize = 3;

fn binomial(n: usize, k: usize) -> f64 {
    let mut value = 1.0;
    for i in 0..k {
        value = value * (n - i) as f64 / (i + 1) as f64;
    }
    value
}

fn enumerate_subsets(d: usize, k: usize, prefix: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if prefix.len() == k {
        visit(prefix);
        return;
    }
    let start = prefix.last().map_or(0, |&last| last + 1);
    for next in start..d {
        prefix.push(next);
        enumerate_subsets(d, k, prefix, visit);
        prefix.pop();
    }
}

fn unit_gaussian_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    loop {
        let row: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return row.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn project_out(row: &mut [f64], basis: &[Vec<f64>]) {
    for base in basis {
        let dot: f64 = row.iter().zip(base).map(|(a, b)| a * b).sum();
        for (r, b) in row.iter_mut().zip(base) {
            *r -= dot * b;
        }
    }
}

/// Draws the world's latent structure from the spec seed: one orthonormal
/// base direction per hard group and per ungrouped class (so distinct
/// appearance families start orthogonal), hard-group members perturbed around
/// their shared base, and a random pill support of size 2-4 with inclusion
/// weights in [0.3, 0.9] for each diagnosis.
pub fn sample_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes;
    let h = spec.feature_dim;

    // Owner of each base direction: hard groups first, then each ungrouped
    // class on its own.
    let mut grouped = vec![None; n];
    for (g, group) in spec.hard_groups.iter().enumerate() {
        for &class in group {
            grouped[class] = Some(g);
        }
    }
    let group_count = spec.hard_groups.len();
    let ungrouped: Vec<usize> = (0..n).filter(|&c| grouped[c].is_none()).collect();
    let base_count = group_count + ungrouped.len();

    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(base_count);
    while bases.len() < base_count {
        let mut row = unit_gaussian_row(&mut rng, h);
        project_out(&mut row, &bases);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-6 {
            continue; // Degenerate draw; take a fresh vector.
        }
        bases.push(row.into_iter().map(|v| v / norm).collect());
    }

    let mut prototypes = Matrix::zeros(n, h);
    for (slot, &class) in ungrouped.iter().enumerate() {
        for (j, v) in bases[group_count + slot].iter().enumerate() {
            prototypes.set(class, j, *v);
        }
    }
    for (g, group) in spec.hard_groups.iter().enumerate() {
        for &class in group {
            // Perturb orthogonally to the base so the within-group cosine
            // bound holds exactly.
            let mut delta = unit_gaussian_row(&mut rng, h);
            project_out(&mut delta, std::slice::from_ref(&bases[g]));
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row: Vec<f64> = if norm <= 1e-6 {
                bases[g].clone()
            } else {
                let scale = (1.0 + HARD_GROUP_EPS * HARD_GROUP_EPS).sqrt();
                bases[g]
                    .iter()
                    .zip(&delta)
                    .map(|(b, d)| (b + HARD_GROUP_EPS * d / norm) / scale)
                    .collect()
            };
            for (j, v) in row.iter().enumerate() {
                prototypes.set(class, j, *v);
            }
        }
    }

    let mut support = Vec::with_capacity(spec.diagnoses);
    for _ in 0..spec.diagnoses {
        let size = rng.random_range(2..=4).min(n);
        let mut pills: Vec<usize> = (0..n).collect();
        for i in 0..size {
            let j = rng.random_range(i..n);
            pills.swap(i, j);
        }
        let mut chosen: Vec<(usize, f64)> =
            pills[..size].iter().map(|&p| (p, rng.random_range(0.3..=0.9))).collect();
        chosen.sort_by_key(|&(p, _)| p);
        support.push(chosen);
    }

    Ok(World { spec: spec.clone(), prototypes, support })
}

/// Samples `count` prescriptions: 1-3 distinct diagnoses uniformly, then each
/// pill independently with probability `1 - prod_d (1 - w_d)` over the chosen
/// diagnoses. Draws yielding no pills are redrawn from scratch, which
/// conditions the corpus on non-emptiness.
pub fn sample_prescriptions(world: &World, count: usize) -> Result<PrescriptionCorpus> {
    if count == 0 {
        return Err(WorldError::InvalidSpec("prescription count must be at least 1".into()));
    }
    let spec = world.spec();
    let d = spec.diagnoses;
    let k_max = d.min(MAX_DIAGNOSES_PER_PRESCRIPTION);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(CORPUS_STREAM);
    let mut prescriptions = Vec::with_capacity(count);
    for index in 0..count {
        let mut attempts = 0;
        let (diagnoses, pills) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(WorldError::InvalidSpec(
                    "could not sample a non-empty prescription; supports too sparse".into(),
                ));
            }
            let k = rng.random_range(1..=k_max);
            let mut all: Vec<usize> = (0..d).collect();
            for i in 0..k {
                let j = rng.random_range(i..d);
                all.swap(i, j);
            }
            let mut chosen = all[..k].to_vec();
            chosen.sort_unstable();
            let inclusion = world.inclusion_probabilities(&chosen);
            let pills: Vec<usize> = (0..spec.classes)
                .filter(|&pill| {
                    let p = inclusion[pill];
                    p > 0.0 && rng.random::<f64>() < p
                })
                .collect();
            if !pills.is_empty() {
                break (chosen, pills);
            }
        };
        prescriptions.push(Prescription {
            id: format!("rx-{index:05}"),
            diagnoses: diagnoses.iter().map(|&dx| world.diagnosis_name(dx)).collect(),
            pills: pills.into_iter().collect(),
        });
    }
    Ok(PrescriptionCorpus { prescriptions })
}

/// One rendered scene: ground-truth boxes and labels, jittered proposal
/// boxes aligned index-for-index with the ground truth, region features, and
/// the id of the prescription the labels were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub proposals: Vec<BBox>,
    /// M x h region features.
    pub features: Matrix,
    pub prescription: String,
}

impl Scene {
    pub fn m(&self) -> usize {
        self.labels.len()
    }

    /// True if any ground-truth pair overlaps with IoU above 0.3.
    pub fn has_occluded_pair(&self) -> bool {
        for i in 0..self.boxes.len() {
            for j in (i + 1)..self.boxes.len() {
                if iou(&self.boxes[i], &self.boxes[j]) > 0.3 {
                    return true;
                }
            }
        }
        false
    }
}

/// Renders one scene from a prescription: 5-10 instances drawn with
/// replacement from the prescription's pill set, laid out on a jittered grid
/// (disjoint by construction), box areas `BASE_AREA * camera^2 * size`, with
/// the per-scene camera scale uniform in [0.5, 2]. With probability
/// `occlusion_rate` the closest-area instance pair is re-placed nearly
/// concentric so its IoU exceeds 0.3. Features are `prototype +
/// noise_std * N(0, 1)`, then every overlapping pair is blended toward each
/// other with coefficient `IoU / 2` per side. Proposals jitter each box by
/// Gaussian center offsets (sigma = 10% of the extent) and log-normal scale
/// factors (sigma = 0.1).
pub fn render_scene(world: &World, prescription: &Prescription, scene_index: usize) -> Result<Scene> {
    let spec = world.spec();
    if prescription.pills.is_empty() {
        return Err(WorldError::InvalidSpec("prescription lists no pills".into()));
    }
    if let Some(&bad) = prescription.pills.iter().find(|&&p| p >= spec.classes) {
        return Err(WorldError::InvalidSpec(format!(
            "prescription pill {bad} out of range for {} classes",
            spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + scene_index as u64);

    let pill_pool: Vec<usize> = prescription.pills.iter().copied().collect();
    let m = rng.random_range(PILLS_PER_SCENE.0..=PILLS_PER_SCENE.1);
    let labels: Vec<usize> =
        (0..m).map(|_| pill_pool[rng.random_range(0..pill_pool.len())]).collect();

    let camera = rng.random_range(0.5..=2.0);
    let mut sizes = Vec::with_capacity(m);
    for &label in &labels {
        let area = BASE_AREA * camera * camera * spec.size_table[label];
        let side = area.sqrt();
        let aspect = rng.random_range(0.8..=1.25);
        sizes.push((side * aspect, side / aspect));
    }

    // Jittered grid placement: cells are wide enough that boxes stay inside
    // their own cell, so un-occluded scenes have no overlap at all.
    let max_side = sizes.iter().map(|&(w, h)| w.max(h)).fold(0.0, f64::max);
    let cell = 1.5 * max_side;
    let cols = (m as f64).sqrt().ceil() as usize;
    let mut boxes: Vec<BBox> = Vec::with_capacity(m);
    for (k, &(w, h)) in sizes.iter().enumerate() {
        let (row, col) = (k / cols, k % cols);
        let x = col as f64 * cell + rng.random_range(0.0..=(cell - w));
        let y = row as f64 * cell + rng.random_range(0.0..=(cell - h));
        boxes.push(BBox::new(x, y, w, h));
    }

    if m >= 2 && rng.random::<f64>() < spec.occlusion_rate {
        // Pick the pair with the closest areas (ties toward low indices):
        // nesting those two maximizes the attainable IoU.
        let mut best = (0, 1);
        let mut best_ratio = f64::NEG_INFINITY;
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b) = (boxes[i].area(), boxes[j].area());
                let ratio = a.min(b) / a.max(b);
                if ratio > best_ratio + 1e-12 {
                    best_ratio = ratio;
                    best = (i, j);
                }
            }
        }
        let (i, j) = best;
        let (cx, cy) = (boxes[i].x + boxes[i].w / 2.0, boxes[i].y + boxes[i].h / 2.0);
        let offset = 0.05 * boxes[i].w.min(boxes[j].w);
        let mut moved = boxes[j];
        moved.x = cx + offset - moved.w / 2.0;
        moved.y = cy - moved.h / 2.0;
        if iou(&boxes[i], &moved) <= 0.3 {
            moved.x = cx - moved.w / 2.0; // Fall back to exact nesting.
        }
        boxes[j] = moved;
    }

    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| WorldError::InvalidSpec(format!("noise_std: {e}")))?;
    let h_dim = spec.feature_dim;
    let mut raw = Vec::with_capacity(m);
    for &label in &labels {
        let row: Vec<f64> =
            (0..h_dim).map(|d| world.prototypes.get(label, d) + noise.sample(&mut rng)).collect();
        raw.push(row);
    }

    // Occlusion corrupts appearance: blend each member of an overlapping pair
    // toward the other, proportionally to the overlap.
    let mut blended = raw.clone();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let overlap = iou(&boxes[i], &boxes[j]);
            if overlap > 0.0 {
                let beta = 0.5 * overlap;
                for d in 0..h_dim {
                    blended[i][d] += beta * (raw[j][d] - raw[i][d]);
                }
            }
        }
    }
    let features = Matrix::from_rows(&blended)
        .map_err(|e| WorldError::InvalidSpec(format!("feature assembly: {e}")))?;

    let log_scale = Normal::new(0.0, 0.1).expect("valid scale sigma");
    let proposals: Vec<BBox> = boxes
        .iter()
        .map(|b| {
            let dx = Normal::new(0.0, 0.1 * b.w).expect("valid sigma").sample(&mut rng);
            let dy = Normal::new(0.0, 0.1 * b.h).expect("valid sigma").sample(&mut rng);
            let sw: f64 = log_scale.sample(&mut rng);
            let sh: f64 = log_scale.sample(&mut rng);
            let (sw, sh) = (sw.exp(), sh.exp());
            let (w, h) = (b.w * sw, b.h * sh);
            let (cx, cy) = (b.x + b.w / 2.0 + dx, b.y + b.h / 2.0 + dy);
            BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
        })
        .collect();

    Ok(Scene { labels, boxes, proposals, features, prescription: prescription.id.clone() })
}

/// Renders `count` scenes, cycling through the corpus in order; scene `i`
/// draws from prescription `i % len` and RNG stream `1 + i`.
pub fn render_scenes(world: &World, corpus: &PrescriptionCorpus, count: usize) -> Result<Vec<Scene>> {
    render_scene_range(world, corpus, 0, count)
}

/// Renders scenes at global indices `start..start + count`, so disjoint index
/// ranges (train vs test splits) share no RNG stream.
pub fn render_scene_range(
    world: &World,
    corpus: &PrescriptionCorpus,
    start: usize,
    count: usize,
) -> Result<Vec<Scene>> {
    if corpus.is_empty() {
        return Err(WorldError::InvalidSpec("corpus has no prescriptions".into()));
    }
    (start..start + count)
        .map(|i| render_scene(world, &corpus.prescriptions[i % corpus.len()], i))
        .collect()
}

/// Ground-truth annotations for a scene list, image ids by position.
pub fn scenes_to_annotations(scenes: &[Scene]) -> AnnotationSet {
    let images = scenes
        .iter()
        .enumerate()
        .map(|(id, scene)| ImageAnnotation {
            image: format!("scene-{id:05}"),
            boxes: scene
                .labels
                .iter()
                .zip(&scene.boxes)
                .map(|(&label, b)| LabeledBox { x: b.x, y: b.y, w: b.w, h: b.h, label })
                .collect(),
        })
        .collect();
    AnnotationSet { images }
}

/// Sidecar record holding what annotations do not: region features, proposal
/// boxes (aligned with the annotation boxes of the same image), and the
/// source prescription id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image: usize,
    pub prescription: String,
    /// M rows of h features each.
    pub features: Vec<Vec<f64>>,
    /// M proposal boxes as (x, y, w, h).
    pub proposals: Vec<(f64, f64, f64, f64)>,
}

/// Writes the feature/proposal sidecar as JSON-lines, one record per scene.
pub fn write_scene_records<W: Write>(mut writer: W, scenes: &[Scene]) -> Result<()> {
    for (image, scene) in scenes.iter().enumerate() {
        let record = SceneRecord {
            image,
            prescription: scene.prescription.clone(),
            features: (0..scene.m()).map(|i| scene.features.row(i).to_vec()).collect(),
            proposals: scene.proposals.iter().map(|b| (b.x, b.y, b.w, b.h)).collect(),
        };
        let json = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

pub fn parse_scene_records<R: BufRead>(reader: R) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&text).map_err(|e| WorldError::Parse {
            line: idx + 1,
            message: format!("malformed scene record: {e}"),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Reassembles scenes from an annotation set and its sidecar records. The
/// pairing is positional; counts and per-image region counts must agree.
pub fn scenes_from_parts(annotations: &AnnotationSet, records: &[SceneRecord]) -> Result<Vec<Scene>> {
    if annotations.images.len() != records.len() {
        return Err(WorldError::InvalidSpec(format!(
            "{} annotated images but {} scene records",
            annotations.images.len(),
            records.len()
        )));
    }
    let mut scenes = Vec::with_capacity(records.len());
    for (image, record) in annotations.images.iter().zip(records) {
        let m = image.boxes.len();
        if record.features.len() != m || record.proposals.len() != m {
            return Err(WorldError::InvalidSpec(format!(
                "image {:?}: {m} boxes but {} feature rows / {} proposals",
                image.image,
                record.features.len(),
                record.proposals.len()
            )));
        }
        let features = Matrix::from_rows(&record.features)
            .map_err(|e| WorldError::InvalidSpec(format!("image {:?}: {e}", image.image)))?;
        scenes.push(Scene {
            labels: image.boxes.iter().map(|b| b.label).collect(),
            boxes: image
                .boxes
                .iter()
                .map(|b| BBox::new(b.x, b.y, b.w, b.h))
                .collect(),
            proposals: record
                .proposals
                .iter()
                .map(|&(x, y, w, h)| BBox::new(x, y, w, h))
                .collect(),
            features,
            prescription: record.prescription.clone(),
        });
    }
    Ok(scenes)
}
