//! Detection quality (COCO-style AP family) and confidence calibration
//! (reliability bins / expected calibration error).

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty ground truth: nothing to evaluate against")]
    EmptyGroundTruth,
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Axis-aligned box, origin at top-left, extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn is_well_formed(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w > 0.0 && self.h > 0.0
            && self.w.is_finite() && self.h.is_finite()
    }
}

/// Intersection area over union area, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// One scored prediction, tied to an image by index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
}

/// COCO-convention area buckets over ground-truth box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn contains(self, area: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const L: f64 = 96.0 * 96.0;
        match self {
            Self::Small => area < S,
            Self::Medium => (S..L).contains(&area),
            Self::Large => area >= L,
        }
    }
}

/// Indices into `detections` sorted by descending confidence, ties broken by
/// input order so results are deterministic.
fn confidence_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .expect("confidences validated finite")
            .then(a.cmp(&b))
    });
    order
}

/// Greedy confidence-descending matching of one class at one IoU threshold.
/// Returns the TP/FP flags in confidence order, excluding ignored detections,
/// plus the evaluated ground-truth count. With a bucket, out-of-bucket ground
/// truth is ignored (matching it discards the detection instead of scoring
/// it) and unmatched detections outside the bucket are likewise ignored;
/// in-bucket ground truth is preferred over ignored ground truth.
fn match_class(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    class: usize,
    threshold: f64,
    bucket: Option<SizeBucket>,
) -> (Vec<bool>, usize) {
    let in_bucket =
        |b: &BBox| bucket.map_or(true, |bucket| bucket.contains(b.area()));
    let dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    let gts: Vec<&GroundTruthBox> =
        ground_truth.iter().filter(|g| g.class == class).collect();
    let owned: Vec<Detection> = dets.iter().map(|d| **d).collect();
    let order = confidence_order(&owned);

    let mut matched = vec![false; gts.len()];
    let mut tp_fp = Vec::new();
    for di in order {
        let det = &owned[di];
        let mut best: Option<(usize, bool, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image != det.image || matched[gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v < threshold {
                continue;
            }
            let gt_in = in_bucket(&gt.bbox);
            let better = match best {
                None => true,
                Some((_, best_in, best_iou)) => {
                    (gt_in && !best_in) || (gt_in == best_in && v > best_iou)
                }
            };
            if better {
                best = Some((gi, gt_in, v));
            }
        }
        match best {
            Some((gi, true, _)) => {
                matched[gi] = true;
                tp_fp.push(true);
            }
            Some((gi, false, _)) => {
                // Matched an ignored ground truth: discard the detection.
                matched[gi] = true;
            }
            None => {
                if in_bucket(&det.bbox) {
                    tp_fp.push(false);
                }
            }
        }
    }
    let n_gt = gts.iter().filter(|g| in_bucket(&g.bbox)).count();
    (tp_fp, n_gt)
}

/// Area under the all-point interpolated precision-recall curve. `None` when
/// the class has no ground truth (AP undefined).
fn ap_from_flags(tp_fp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precisions = Vec::with_capacity(tp_fp.len());
    let mut recalls = Vec::with_capacity(tp_fp.len());
    let mut tp = 0usize;
    for (k, &flag) in tp_fp.iter().enumerate() {
        tp += flag as usize;
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision made monotonically non-increasing from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// AP for one class at one IoU threshold: greedy one-to-one matching,
/// highest confidence first, then the all-point interpolated PR area.
/// `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let (tp_fp, n_gt) = match_class(detections, ground_truth, class, iou_threshold, None);
    ap_from_flags(&tp_fp, n_gt)
}

/// IoU thresholds as integer percents: 50, 55, ..., 95.
pub const IOU_THRESHOLDS_PCT: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerClassAp {
    pub class: usize,
    pub iou_pct: u32,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// Equal-width reliability bins on [0, 1] and the count-weighted expected
/// calibration error. Empty bins report zero means and are excluded from the
/// ECE by their zero weight.
pub fn reliability_bins(confidences: &[f64], correct: &[bool], b: usize) -> ReliabilityReport {
    assert!(b >= 1, "need at least one bin");
    assert_eq!(confidences.len(), correct.len(), "one flag per confidence");
    let mut sums = vec![(0.0f64, 0usize, 0usize); b];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let bin = ((c * b as f64) as usize).min(b - 1);
        sums[bin].0 += c;
        sums[bin].1 += ok as usize;
        sums[bin].2 += 1;
    }
    let total: usize = confidences.len();
    let mut bins = Vec::with_capacity(b);
    let mut ece = 0.0;
    for (sum_conf, n_correct, count) in sums {
        if count == 0 {
            bins.push(ReliabilityBin { mean_confidence: 0.0, accuracy: 0.0, count: 0 });
            continue;
        }
        let mean_confidence = sum_conf / count as f64;
        let accuracy = n_correct as f64 / count as f64;
        ece += (count as f64 / total as f64) * (mean_confidence - accuracy).abs();
        bins.push(ReliabilityBin { mean_confidence, accuracy, count });
    }
    ReliabilityReport { bins, ece }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<PerClassAp>,
    pub reliability: ReliabilityReport,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    map: f64,
    ap50: f64,
    ap75: f64,
    ap_small: Option<f64>,
    ap_medium: Option<f64>,
    ap_large: Option<f64>,
    ece: f64,
    bins: &'a [ReliabilityBin],
}

impl EvalReport {
    /// One row per present class and IoU threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,ap\n");
        for row in &self.per_class {
            out.push_str(&format!(
                "{},{:.2},{}\n",
                row.class,
                row.iou_pct as f64 / 100.0,
                row.ap
            ));
        }
        out
    }

    pub fn to_json_summary(&self) -> String {
        serde_json::to_string(&JsonSummary {
            map: self.map,
            ap50: self.ap50,
            ap75: self.ap75,
            ap_small: self.ap_small,
            ap_medium: self.ap_medium,
            ap_large: self.ap_large,
            ece: self.reliability.ece,
            bins: &self.reliability.bins,
        })
        .expect("report serialization cannot fail")
    }
}

fn validate(detections: &[Detection], ground_truth: &[GroundTruthBox]) -> Result<()> {
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    for d in detections {
        if !(0.0..=1.0).contains(&d.confidence) || !d.confidence.is_finite() {
            return Err(MetricsError::InvalidDetection(format!(
                "confidence {} outside [0, 1]",
                d.confidence
            )));
        }
        if !d.bbox.is_well_formed() {
            return Err(MetricsError::InvalidDetection(format!("malformed box {:?}", d.bbox)));
        }
    }
    for g in ground_truth {
        if !g.bbox.is_well_formed() {
            return Err(MetricsError::InvalidGroundTruth(format!("malformed box {:?}", g.bbox)));
        }
    }
    Ok(())
}

/// Mean AP per bucket: average over present classes and all ten thresholds,
/// skipping undefined (no in-bucket ground truth) class/threshold cells.
fn bucket_map(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    classes: &[usize],
    bucket: SizeBucket,
) -> Option<f64> {
    let mut values = Vec::new();
    for &class in classes {
        for &pct in &IOU_THRESHOLDS_PCT {
            let threshold = pct as f64 / 100.0;
            let (tp_fp, n_gt) =
                match_class(detections, ground_truth, class, threshold, Some(bucket));
            if let Some(ap) = ap_from_flags(&tp_fp, n_gt) {
                values.push(ap);
            }
        }
    }
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Classification correctness per detection: matched (IoU >= 0.5, greedy by
/// confidence) to a same-class ground truth. Feeds the reliability bins.
fn correctness_flags(detections: &[Detection], ground_truth: &[GroundTruthBox]) -> Vec<bool> {
    let mut flags = vec![false; detections.len()];
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let order = confidence_order(detections);
        let gts: Vec<&GroundTruthBox> =
            ground_truth.iter().filter(|g| g.class == class).collect();
        let mut matched = vec![false; gts.len()];
        for di in order {
            let det = &detections[di];
            if det.class != class {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if gt.image != det.image || matched[gi] {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
                flags[di] = true;
            }
        }
    }
    flags
}

/// Full evaluation: mAP over present classes and thresholds 0.50:0.95 (step
/// 0.05), AP50/AP75, COCO size buckets, per-class table, and reliability
/// bins over all detections (correct = matched at IoU 0.5, same class).
pub fn map_report(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    reliability_bin_count: usize,
) -> Result<EvalReport> {
    validate(detections, ground_truth)?;
    let mut classes: Vec<usize> = ground_truth.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len() * IOU_THRESHOLDS_PCT.len());
    for &class in &classes {
        for &pct in &IOU_THRESHOLDS_PCT {
            let threshold = pct as f64 / 100.0;
            let ap = average_precision(detections, ground_truth, class, threshold)
                .expect("class taken from ground truth, AP defined");
            per_class.push(PerClassAp { class, iou_pct: pct, ap });
        }
    }
    let mean = |rows: &[&PerClassAp]| -> f64 {
        rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64
    };
    let all: Vec<&PerClassAp> = per_class.iter().collect();
    let at = |pct: u32| -> Vec<&PerClassAp> {
        per_class.iter().filter(|r| r.iou_pct == pct).collect()
    };
    let map = mean(&all);
    let ap50 = mean(&at(50));
    let ap75 = mean(&at(75));

    let ap_small = bucket_map(detections, ground_truth, &classes, SizeBucket::Small);
    let ap_medium = bucket_map(detections, ground_truth, &classes, SizeBucket::Medium);
    let ap_large = bucket_map(detections, ground_truth, &classes, SizeBucket::Large);

    let confidences: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
    let flags = correctness_flags(detections, ground_truth);
    let reliability = reliability_bins(&confidences, &flags, reliability_bin_count);

    Ok(EvalReport {
        map,
        ap50,
        ap75,
        ap_small,
        ap_medium,
        ap_large,
        per_class,
        reliability,
    })
}
