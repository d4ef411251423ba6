//! Prescription corpora, box annotations, and the two a priori graphs built
//! from them: the co-occurrence graph (tf-idf over diagnose-pill statistics)
//! and the relative size graph (box-area ratios propagated per component).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),
    #[error("empty corpus: graph construction needs at least one prescription")]
    EmptyCorpus,
    #[error("empty annotation set: graph construction needs at least one image")]
    EmptyAnnotations,
    #[error("bad catalog: {0}")]
    BadCatalog(String),
    #[error("bad graph export: {0}")]
    BadExport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Non-fatal conditions surfaced by the graph builders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphWarning {
    /// Catalog pill never appears in the corpus; its co-graph row stays zero.
    PillAbsentFromCorpus { pill: usize },
    /// All diagnose-pill impacts vanish for this pill (e.g. it appears in
    /// every prescription, so its idf is zero); its co-graph row stays zero.
    PillZeroImpact { pill: usize },
}

impl fmt::Display for GraphWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PillAbsentFromCorpus { pill } => {
                write!(f, "pill {pill} absent from corpus; co-graph row left zero")
            }
            Self::PillZeroImpact { pill } => {
                write!(f, "pill {pill} has zero impact for every diagnosis; co-graph row left zero")
            }
        }
    }
}

/// Ordered pill classes; ids are dense indices 0..N-1 into this list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PillCatalog {
    names: Vec<String>,
}

impl PillCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(GraphError::BadCatalog("catalog must list at least one class".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(GraphError::BadCatalog("class names must be unique".into()));
        }
        Ok(Self { names })
    }

    /// Catalog of `n` placeholder names `pill-0..pill-n-1`.
    pub fn with_placeholder_names(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("pill-{i}")).collect())
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One prescription: what was diagnosed and which pills were dispensed.
/// Duplicate entries in the source record are collapsed by the set types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prescription {
    pub id: String,
    pub diagnoses: BTreeSet<String>,
    pub pills: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PrescriptionCorpus {
    pub prescriptions: Vec<Prescription>,
}

impl PrescriptionCorpus {
    pub fn len(&self) -> usize {
        self.prescriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prescriptions.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrescriptionRecord {
    id: String,
    diagnoses: Vec<String>,
    pills: Vec<usize>,
}

fn parse_error(line: usize, err: serde_json::Error) -> GraphError {
    GraphError::Parse { line, message: format!("malformed record: {err}") }
}

/// Parses a JSON-lines prescription corpus, validating pill ids against the
/// catalog. Whitespace-only lines are skipped; errors carry 1-based line
/// numbers.
pub fn parse_corpus<R: BufRead>(reader: R, catalog: &PillCatalog) -> Result<PrescriptionCorpus> {
    let mut prescriptions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: PrescriptionRecord =
            serde_json::from_str(&text).map_err(|e| parse_error(line_no, e))?;
        let diagnoses: BTreeSet<String> = record.diagnoses.into_iter().collect();
        let pills: BTreeSet<usize> = record.pills.into_iter().collect();
        if diagnoses.is_empty() {
            return Err(GraphError::Invalid {
                line: line_no,
                message: format!("prescription {:?} lists no diagnoses", record.id),
            });
        }
        if pills.is_empty() {
            return Err(GraphError::Invalid {
                line: line_no,
                message: format!("prescription {:?} lists no pills", record.id),
            });
        }
        if let Some(&bad) = pills.iter().find(|&&p| p >= catalog.n()) {
            return Err(GraphError::Invalid {
                line: line_no,
                message: format!(
                    "unknown pill id {bad} (catalog has {} classes)",
                    catalog.n()
                ),
            });
        }
        prescriptions.push(Prescription { id: record.id, diagnoses, pills });
    }
    Ok(PrescriptionCorpus { prescriptions })
}

/// Writes a corpus back out as JSON-lines with sorted diagnosis/pill sets.
pub fn write_corpus<W: Write>(mut writer: W, corpus: &PrescriptionCorpus) -> Result<()> {
    for p in &corpus.prescriptions {
        let record = PrescriptionRecord {
            id: p.id.clone(),
            diagnoses: p.diagnoses.iter().cloned().collect(),
            pills: p.pills.iter().copied().collect(),
        };
        let json = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

/// Per-corpus occurrence counts backing the tf-idf statistics.
struct CorpusStats {
    total: usize,
    per_diagnosis: BTreeMap<String, usize>,
    per_pill: BTreeMap<usize, usize>,
    per_pair: BTreeMap<(String, usize), usize>,
}

impl CorpusStats {
    fn new(corpus: &PrescriptionCorpus) -> Self {
        let mut per_diagnosis = BTreeMap::new();
        let mut per_pill = BTreeMap::new();
        let mut per_pair = BTreeMap::new();
        for p in &corpus.prescriptions {
            for d in &p.diagnoses {
                *per_diagnosis.entry(d.clone()).or_insert(0) += 1;
            }
            for &pill in &p.pills {
                *per_pill.entry(pill).or_insert(0) += 1;
            }
            for d in &p.diagnoses {
                for &pill in &p.pills {
                    *per_pair.entry((d.clone(), pill)).or_insert(0) += 1;
                }
            }
        }
        Self { total: corpus.len(), per_diagnosis, per_pill, per_pair }
    }

    fn impact(&self, pill: usize, diagnosis: &str) -> Result<f64> {
        let s_d = *self.per_diagnosis.get(diagnosis).ok_or_else(|| {
            GraphError::UndefinedStatistic(format!(
                "diagnosis {diagnosis:?} never appears in the corpus"
            ))
        })?;
        let s_p = *self.per_pill.get(&pill).ok_or_else(|| {
            GraphError::UndefinedStatistic(format!("pill {pill} is never prescribed"))
        })?;
        let s_dp = *self.per_pair.get(&(diagnosis.to_string(), pill)).unwrap_or(&0);
        let tf = s_dp as f64 / s_d as f64;
        let idf = ((self.total as f64) / (s_p as f64)).ln();
        Ok(tf * idf)
    }
}

/// Diagnose-pill impact factor: the share of a diagnosis's prescriptions that
/// include the pill, discounted by how ubiquitous the pill is overall
/// (natural-log idf).
pub fn impact_factor(
    corpus: &PrescriptionCorpus,
    pill: usize,
    diagnosis: &str,
) -> Result<f64> {
    CorpusStats::new(corpus).impact(pill, diagnosis)
}

/// Co-occurrence graph over pill classes; entry (i, j) is the probability
/// that i and j are prescribed for the same diseases.
#[derive(Debug, Clone, PartialEq)]
pub struct CoGraph {
    weights: Matrix,
}

impl CoGraph {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn to_export(&self) -> GraphExport {
        let n = self.n();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = self.weights.get(i, j);
                if w != 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
        GraphExport { n, kind: GraphKind::Co, edges, known: None }
    }

    pub fn from_export(export: &GraphExport) -> Result<Self> {
        if export.kind != GraphKind::Co {
            return Err(GraphError::BadExport("expected kind \"co\"".into()));
        }
        Ok(Self { weights: export.dense_weights(0.0)? })
    }
}

/// Normalized per-pill impact distributions over the corpus's diagnoses
/// (sorted). Rows of the returned matrix sum to 1 for pills with any nonzero
/// impact and stay zero otherwise; `warnings` records the zero rows.
fn normalized_impact_rows(
    corpus: &PrescriptionCorpus,
    catalog: &PillCatalog,
) -> Result<(Matrix, Vec<GraphWarning>)> {
    let stats = CorpusStats::new(corpus);
    let diagnoses: Vec<&String> = stats.per_diagnosis.keys().collect();
    let mut rows = Matrix::zeros(catalog.n(), diagnoses.len());
    let mut warnings = Vec::new();
    for pill in 0..catalog.n() {
        if !stats.per_pill.contains_key(&pill) {
            warnings.push(GraphWarning::PillAbsentFromCorpus { pill });
            continue;
        }
        let impacts: Vec<f64> = diagnoses
            .iter()
            .map(|d| stats.impact(pill, d))
            .collect::<Result<_>>()?;
        let total: f64 = impacts.iter().sum();
        if total == 0.0 {
            warnings.push(GraphWarning::PillZeroImpact { pill });
            continue;
        }
        for (j, imp) in impacts.iter().enumerate() {
            rows.set(pill, j, imp / total);
        }
    }
    Ok((rows, warnings))
}

#[derive(Debug)]
pub struct CoGraphBuild {
    pub graph: CoGraph,
    pub warnings: Vec<GraphWarning>,
}

/// Builds the co-occurrence graph: each pill's impacts are normalized into a
/// distribution over diagnoses, and entry (i, j) is the dot product of the
/// distributions for i and j. Each unordered pair is computed once, so the
/// result is exactly symmetric; the diagonal is retained.
pub fn build_co_graph(
    corpus: &PrescriptionCorpus,
    catalog: &PillCatalog,
) -> Result<CoGraphBuild> {
    if corpus.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    let (p, warnings) = normalized_impact_rows(corpus, catalog)?;
    let n = catalog.n();
    let mut weights = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let w: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
            weights.set(i, j, w);
            weights.set(j, i, w);
        }
    }
    Ok(CoGraphBuild { graph: CoGraph { weights }, warnings })
}

/// Axis-aligned box with a pill class label; width and height in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: usize,
}

impl LabeledBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub image: String,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotation>,
}

/// Parses JSON-lines box annotations, one object per image. Errors carry
/// 1-based line numbers; boxes must have positive extent and known labels.
pub fn parse_annotations<R: BufRead>(
    reader: R,
    catalog: &PillCatalog,
) -> Result<AnnotationSet> {
    let mut images = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: ImageAnnotation =
            serde_json::from_str(&text).map_err(|e| parse_error(line_no, e))?;
        for b in &record.boxes {
            if !(b.w > 0.0 && b.h > 0.0) || !b.x.is_finite() || !b.y.is_finite() {
                return Err(GraphError::Invalid {
                    line: line_no,
                    message: format!(
                        "image {:?}: box must have positive finite extent, got w={} h={}",
                        record.image, b.w, b.h
                    ),
                });
            }
            if b.label >= catalog.n() {
                return Err(GraphError::Invalid {
                    line: line_no,
                    message: format!(
                        "unknown pill id {} (catalog has {} classes)",
                        b.label,
                        catalog.n()
                    ),
                });
            }
        }
        images.push(record);
    }
    Ok(AnnotationSet { images })
}

pub fn write_annotations<W: Write>(mut writer: W, set: &AnnotationSet) -> Result<()> {
    for image in &set.images {
        let json = serde_json::to_string(image).expect("record serialization cannot fail");
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

/// Relative size graph; entry (i, j) is the size indicator ratio s_i / s_j,
/// defined only where `known` (classes observed in the same connected
/// component of co-occurrence).
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGraph {
    weights: Matrix,
    known: Vec<bool>,
}

impl SizeGraph {
    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn known(&self, i: usize, j: usize) -> bool {
        self.known[i * self.n() + j]
    }

    /// Dense weights for the pipeline: unknown pairs fall back to ratio 1
    /// (treated as same-sized) rather than a fabricated statistic.
    pub fn weights_with_unknown_as_unit(&self) -> Matrix {
        let n = self.n();
        let mut out = Matrix::filled(n, n, 1.0);
        for i in 0..n {
            for j in 0..n {
                if self.known(i, j) {
                    out.set(i, j, self.weight(i, j));
                }
            }
        }
        out
    }

    pub fn to_export(&self) -> GraphExport {
        let n = self.n();
        let mut edges = Vec::new();
        let mut known = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if self.known(i, j) {
                    edges.push((i, j, self.weight(i, j)));
                    known[i][j] = true;
                }
            }
        }
        GraphExport { n, kind: GraphKind::Size, edges, known: Some(known) }
    }

    pub fn from_export(export: &GraphExport) -> Result<Self> {
        if export.kind != GraphKind::Size {
            return Err(GraphError::BadExport("expected kind \"size\"".into()));
        }
        let mask = export
            .known
            .as_ref()
            .ok_or_else(|| GraphError::BadExport("size export lacks known mask".into()))?;
        if mask.len() != export.n || mask.iter().any(|row| row.len() != export.n) {
            return Err(GraphError::BadExport("known mask shape mismatch".into()));
        }
        let weights = export.dense_weights(0.0)?;
        let known = mask.iter().flatten().copied().collect();
        Ok(Self { weights, known })
    }
}

/// Builds the size graph. Per image, each class contributes the mean area of
/// its boxes; every co-occurring class pair contributes one log-ratio
/// observation. Observations for the same pair are averaged in log space
/// (geometric mean), then size indicators propagate by breadth-first
/// traversal from the lowest-index class of each connected component.
pub fn build_size_graph(
    annotations: &AnnotationSet,
    catalog: &PillCatalog,
) -> Result<SizeGraph> {
    if annotations.images.is_empty() {
        return Err(GraphError::EmptyAnnotations);
    }
    let n = catalog.n();

    // (i, j) with i < j -> log-ratio observations log(area_j / area_i).
    let mut observations: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut observed = vec![false; n];
    for image in &annotations.images {
        let mut area_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for b in &image.boxes {
            let entry = area_sums.entry(b.label).or_insert((0.0, 0));
            entry.0 += b.area();
            entry.1 += 1;
        }
        let means: Vec<(usize, f64)> = area_sums
            .into_iter()
            .map(|(class, (sum, count))| (class, sum / count as f64))
            .collect();
        for (class, _) in &means {
            observed[*class] = true;
        }
        for (a, &(ci, area_i)) in means.iter().enumerate() {
            for &(cj, area_j) in &means[a + 1..] {
                observations.entry((ci, cj)).or_default().push((area_j / area_i).ln());
            }
        }
    }

    // Aggregated log-ratio per unordered pair and adjacency lists.
    let mut mean_log: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for ((i, j), logs) in &observations {
        mean_log.insert((*i, *j), logs.iter().sum::<f64>() / logs.len() as f64);
        adjacency[*i].insert(*j);
        adjacency[*j].insert(*i);
    }

    // Breadth-first propagation of log size indicators; the first path to
    // reach a vertex assigns it. Components are labeled so cross-component
    // pairs stay unknown.
    let mut log_indicator = vec![0.0f64; n];
    let mut component = vec![usize::MAX; n];
    let mut next_component = 0;
    for seed in 0..n {
        if !observed[seed] || component[seed] != usize::MAX {
            continue;
        }
        component[seed] = next_component;
        log_indicator[seed] = 0.0;
        let mut queue = std::collections::VecDeque::from([seed]);
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if component[j] != usize::MAX {
                    continue;
                }
                let step = if i < j { mean_log[&(i, j)] } else { -mean_log[&(j, i)] };
                component[j] = next_component;
                log_indicator[j] = log_indicator[i] + step;
                queue.push_back(j);
            }
        }
        next_component += 1;
    }

    let indicator: Vec<f64> = log_indicator.iter().map(|l| l.exp()).collect();
    let mut weights = Matrix::zeros(n, n);
    let mut known = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if component[i] != usize::MAX && component[i] == component[j] {
                weights.set(i, j, indicator[i] / indicator[j]);
                known[i * n + j] = true;
            }
        }
    }
    Ok(SizeGraph { weights, known })
}

/// Graph kind tag used in the JSON export format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Co,
    Size,
}

/// Portable JSON form of a built graph: explicit edge list plus, for size
/// graphs, the known mask. Floats serialize as shortest round-trip decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphExport {
    pub n: usize,
    pub kind: GraphKind,
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub known: Option<Vec<Vec<bool>>>,
}

impl GraphExport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("export serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let export: Self =
            serde_json::from_str(text).map_err(|e| GraphError::BadExport(e.to_string()))?;
        for &(i, j, w) in &export.edges {
            if i >= export.n || j >= export.n {
                return Err(GraphError::BadExport(format!(
                    "edge ({i}, {j}) out of range for n={}",
                    export.n
                )));
            }
            if !w.is_finite() {
                return Err(GraphError::BadExport(format!(
                    "edge ({i}, {j}) has non-finite weight"
                )));
            }
        }
        Ok(export)
    }

    fn dense_weights(&self, fill: f64) -> Result<Matrix> {
        let mut weights = Matrix::filled(self.n, self.n, fill);
        for &(i, j, w) in &self.edges {
            if i >= self.n || j >= self.n {
                return Err(GraphError::BadExport(format!(
                    "edge ({i}, {j}) out of range for n={}",
                    self.n
                )));
            }
            weights.set(i, j, w);
        }
        Ok(weights)
    }
}
