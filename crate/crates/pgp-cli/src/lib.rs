//! Command-line harness wiring the detection pipeline end to end: world
//! generation, graph building, training, evaluation, ablations, and report
//! digests. Every command is a pure function of (config file, input files,
//! seed), so re-running one produces byte-identical artifacts.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use pgp_core::ablate::{run_ablation, AblateError, AblationMode, AblationReport, AblationSpec};
use pgp_core::config::RunConfig;
use pgp_core::evaluate::{evaluate, EvalError, EvalSummary};
use pgp_core::graphs::{
    build_co_graph, build_size_graph, parse_annotations, parse_corpus, write_annotations,
    write_corpus, CoGraph, GraphExport, PillCatalog, SizeGraph,
};
use pgp_core::losses::NeighborSets;
use pgp_core::model::{load_checkpoint, save_checkpoint, GraphPriors, ModelParams};
use pgp_core::train::{train, write_train_log, TrainError};
use pgp_core::world::{
    parse_scene_records, render_scene_range, sample_prescriptions, sample_world,
    scenes_from_parts, scenes_to_annotations, write_scene_records, Scene, World,
};

#[derive(Parser)]
#[command(
    name = "pgp",
    about = "Relational-prior pill detection at desk scale",
    version
)]
struct Cli {
    /// JSON run configuration; omitted, the built-in desk defaults apply.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic world: corpus, annotations, and scene features.
    GenWorld {
        /// Override world.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override data.prescriptions.
        #[arg(long)]
        prescriptions: Option<usize>,
        /// Override data.train_scenes.
        #[arg(long)]
        train_scenes: Option<usize>,
        /// Override data.test_scenes.
        #[arg(long)]
        test_scenes: Option<usize>,
    },
    /// Build the co-occurrence and size graphs from corpus and annotations.
    BuildGraphs,
    /// Train a model; writes the checkpoint and the loss-curve CSV.
    Train {
        /// Override training.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override training.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override training.learning_rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Override training.lambda_aux.
        #[arg(long)]
        lambda_aux: Option<f64>,
        /// Drop the relational stack and train the visual-only baseline.
        #[arg(long)]
        visual_only: bool,
    },
    /// Evaluate a checkpoint; writes the JSON summary and per-class CSV.
    Eval {
        /// Checkpoint to evaluate (defaults to paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Perturb the co-graph, retrain with the same seed, and diff the APs.
    Ablate {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Fraction of edges (or classes) to perturb, in [0, 1).
        #[arg(long)]
        fraction: f64,
        /// Seed for the perturbation choices.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a digest of the artifacts produced so far.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    EdgeRemove,
    EdgeAdd,
    NodeRemove,
}

impl From<ModeArg> for AblationMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::EdgeRemove => Self::EdgeRemove,
            ModeArg::EdgeAdd => Self::EdgeAdd,
            ModeArg::NodeRemove => Self::NodeRemove,
        }
    }
}

/// A command failure tagged with its exit code: usage/config problems exit 2,
/// failures during the work itself exit 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Self::Usage(e) | Self::Runtime(e) => e,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Entry point shared by the binary and integration tests. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage/config error.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            failure.code()
        }
    }
}

fn execute(cli: Cli) -> CmdResult {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenWorld { seed, prescriptions, train_scenes, test_scenes } => {
            cmd_gen_world(config, seed, prescriptions, train_scenes, test_scenes)
        }
        Command::BuildGraphs => cmd_build_graphs(config),
        Command::Train { steps, seed, learning_rate, lambda_aux, visual_only } => {
            cmd_train(config, steps, seed, learning_rate, lambda_aux, visual_only)
        }
        Command::Eval { checkpoint } => cmd_eval(config, checkpoint),
        Command::Ablate { mode, fraction, seed } => {
            cmd_ablate(config, AblationSpec { mode: mode.into(), fraction, seed })
        }
        Command::Report => cmd_report(config),
    }
}

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(usage),
        None => Ok(RunConfig::desk_default()),
    }
}

fn require_input(path: &Path, produced_by: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!(
            "missing input file {}; run `pgp {produced_by}` first",
            path.display()
        )))
    }
}

/// Writes an artifact, creating parent directories as needed.
fn write_artifact(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(runtime)?;
        }
    }
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn open_input(path: &Path) -> CmdResult<BufReader<File>> {
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map(BufReader::new)
        .map_err(usage)
}

fn catalog_for(config: &RunConfig) -> CmdResult<PillCatalog> {
    PillCatalog::with_placeholder_names(config.world.classes).map_err(usage)
}

/// Loads one scene split from its annotation file and feature sidecar.
fn load_scenes(config: &RunConfig, annotations: &Path, records: &Path) -> CmdResult<Vec<Scene>> {
    let catalog = catalog_for(config)?;
    let parsed = parse_annotations(open_input(annotations)?, &catalog)
        .with_context(|| format!("parsing {}", annotations.display()))
        .map_err(usage)?;
    let sidecar = parse_scene_records(open_input(records)?)
        .with_context(|| format!("parsing {}", records.display()))
        .map_err(usage)?;
    let scenes = scenes_from_parts(&parsed, &sidecar)
        .with_context(|| format!("pairing {} with {}", annotations.display(), records.display()))
        .map_err(usage)?;
    for scene in &scenes {
        if scene.features.cols() != config.world.feature_dim {
            return Err(usage(anyhow!(
                "scene features have {} dims but the config expects {}; regenerate the world",
                scene.features.cols(),
                config.world.feature_dim
            )));
        }
    }
    Ok(scenes)
}

fn load_co_graph(path: &Path) -> CmdResult<CoGraph> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let export = GraphExport::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)?;
    CoGraph::from_export(&export)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(usage)
}

fn load_size_graph(path: &Path) -> CmdResult<SizeGraph> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let export = GraphExport::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)?;
    SizeGraph::from_export(&export)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(usage)
}

/// Dense graph priors plus neighbor sets, as the training config demands.
fn load_graph_inputs(
    config: &RunConfig,
) -> CmdResult<(CoGraph, GraphPriors, Option<NeighborSets>)> {
    require_input(&config.paths.co_graph, "build-graphs")?;
    require_input(&config.paths.size_graph, "build-graphs")?;
    let co = load_co_graph(&config.paths.co_graph)?;
    let size = load_size_graph(&config.paths.size_graph)?;
    if co.n() != config.world.classes || size.n() != config.world.classes {
        return Err(usage(anyhow!(
            "graphs cover {} and {} classes but the config expects {}; rebuild the graphs",
            co.n(),
            size.n(),
            config.world.classes
        )));
    }
    let priors =
        GraphPriors { co: co.weights().clone(), size: size.weights_with_unknown_as_unit() };
    let sets = if config.training.lambda_aux > 0.0 {
        let (sets, warnings) = NeighborSets::build(&co, config.training.neighbor_k);
        for w in warnings {
            eprintln!("warning: {w}");
        }
        Some(sets)
    } else {
        None
    };
    Ok((co, priors, sets))
}

fn cmd_gen_world(
    mut config: RunConfig,
    seed: Option<u64>,
    prescriptions: Option<usize>,
    train_scenes: Option<usize>,
    test_scenes: Option<usize>,
) -> CmdResult {
    if let Some(seed) = seed {
        config.world.seed = seed;
    }
    if let Some(n) = prescriptions {
        config.data.prescriptions = n;
    }
    if let Some(n) = train_scenes {
        config.data.train_scenes = n;
    }
    if let Some(n) = test_scenes {
        config.data.test_scenes = n;
    }
    config.validate().map_err(usage)?;

    let world = sample_world(&config.world).map_err(usage)?;
    let corpus = sample_prescriptions(&world, config.data.prescriptions).map_err(runtime)?;
    let train =
        render_scene_range(&world, &corpus, 0, config.data.train_scenes).map_err(runtime)?;
    let test = render_scene_range(
        &world,
        &corpus,
        config.data.train_scenes,
        config.data.test_scenes,
    )
    .map_err(runtime)?;
    warn_uncovered(&world);

    let mut corpus_bytes = Vec::new();
    write_corpus(&mut corpus_bytes, &corpus).map_err(runtime)?;
    write_artifact(&config.paths.corpus, &corpus_bytes)?;
    write_split(&train, &config.paths.train_annotations, &config.paths.train_scenes)?;
    write_split(&test, &config.paths.test_annotations, &config.paths.test_scenes)?;

    let occluded = |scenes: &[Scene]| scenes.iter().filter(|s| s.has_occluded_pair()).count();
    println!(
        "world: {} classes ({} hard), {} diagnoses, seed {}",
        config.world.classes,
        config.world.hard_classes().len(),
        config.world.diagnoses,
        config.world.seed
    );
    println!("corpus: {} prescriptions -> {}", corpus.len(), config.paths.corpus.display());
    println!(
        "train: {} scenes ({} occluded) -> {} + {}",
        train.len(),
        occluded(&train),
        config.paths.train_annotations.display(),
        config.paths.train_scenes.display()
    );
    println!(
        "test: {} scenes ({} occluded) -> {} + {}",
        test.len(),
        occluded(&test),
        config.paths.test_annotations.display(),
        config.paths.test_scenes.display()
    );
    Ok(())
}

fn warn_uncovered(world: &World) {
    let uncovered = world.uncovered_classes();
    if !uncovered.is_empty() {
        eprintln!(
            "warning: classes {uncovered:?} are never prescribed; their co-graph rows will be zero"
        );
    }
}

fn write_split(scenes: &[Scene], annotations: &Path, records: &Path) -> CmdResult {
    let mut ann_bytes = Vec::new();
    write_annotations(&mut ann_bytes, &scenes_to_annotations(scenes)).map_err(runtime)?;
    write_artifact(annotations, &ann_bytes)?;
    let mut record_bytes = Vec::new();
    write_scene_records(&mut record_bytes, scenes).map_err(runtime)?;
    write_artifact(records, &record_bytes)?;
    Ok(())
}

/// Unordered off-diagonal nonzero pairs and the resulting density.
fn edge_stats(weights: &pgp_core::numerics::Matrix) -> (usize, f64) {
    let n = weights.rows();
    let mut edges = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if weights.get(i, j) != 0.0 {
                edges += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    (edges, if pairs == 0 { 0.0 } else { edges as f64 / pairs as f64 })
}

fn cmd_build_graphs(config: RunConfig) -> CmdResult {
    require_input(&config.paths.corpus, "gen-world")?;
    require_input(&config.paths.train_annotations, "gen-world")?;
    let catalog = catalog_for(&config)?;
    let corpus = parse_corpus(open_input(&config.paths.corpus)?, &catalog)
        .with_context(|| format!("parsing {}", config.paths.corpus.display()))
        .map_err(usage)?;
    let annotations = parse_annotations(open_input(&config.paths.train_annotations)?, &catalog)
        .with_context(|| format!("parsing {}", config.paths.train_annotations.display()))
        .map_err(usage)?;

    let build = build_co_graph(&corpus, &catalog).map_err(usage)?;
    for w in &build.warnings {
        eprintln!("warning: {w}");
    }
    let size = build_size_graph(&annotations, &catalog).map_err(usage)?;

    let mut co_json = build.graph.to_export().to_json();
    co_json.push('\n');
    write_artifact(&config.paths.co_graph, co_json.as_bytes())?;
    let mut size_json = size.to_export().to_json();
    size_json.push('\n');
    write_artifact(&config.paths.size_graph, size_json.as_bytes())?;

    let n = catalog.n();
    let (co_edges, co_density) = edge_stats(build.graph.weights());
    println!(
        "co graph: {n} classes, {co_edges} edges, density {co_density:.3} -> {}",
        config.paths.co_graph.display()
    );
    let mut known_pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if size.known(i, j) {
                known_pairs += 1;
            }
        }
    }
    let (size_edges, size_density) = edge_stats(&size.weights_with_unknown_as_unit());
    println!(
        "size graph: {n} classes, {size_edges} edges, density {size_density:.3}, \
         {known_pairs}/{} pairs known -> {}",
        n * (n - 1) / 2,
        config.paths.size_graph.display()
    );
    Ok(())
}

fn map_train_err(e: TrainError) -> Failure {
    match e {
        TrainError::Invalid(_) => usage(e),
        other => runtime(other),
    }
}

fn cmd_train(
    mut config: RunConfig,
    steps: Option<usize>,
    seed: Option<u64>,
    learning_rate: Option<f64>,
    lambda_aux: Option<f64>,
    visual_only: bool,
) -> CmdResult {
    if let Some(steps) = steps {
        config.training.steps = steps;
    }
    if let Some(seed) = seed {
        config.training.seed = seed;
    }
    if let Some(lr) = learning_rate {
        config.training.learning_rate = lr;
    }
    if let Some(aux) = lambda_aux {
        config.training.lambda_aux = aux;
    }
    if visual_only {
        config.model.relational = false;
    }
    config.validate().map_err(usage)?;

    require_input(&config.paths.train_annotations, "gen-world")?;
    require_input(&config.paths.train_scenes, "gen-world")?;
    let scenes =
        load_scenes(&config, &config.paths.train_annotations, &config.paths.train_scenes)?;

    let outcome = if config.model.relational {
        let (_, priors, sets) = load_graph_inputs(&config)?;
        train(&config, &scenes, Some(&priors), sets.as_ref()).map_err(map_train_err)?
    } else {
        train(&config, &scenes, None, None).map_err(map_train_err)?
    };

    if let Some(parent) = config.paths.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(runtime)?;
        }
    }
    save_checkpoint(&config.paths.checkpoint, &outcome.params)
        .with_context(|| format!("writing {}", config.paths.checkpoint.display()))
        .map_err(runtime)?;
    let mut log_bytes = Vec::new();
    write_train_log(&mut log_bytes, &outcome.log).map_err(runtime)?;
    write_artifact(&config.paths.train_log, &log_bytes)?;

    let variant = if config.model.relational { "relational" } else { "visual-only" };
    println!(
        "trained {variant} model: {} steps, batch {}, {} scenes",
        config.training.steps,
        config.training.batch_size,
        scenes.len()
    );
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "loss: total {:.4} -> {:.4} (cls {:.4} -> {:.4})",
            first.total, last.total, first.cls, last.cls
        );
    }
    println!("checkpoint -> {}", config.paths.checkpoint.display());
    println!("loss log -> {}", config.paths.train_log.display());
    Ok(())
}

fn cmd_eval(mut config: RunConfig, checkpoint: Option<PathBuf>) -> CmdResult {
    if let Some(path) = checkpoint {
        config.paths.checkpoint = path;
    }
    require_input(&config.paths.checkpoint, "train")?;
    require_input(&config.paths.test_annotations, "gen-world")?;
    require_input(&config.paths.test_scenes, "gen-world")?;
    let scenes = load_scenes(&config, &config.paths.test_annotations, &config.paths.test_scenes)?;
    let params: ModelParams =
        load_checkpoint(&config.paths.checkpoint, &config.world, &config.model)
            .with_context(|| format!("loading {}", config.paths.checkpoint.display()))
            .map_err(usage)?;

    let priors = if config.model.relational {
        let (_, priors, _) = load_graph_inputs(&config)?;
        Some(priors)
    } else {
        None
    };
    let eval = evaluate(&params, &config, &scenes, priors.as_ref()).map_err(|e| match e {
        EvalError::Invalid(_) => usage(e),
        other => runtime(other),
    })?;

    let mut summary_json =
        serde_json::to_string_pretty(&eval.summary).expect("summary serialization cannot fail");
    summary_json.push('\n');
    write_artifact(&config.paths.eval_report, summary_json.as_bytes())?;
    write_artifact(&config.paths.eval_csv, eval.report.to_csv().as_bytes())?;

    print_summary(&eval.summary);
    println!("report -> {}", config.paths.eval_report.display());
    println!("per-class table -> {}", config.paths.eval_csv.display());
    Ok(())
}

fn print_summary(summary: &EvalSummary) {
    println!(
        "mAP {:.4}  AP50 {:.4}  AP75 {:.4}  ECE {:.4}",
        summary.map, summary.ap50, summary.ap75, summary.ece
    );
    if let (Some(hard), Some(easy)) = (summary.hard_ap50, summary.easy_ap50) {
        println!("hard-class AP50 {hard:.4}  easy-class AP50 {easy:.4}");
    }
    match (summary.occluded_map, summary.occluded_ap50) {
        (Some(map), Some(ap50)) => println!(
            "occlusion subset: {} images, mAP {map:.4}, AP50 {ap50:.4}",
            summary.occluded_images
        ),
        _ => println!("occlusion subset: empty"),
    }
}

fn cmd_ablate(config: RunConfig, spec: AblationSpec) -> CmdResult {
    spec.validate().map_err(usage)?;
    require_input(&config.paths.train_annotations, "gen-world")?;
    require_input(&config.paths.train_scenes, "gen-world")?;
    require_input(&config.paths.test_annotations, "gen-world")?;
    require_input(&config.paths.test_scenes, "gen-world")?;
    let train_scenes =
        load_scenes(&config, &config.paths.train_annotations, &config.paths.train_scenes)?;
    let test_scenes =
        load_scenes(&config, &config.paths.test_annotations, &config.paths.test_scenes)?;
    let (co, priors, _) = load_graph_inputs(&config)?;

    let outcome = run_ablation(&config, &spec, &train_scenes, &test_scenes, &co, &priors.size)
        .map_err(|e| match e {
            AblateError::Invalid(_) => usage(e),
            other => runtime(other),
        })?;

    let mut report_json =
        serde_json::to_string_pretty(&outcome.report).expect("report serialization cannot fail");
    report_json.push('\n');
    write_artifact(&config.paths.ablate_report, report_json.as_bytes())?;

    print_ablation(&outcome.report);
    println!("report -> {}", config.paths.ablate_report.display());
    Ok(())
}

fn print_ablation(report: &AblationReport) {
    println!(
        "{} fraction {} (seed {}): removed {} edges, added {}, silenced classes {:?}",
        report.mode,
        report.fraction,
        report.seed,
        report.edges_removed,
        report.edges_added,
        report.removed_classes
    );
    println!(
        "AP50 {:.4} -> {:.4} ({:+.4})",
        report.baseline_ap50,
        report.ablated_ap50,
        report.ablated_ap50 - report.baseline_ap50
    );
    if let (Some(b), Some(a)) = (report.baseline_hard_ap50, report.ablated_hard_ap50) {
        println!("hard-class AP50 {b:.4} -> {a:.4} ({:+.4})", a - b);
    }
    if let (Some(b), Some(a)) = (report.baseline_retained_ap50, report.ablated_retained_ap50) {
        println!("retained-class AP50 {b:.4} -> {a:.4} ({:+.4})", a - b);
    }
}

fn cmd_report(config: RunConfig) -> CmdResult {
    let mut found = false;
    if config.paths.train_log.is_file() {
        found = true;
        let text = fs::read_to_string(&config.paths.train_log)
            .with_context(|| format!("reading {}", config.paths.train_log.display()))
            .map_err(usage)?;
        let mut rows = text.lines().skip(1).filter(|l| !l.is_empty());
        let first = rows.next();
        let last = rows.last().or(first);
        let total = |line: &str| line.split(',').nth(1).map(str::to_string);
        if let (Some(first), Some(last)) = (first, last) {
            println!("training ({}):", config.paths.train_log.display());
            if let (Some(a), Some(b)) = (total(first), total(last)) {
                println!("  {} steps, total loss {a} -> {b}", text.lines().count() - 1);
            }
        }
    }
    if config.paths.eval_report.is_file() {
        found = true;
        let text = fs::read_to_string(&config.paths.eval_report)
            .with_context(|| format!("reading {}", config.paths.eval_report.display()))
            .map_err(usage)?;
        let summary: EvalSummary = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", config.paths.eval_report.display()))
            .map_err(usage)?;
        println!("evaluation ({}):", config.paths.eval_report.display());
        print_summary(&summary);
    }
    if config.paths.ablate_report.is_file() {
        found = true;
        let text = fs::read_to_string(&config.paths.ablate_report)
            .with_context(|| format!("reading {}", config.paths.ablate_report.display()))
            .map_err(usage)?;
        let report: AblationReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", config.paths.ablate_report.display()))
            .map_err(usage)?;
        println!("ablation ({}):", config.paths.ablate_report.display());
        print_ablation(&report);
    }
    if !found {
        return Err(usage(anyhow!(
            "no artifacts found under the configured paths; run train, eval, or ablate first"
        )));
    }
    Ok(())
}
