//! `stance`: retweet logs to a shared stance space, clusters and networks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stance_core::cluster::{self, ClusterAssignment, ClusterSelection, HdbscanParams};
use stance_core::config::RunConfig;
use stance_core::graph::{self, EdgeWeighting, GraphLevel};
use stance_core::ingest::{self, EventFormat, SampleSpec};
use stance_core::matrix::IncidenceMatrix;
use stance_core::pca::{Provenance, ScoreMatrix};
use stance_core::pipeline::{self, RunOptions, Stage};
use stance_core::synth::{self, PlantedConfig};
use stance_core::{parallel, report, Error, Result};

#[derive(Parser)]
#[command(
    name = "stance",
    version,
    about = "Latent stance spaces from multi-sample retweet logs"
)]
struct Cli {
    /// Seed for every randomized step; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, range-check and trim one sample's raw events.
    Ingest(IngestArgs),
    /// Generate a planted-stance corpus with ground truth.
    Synth(SynthArgs),
    /// Ingest, threshold and run the hierarchical PCA (stages up to compose).
    Compose(RunArgs),
    /// Percentile filter plus HDBSCAN on a score table.
    Cluster(ClusterArgs),
    /// Co-retweet network and Louvain communities.
    Graph(GraphArgs),
    /// Interpretive tables.
    #[command(subcommand)]
    Report(ReportCommand),
    /// The full pipeline.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    sample: String,
    #[arg(long)]
    start: String,
    #[arg(long)]
    end: String,
    #[arg(long, default_value = "jsonl")]
    format: String,
    #[arg(long)]
    active_users: Option<PathBuf>,
    #[arg(long)]
    min_events: Option<usize>,
    #[arg(long, default_value_t = ingest::DEFAULT_ERROR_LIMIT)]
    error_limit: f64,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Resume from this stage, reading earlier artifacts from the run directory.
    #[arg(long)]
    from_stage: Option<String>,
    #[arg(long)]
    to_stage: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Eom,
    Leaf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = cluster::DEFAULT_PERCENTILE)]
    percentile: f64,
    #[arg(long, default_value_t = cluster::DEFAULT_MIN_CLUSTER_SIZE)]
    min_cluster_size: usize,
    #[arg(long)]
    min_samples: Option<usize>,
    #[arg(long, value_enum, default_value = "eom")]
    selection: SelectionArg,
    /// Store distances in 32-bit floats.
    #[arg(long)]
    float32: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    User,
    Cluster,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Binary,
    Counts,
}

#[derive(Args)]
struct GraphArgs {
    /// Matrix base path (without `.mtx`).
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long, value_enum, default_value = "cluster")]
    level: LevelArg,
    #[arg(long, value_enum, default_value = "binary")]
    weighting: WeightingArg,
    #[arg(long, default_value_t = 1.0)]
    resolution: f64,
    /// Louvain passes; the best modularity is kept.
    #[arg(long, default_value_t = graph::DEFAULT_LOUVAIN_RESTARTS)]
    restarts: usize,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Influencers with the largest composed weight on a common PC.
    TopInfluencers {
        /// Compose stage directory of a run.
        #[arg(long)]
        compose_dir: PathBuf,
        #[arg(long, default_value = "PC1")]
        component: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Per-cluster sizes, top influencers and activity shares.
    ClusterSummary {
        #[arg(long)]
        assignments: PathBuf,
        /// Per-sample matrix base paths; the file stem is the sample id.
        #[arg(long, required = true, num_args = 1..)]
        matrix: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// `user_id,cluster,PC1..PCk` table.
    Pairplot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        drop_noise: bool,
    },
    /// Sample-PC arrows in a plane of the common space.
    Biplot {
        #[arg(long)]
        compose_dir: PathBuf,
        #[arg(long, default_value = "PC1")]
        pc_x: String,
        #[arg(long, default_value = "PC2")]
        pc_y: String,
    },
}

fn out_path(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    write_file(path, |w| {
        w.write_all(format!("{text}\n").as_bytes())
            .map_err(|e| Error::io(path, e))
    })
}

fn read_assignments(path: &Path) -> Result<ClusterAssignment> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ClusterAssignment::read_csv(f)
}

fn cmd_ingest(a: &IngestArgs, out: &Option<PathBuf>) -> Result<()> {
    let format: EventFormat = a.format.parse()?;
    let mut spec = SampleSpec::new(
        a.sample.clone(),
        ingest::parse_iso_date(&a.start)?,
        ingest::parse_iso_date(&a.end)?,
    )?;
    spec.source_paths = a.files.clone();
    let outcome = ingest::parse_files(&a.files, format, &spec, a.error_limit)?;
    let events = match (&a.active_users, a.min_events) {
        (Some(p), _) => ingest::filter_persistent(&outcome.events, &ingest::read_active_users_file(p)?)?,
        (None, Some(n)) => {
            ingest::filter_persistent(&outcome.events, &ingest::derive_active_users(&outcome.events, n))?
        }
        (None, None) => outcome.events.clone(),
    };
    let path = out_path(out, &format!("{}.jsonl", a.sample));
    write_file(&path, |w| ingest::write_events_jsonl(w, &events))?;
    log::info!(
        "stage=ingest event=done sample={} records={} malformed={} out_of_range={} self_retweets={} kept={} out={}",
        a.sample,
        outcome.records,
        outcome.malformed,
        outcome.out_of_range,
        outcome.self_retweets,
        events.len(),
        path.display()
    );
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg: PlantedConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("planted config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_path(out, "synth");
    let generated = synth::generate(&cfg)?;
    synth::write_output(&generated, &dir)?;
    // A run configuration over the generated files, with default settings.
    let run = json!({
        "seed": cfg.seed,
        "samples": cfg.samples.iter().map(|s| json!({
            "sample_id": s.sample_id,
            "start": s.start,
            "end": s.end,
            "paths": [format!("{}.jsonl", s.sample_id)],
        })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("run_config.json"), &run)?;
    log::info!(
        "stage=synth event=done users={} samples={} active_in_all={} expected_intersection={:.1} out={}",
        cfg.n_users,
        cfg.samples.len(),
        generated.truth.n_active_in_all,
        generated.truth.expected_intersection,
        dir.display()
    );
    Ok(())
}

fn cmd_run(a: &RunArgs, seed: Option<u64>, out: &Option<PathBuf>, last: Stage) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        force: a.force,
        from_stage: a.from_stage.as_deref().map_or(Ok(Stage::Ingest), str::parse)?,
        to_stage: a.to_stage.as_deref().map_or(Ok(last), str::parse)?,
    };
    let dir = out_path(out, "stance-run");
    pipeline::run_pipeline(&cfg, &dir, &opts)?;
    log::info!("stage=run event=done out={}", dir.display());
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs, out: &Option<PathBuf>) -> Result<()> {
    let scores = ScoreMatrix::load_csv(&a.scores, Provenance::Common)?;
    let filtered = cluster::percentile_filter(&scores, a.percentile)?;
    let d = cluster::cosine_distances(&filtered, a.float32)?;
    let params = HdbscanParams {
        min_cluster_size: a.min_cluster_size,
        min_samples: a.min_samples,
        selection: match a.selection {
            SelectionArg::Eom => ClusterSelection::ExcessOfMass,
            SelectionArg::Leaf => ClusterSelection::Leaf,
        },
        allow_single_cluster: false,
    };
    let r = cluster::hdbscan(&d, &params)?;
    let dir = out_path(out, "cluster");
    write_file(&dir.join("assignments.csv"), |w| r.assignment.write_csv(w))?;
    write_file(&dir.join("condensed_tree.csv"), |w| r.write_condensed_csv(w))?;
    let mut summary = r.summary(&params);
    summary["users_after_filter"] = json!(filtered.n_users());
    summary["percentile"] = json!(a.percentile);
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "stage=cluster event=done kept={} clusters={} noise={}",
        filtered.n_users(),
        r.assignment.n_clusters(),
        r.assignment.n_noise()
    );
    Ok(())
}

fn cmd_graph(a: &GraphArgs, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let m = IncidenceMatrix::load(&a.matrix)?;
    let assignment = read_assignments(&a.assignments)?;
    let level = match a.level {
        LevelArg::User => GraphLevel::User,
        LevelArg::Cluster => GraphLevel::Cluster,
    };
    let weighting = match a.weighting {
        WeightingArg::Binary => EdgeWeighting::Binary,
        WeightingArg::Counts => EdgeWeighting::Counts,
    };
    let members: Vec<String> = match level {
        GraphLevel::User => assignment.user_ids.clone(),
        GraphLevel::Cluster => assignment
            .user_ids
            .iter()
            .zip(&assignment.labels)
            .filter(|(_, l)| l.is_some())
            .map(|(u, _)| u.clone())
            .collect(),
    };
    let g = graph::co_retweet_graph(&m, &members, level, Some(&assignment), weighting)?;
    let lseed = stance_core::compose::derive_seed(seed.unwrap_or(0), &["louvain"]);
    let p = graph::louvain_restarts(&g, lseed, a.resolution, a.restarts)?;
    let path = out_path(out, "graph.graphml");
    write_file(&path, |w| g.write_graphml(w))?;
    write_file(&path.with_extension("edges.csv"), |w| g.write_edge_csv(w))?;
    write_file(&path.with_extension("communities.csv"), |w| p.write_csv(&g, w))?;
    log::info!(
        "stage=graph event=done nodes={} edges={} communities={} modularity={:.6} louvain_seed={lseed}",
        g.n_nodes(),
        g.edges.len(),
        p.n_communities(),
        p.modularity
    );
    Ok(())
}

fn cmd_report(r: &ReportCommand, out: &Option<PathBuf>) -> Result<()> {
    match r {
        ReportCommand::TopInfluencers {
            compose_dir,
            component,
            k,
        } => {
            let (h, _) = pipeline::load_hierarchy(compose_dir)?;
            let rankings = report::top_influencers_per_component(&h, report::parse_pc(component)?, *k)?;
            let path = out_path(out, "top_influencers.csv");
            write_file(&path, |w| report::write_rankings_csv(&rankings, w))
        }
        ReportCommand::ClusterSummary { assignments, matrix, k } => {
            let a = read_assignments(assignments)?;
            let loaded: Vec<(String, IncidenceMatrix)> = matrix
                .iter()
                .map(|p| {
                    let id = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    IncidenceMatrix::load(p).map(|m| (id, m))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<(String, &IncidenceMatrix)> = loaded.iter().map(|(s, m)| (s.clone(), m)).collect();
            let summary = report::cluster_summary(&a, &refs, *k)?;
            write_json(&out_path(out, "cluster_summary.json"), &summary)
        }
        ReportCommand::Pairplot {
            scores,
            assignments,
            drop_noise,
        } => {
            let s = ScoreMatrix::load_csv(scores, Provenance::Common)?;
            let a = read_assignments(assignments)?;
            let path = out_path(out, "pairplot.csv");
            write_file(&path, |w| report::export_pairplot(&s, &a, *drop_noise, w).map(|_| ()))
        }
        ReportCommand::Biplot {
            compose_dir,
            pc_x,
            pc_y,
        } => {
            let common = pipeline::load_common_space(compose_dir)?;
            let rows = report::export_biplot(&common, report::parse_pc(pc_x)?, report::parse_pc(pc_y)?)?;
            write_file(&out_path(out, "biplot.csv"), |w| report::write_biplot_csv(&rows, w))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    parallel::init_global_threads(cli.threads)?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, &cli.out),
        Command::Synth(a) => cmd_synth(a, cli.seed, &cli.out),
        Command::Compose(a) => cmd_run(a, cli.seed, &cli.out, Stage::Compose),
        Command::Cluster(a) => cmd_cluster(a, &cli.out),
        Command::Graph(a) => cmd_graph(a, cli.seed, &cli.out),
        Command::Report(r) => cmd_report(r, &cli.out),
        Command::Run(a) => cmd_run(a, cli.seed, &cli.out, Stage::Report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(&format!(": {text}"));
                }
                src = s.source();
            }
            log::error!("event=failed exit_code={} error={msg:?}", e.exit_code());
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
