//! Stage orchestration. Every stage writes its artifacts under its own
//! directory of the run directory and later stages read what they need
//! back from disk when started with `from_stage`, so runs can resume.
//!
//! Layout:
//! ```text
//! ingest/<sample>.jsonl   ingest/summary.json
//! matrix/<sample>.{mtx,rows,cols}   matrix/combined.{mtx,rows,cols}
//! compose/index.json  compose/windows/<sample>/window_<i>.model
//! compose/samples/<sample>.model  compose/common.model
//! compose/scores/{stacked,sample}_<sample>.csv  compose/scores/common.csv
//! compose/rotations.csv
//! cluster/{filtered_scores,assignments,condensed_tree}.csv  cluster/summary.json
//! graph/{graph.graphml,edges.csv,communities.csv,summary.json}
//! report/{top_influencers.csv,cluster_summary.json,pairplot.csv,biplot.csv}
//! manifest.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cluster::{self, ClusterAssignment};
use crate::compose::{self, CommonSpace, ModelHierarchy, PreparedSample, SampleModels, StanceSpace};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph;
use crate::ingest::{self, RetweetEvent};
use crate::matrix::{self, IncidenceMatrix};
use crate::pca::{PcaModel, Provenance, ScoreMatrix};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Matrix,
    Compose,
    Cluster,
    Graph,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Matrix,
        Stage::Compose,
        Stage::Cluster,
        Stage::Graph,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Matrix => "matrix",
            Stage::Compose => "compose",
            Stage::Cluster => "cluster",
            Stage::Graph => "graph",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub force: bool,
    pub from_stage: Stage,
    pub to_stage: Stage,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            from_stage: Stage::Ingest,
            to_stage: Stage::Report,
        }
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    write_with(path, |w| {
        w.write_all(format!("{text}\n").as_bytes())
            .map_err(|e| Error::io(path, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn dir_has_files(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

/// Files below `dir`, relative to `root`, sorted.
fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WindowEntry {
    index: usize,
    start: i64,
    end: i64,
    rows: usize,
    components: usize,
    model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleEntry {
    sample_id: String,
    windows: Vec<WindowEntry>,
    skipped_windows: Vec<usize>,
    stacked_users: usize,
    stacked_columns: usize,
    components: usize,
    variance_fraction: f64,
    model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComposeIndex {
    samples: Vec<SampleEntry>,
    matched_users: usize,
    common_components: usize,
    common_variance_fraction: f64,
    scree_k: Option<usize>,
    scree_warning: Option<String>,
}

/// Results kept in memory between stages of one invocation.
#[derive(Default)]
struct Carry {
    events: Option<Vec<(String, Vec<RetweetEvent>)>>,
    matrices: Option<Vec<(String, IncidenceMatrix)>>,
    combined: Option<IncidenceMatrix>,
    space: Option<StanceSpace>,
    assignment: Option<ClusterAssignment>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    carry: Carry,
    stages: BTreeMap<String, Value>,
}

impl<'a> Run<'a> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    fn events(&mut self) -> Result<&Vec<(String, Vec<RetweetEvent>)>> {
        if self.carry.events.is_none() {
            let dir = self.dir(Stage::Ingest);
            let mut all = Vec::new();
            for s in &self.cfg.samples {
                let path = dir.join(format!("{}.jsonl", s.sample_id));
                let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                let ev = ingest::read_events_jsonl(f).map_err(|e| e.in_stage("ingest", &path))?;
                all.push((s.sample_id.clone(), ev));
            }
            self.carry.events = Some(all);
        }
        Ok(self.carry.events.as_ref().expect("loaded above"))
    }

    fn matrices(&mut self) -> Result<&Vec<(String, IncidenceMatrix)>> {
        if self.carry.matrices.is_none() {
            let dir = self.dir(Stage::Matrix);
            let mut all = Vec::new();
            for s in &self.cfg.samples {
                let base = dir.join(&s.sample_id);
                let m = IncidenceMatrix::load(&base).map_err(|e| e.in_stage("matrix", &base))?;
                all.push((s.sample_id.clone(), m));
            }
            self.carry.matrices = Some(all);
        }
        Ok(self.carry.matrices.as_ref().expect("loaded above"))
    }

    fn combined(&mut self) -> Result<&IncidenceMatrix> {
        if self.carry.combined.is_none() {
            let base = self.dir(Stage::Matrix).join("combined");
            let m = IncidenceMatrix::load(&base).map_err(|e| e.in_stage("matrix", &base))?;
            self.carry.combined = Some(m);
        }
        Ok(self.carry.combined.as_ref().expect("loaded above"))
    }

    fn common_scores(&self) -> Result<ScoreMatrix> {
        if let Some(space) = &self.carry.space {
            return Ok(space.common.scores.clone());
        }
        let path = self.dir(Stage::Compose).join("scores").join("common.csv");
        ScoreMatrix::load_csv(&path, Provenance::Common).map_err(|e| e.in_stage("compose", &path))
    }

    fn assignment(&mut self) -> Result<ClusterAssignment> {
        if let Some(a) = &self.carry.assignment {
            return Ok(a.clone());
        }
        let path = self.dir(Stage::Cluster).join("assignments.csv");
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let a = ClusterAssignment::read_csv(f).map_err(|e| e.in_stage("cluster", &path))?;
        self.carry.assignment = Some(a.clone());
        Ok(a)
    }

    fn hierarchy(&self) -> Result<(ModelHierarchy, PcaModel)> {
        if let Some(space) = &self.carry.space {
            return Ok((space.hierarchy(), space.common.model.clone()));
        }
        load_hierarchy(&self.dir(Stage::Compose))
    }

    fn ingest(&mut self) -> Result<Value> {
        let cfg = self.cfg;
        let dir = self.dir(Stage::Ingest);
        let specs = cfg.sample_specs()?;
        let mut parsed = Vec::new();
        for (input, spec) in cfg.samples.iter().zip(&specs) {
            let outcome =
                ingest::parse_files(&input.paths, input.format, spec, cfg.ingest.error_limit).map_err(|e| {
                    let p = input.paths.first().cloned().unwrap_or_default();
                    e.in_stage("ingest", p)
                })?;
            log::info!(
                "stage=ingest event=parsed sample={} records={} malformed={} out_of_range={} self_retweets={}",
                spec.sample_id,
                outcome.records,
                outcome.malformed,
                outcome.out_of_range,
                outcome.self_retweets
            );
            parsed.push(outcome);
        }
        let active: Option<HashSet<String>> = match (&cfg.ingest.active_users, cfg.ingest.min_events) {
            (Some(path), _) => Some(ingest::read_active_users_file(path).map_err(|e| e.in_stage("ingest", path))?),
            (None, Some(n)) => {
                let all: Vec<RetweetEvent> = parsed.iter().flat_map(|o| o.events.iter().cloned()).collect();
                Some(ingest::derive_active_users(&all, n))
            }
            (None, None) => None,
        };
        let mut samples = Vec::new();
        let mut events = Vec::new();
        for (spec, outcome) in specs.iter().zip(parsed) {
            let kept = match &active {
                Some(set) => ingest::filter_persistent(&outcome.events, set)?,
                None => outcome.events,
            };
            let path = dir.join(format!("{}.jsonl", spec.sample_id));
            write_with(&path, |w| ingest::write_events_jsonl(w, &kept))?;
            let users: HashSet<&str> = kept.iter().map(|e| e.retweeter.as_str()).collect();
            samples.push(json!({
                "sample_id": spec.sample_id,
                "records": outcome.records,
                "malformed": outcome.malformed,
                "out_of_range": outcome.out_of_range,
                "self_retweets": outcome.self_retweets,
                "events": kept.len(),
                "retweeters": users.len(),
                "first_errors": outcome.errors,
            }));
            events.push((spec.sample_id.clone(), kept));
        }
        let summary = json!({
            "active_users": active.as_ref().map(|a| a.len()),
            "samples": samples,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.carry.events = Some(events);
        Ok(summary)
    }

    fn matrix(&mut self) -> Result<Value> {
        let fraction = self.cfg.matrix.influencer_fraction;
        let dir = self.dir(Stage::Matrix);
        let events = self.events()?.clone();
        let mut dims = Vec::new();
        let mut thresholded = Vec::new();
        for (sid, ev) in &events {
            let base = dir.join(sid);
            let full = matrix::build_incidence(ev).map_err(|e| e.in_stage("matrix", &base))?;
            let t = matrix::threshold_influencers(&full, fraction).map_err(|e| e.in_stage("matrix", &base))?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            t.save(&base)?;
            log::info!(
                "stage=matrix event=thresholded sample={sid} rows={} cols_before={} cols_after={} min_degree={}",
                t.n_rows(),
                full.n_cols(),
                t.n_cols(),
                matrix::min_influencer_degree(fraction, full.n_rows())
            );
            dims.push(json!({
                "sample_id": sid,
                "rows": full.n_rows(),
                "cols_before": full.n_cols(),
                "cols_after": t.n_cols(),
                "nnz": t.nnz(),
                "min_influencer_degree": matrix::min_influencer_degree(fraction, full.n_rows()),
            }));
            thresholded.push((sid.clone(), t));
        }
        let refs: Vec<&IncidenceMatrix> = thresholded.iter().map(|(_, m)| m).collect();
        let combined = matrix::combine(&refs)?;
        combined.save(&dir.join("combined"))?;
        let v = json!({
            "samples": dims,
            "combined": {"rows": combined.n_rows(), "cols": combined.n_cols(), "nnz": combined.nnz()},
        });
        self.carry.matrices = Some(thresholded);
        self.carry.combined = Some(combined);
        Ok(v)
    }

    fn compose(&mut self) -> Result<Value> {
        let cfg = self.cfg;
        let dir = self.dir(Stage::Compose);
        let specs = cfg.sample_specs()?;
        let events = self.events()?.clone();
        let matrices = self.matrices()?.clone();
        let mut prepared: Vec<PreparedSample> = Vec::new();
        for ((spec, (_, ev)), (_, m)) in specs.iter().zip(&events).zip(matrices) {
            prepared.push(compose::prepare_with_columns(
                ev,
                spec,
                m,
                cfg.ingest.window_seconds,
                cfg.ingest.step(),
            )?);
        }
        let space = compose::compose(&prepared, &cfg.compose_config()).map_err(|e| e.in_stage("compose", &dir))?;

        let scores_dir = dir.join("scores");
        let mut entries = Vec::new();
        for r in &space.samples {
            let mut windows = Vec::new();
            for w in &r.windows {
                let rel = format!("windows/{}/window_{:04}.model", r.sample_id, w.window.window_index);
                let p = dir.join(&rel);
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                w.model.save(&p)?;
                windows.push(WindowEntry {
                    index: w.window.window_index,
                    start: w.window.start,
                    end: w.window.end,
                    rows: w.matrix.n_rows(),
                    components: w.model.n_components(),
                    model: rel,
                });
            }
            let rel = format!("samples/{}.model", r.sample_id);
            let p = dir.join(&rel);
            fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(&dir, e))?;
            r.sample_model.save(&p)?;
            fs::create_dir_all(&scores_dir).map_err(|e| Error::io(&scores_dir, e))?;
            r.stacked
                .save_csv(&scores_dir.join(format!("stacked_{}.csv", r.sample_id)))?;
            r.sample_scores
                .save_csv(&scores_dir.join(format!("sample_{}.csv", r.sample_id)))?;
            entries.push(SampleEntry {
                sample_id: r.sample_id.clone(),
                windows,
                skipped_windows: r.skipped_windows.clone(),
                stacked_users: r.stacked.n_users(),
                stacked_columns: r.stacked.n_components(),
                components: r.sample_model.n_components(),
                variance_fraction: r.selection.fraction,
                model: rel,
            });
        }
        space.common.model.save(&dir.join("common.model"))?;
        space.common.scores.save_csv(&scores_dir.join("common.csv"))?;
        let rot_path = dir.join("rotations.csv");
        write_with(&rot_path, |w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["sample_pc", "common_pc", "loading"])?;
            let pcs = space.common.model.pc_labels();
            for r in &space.common.sample_pc_rotations {
                for (pc, l) in pcs.iter().zip(&r.loadings) {
                    wr.write_record([r.sample_pc.as_str(), pc.as_str(), &format!("{l:?}")])?;
                }
            }
            wr.flush().map_err(|e| Error::io(&rot_path, e))
        })?;
        let index = ComposeIndex {
            samples: entries,
            matched_users: space.matched.len(),
            common_components: space.common.model.n_components(),
            common_variance_fraction: space.common.model.explained_fraction(),
            scree_k: space.common.scree.as_ref().map(|s| s.k),
            scree_warning: space.common.scree.as_ref().and_then(|s| s.warning.clone()),
        };
        write_json(&dir.join("index.json"), &index)?;
        let v = serde_json::to_value(&index)?;
        self.carry.space = Some(space);
        Ok(v)
    }

    fn cluster(&mut self) -> Result<Value> {
        let opts = &self.cfg.cluster;
        let dir = self.dir(Stage::Cluster);
        let scores = self.common_scores()?;
        let filtered = cluster::percentile_filter(&scores, opts.percentile)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        filtered.save_csv(&dir.join("filtered_scores.csv"))?;
        let d = cluster::cosine_distances(&filtered, opts.float32).map_err(|e| e.in_stage("cluster", &dir))?;
        let params = opts.params();
        let result = cluster::hdbscan(&d, &params)?;
        write_with(&dir.join("assignments.csv"), |w| result.assignment.write_csv(w))?;
        write_with(&dir.join("condensed_tree.csv"), |w| result.write_condensed_csv(w))?;
        let mut summary = result.summary(&params);
        summary["users_in_common_space"] = json!(scores.n_users());
        summary["percentile"] = json!(opts.percentile);
        summary["users_after_filter"] = json!(filtered.n_users());
        write_json(&dir.join("summary.json"), &summary)?;
        log::info!(
            "stage=cluster event=done users={} kept={} clusters={} noise={}",
            scores.n_users(),
            filtered.n_users(),
            result.assignment.n_clusters(),
            result.assignment.n_noise()
        );
        self.carry.assignment = Some(result.assignment);
        Ok(summary)
    }

    fn graph(&mut self) -> Result<Value> {
        let opts = self.cfg.graph.clone();
        let seed = compose::derive_seed(self.cfg.seed, &["louvain"]);
        let dir = self.dir(Stage::Graph);
        let assignment = self.assignment()?;
        let members: Vec<String> = match opts.level {
            graph::GraphLevel::User => assignment.user_ids.clone(),
            graph::GraphLevel::Cluster => assignment
                .user_ids
                .iter()
                .zip(&assignment.labels)
                .filter(|(_, l)| l.is_some())
                .map(|(u, _)| u.clone())
                .collect(),
        };
        let combined = self.combined()?;
        let g = if members.is_empty() {
            log::warn!("stage=graph event=no_clustered_users");
            graph::WeightedGraph::new(Vec::new(), Vec::new())?
        } else {
            graph::co_retweet_graph(combined, &members, opts.level, Some(&assignment), opts.weighting)?
        };
        let partition = graph::louvain_restarts(&g, seed, opts.resolution, opts.louvain_restarts)?;
        write_with(&dir.join("graph.graphml"), |w| g.write_graphml(w))?;
        write_with(&dir.join("edges.csv"), |w| g.write_edge_csv(w))?;
        write_with(&dir.join("communities.csv"), |w| partition.write_csv(&g, w))?;
        let summary = json!({
            "level": opts.level,
            "weighting": opts.weighting,
            "nodes": g.n_nodes(),
            "edges": g.edges.len(),
            "total_weight": g.total_weight(),
            "louvain_seed": seed,
            "resolution": opts.resolution,
            "louvain_restarts": opts.louvain_restarts,
            "communities": partition.n_communities(),
            "modularity": partition.modularity,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn report(&mut self) -> Result<Value> {
        let opts = self.cfg.report.clone();
        let dir = self.dir(Stage::Report);
        let (hierarchy, common_model) = self.hierarchy()?;
        let mut rankings = Vec::new();
        for pc in 0..common_model.n_components() {
            rankings.extend(report::top_influencers_per_component(&hierarchy, pc, opts.top_k)?);
        }
        write_with(&dir.join("top_influencers.csv"), |w| {
            report::write_rankings_csv(&rankings, w)
        })?;

        let assignment = self.assignment()?;
        let matrices = self.matrices()?.clone();
        let refs: Vec<(String, &IncidenceMatrix)> = matrices.iter().map(|(s, m)| (s.clone(), m)).collect();
        let summary = report::cluster_summary(&assignment, &refs, opts.top_k)?;
        write_json(&dir.join("cluster_summary.json"), &summary)?;

        let scores = self.common_scores()?;
        let rows = write_pairplot(&dir.join("pairplot.csv"), &scores, &assignment, opts.drop_noise)?;

        let [x, y] = opts.biplot_pcs;
        let biplot_rows = if x.max(y) <= common_model.n_components() {
            let common = CommonSpace {
                user_ids: scores.user_ids.clone(),
                sample_pc_rotations: compose::rotations_from_model(&common_model)?,
                model: common_model.clone(),
                scores,
                scree: None,
            };
            let rows = report::export_biplot(&common, x - 1, y - 1)?;
            write_with(&dir.join("biplot.csv"), |w| report::write_biplot_csv(&rows, w))?;
            rows.len()
        } else {
            log::warn!(
                "stage=report event=biplot_skipped pcs={x},{y} available={}",
                common_model.n_components()
            );
            0
        };
        Ok(json!({
            "ranked_components": common_model.n_components(),
            "clusters": summary.len(),
            "pairplot_rows": rows,
            "biplot_rows": biplot_rows,
        }))
    }
}

/// Reads the model hierarchy written by the compose stage; also returns
/// the common model.
pub fn load_hierarchy(dir: &Path) -> Result<(ModelHierarchy, PcaModel)> {
    let index: ComposeIndex = read_json(&dir.join("index.json"))?;
    let load = |rel: &str| {
        let p = dir.join(rel);
        PcaModel::load(&p).map_err(|e| e.in_stage("compose", &p))
    };
    let mut samples = Vec::new();
    for s in &index.samples {
        samples.push(SampleModels {
            sample_id: s.sample_id.clone(),
            windows: s.windows.iter().map(|w| load(&w.model)).collect::<Result<_>>()?,
            sample_model: load(&s.model)?,
        });
    }
    let common = load("common.model")?;
    compose::validate_hierarchy(&ModelHierarchy {
        samples: samples.clone(),
        common: common.clone(),
    })?;
    Ok((
        ModelHierarchy {
            samples,
            common: common.clone(),
        },
        common,
    ))
}

/// Biplot inputs from a compose directory.
pub fn load_common_space(dir: &Path) -> Result<CommonSpace> {
    let model = PcaModel::load(&dir.join("common.model"))?;
    let scores = ScoreMatrix::load_csv(&dir.join("scores").join("common.csv"), Provenance::Common)?;
    Ok(CommonSpace {
        user_ids: scores.user_ids.clone(),
        sample_pc_rotations: compose::rotations_from_model(&model)?,
        model,
        scores,
        scree: None,
    })
}

fn write_pairplot(path: &Path, scores: &ScoreMatrix, a: &ClusterAssignment, drop_noise: bool) -> Result<usize> {
    let mut rows = 0;
    write_with(path, |w| {
        rows = report::export_pairplot(scores, a, drop_noise, w)?;
        Ok(())
    })?;
    Ok(rows)
}

/// Runs stages `from_stage..=to_stage` into `out` and writes
/// `manifest.json`. Returns the manifest.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<Value> {
    cfg.validate()?;
    if opts.from_stage > opts.to_stage {
        return Err(Error::Config(format!(
            "from stage {} comes after to stage {}",
            opts.from_stage, opts.to_stage
        )));
    }
    let selected: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| *s >= opts.from_stage && *s <= opts.to_stage)
        .collect();
    let manifest_path = out.join("manifest.json");
    let mut previous: Option<Value> = None;
    if manifest_path.exists() {
        previous = Some(read_json(&manifest_path)?);
    }
    for s in &selected {
        let d = out.join(s.name());
        if dir_has_files(&d) {
            if !opts.force {
                return Err(Error::Config(format!(
                    "{} already exists; rerun with --force to overwrite",
                    d.display()
                )));
            }
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut run = Run {
        cfg,
        out,
        carry: Carry::default(),
        stages: BTreeMap::new(),
    };
    if let Some(Value::Object(prev)) = previous.as_ref().and_then(|p| p.get("stages")) {
        for (k, v) in prev {
            if let Ok(st) = k.parse::<Stage>() {
                if st < opts.from_stage {
                    run.stages.insert(k.clone(), v.clone());
                }
            }
        }
    }
    for stage in selected {
        log::info!("stage={stage} event=start");
        let t0 = Instant::now();
        let dims = match stage {
            Stage::Ingest => run.ingest(),
            Stage::Matrix => run.matrix(),
            Stage::Compose => run.compose(),
            Stage::Cluster => run.cluster(),
            Stage::Graph => run.graph(),
            Stage::Report => run.report(),
        }
        .map_err(|e| match e {
            Error::Stage { .. } => e,
            other => other.in_stage(stage.name(), out.join(stage.name())),
        })?;
        let secs = t0.elapsed().as_secs_f64();
        log::info!("stage={stage} event=done seconds={secs:.3}");
        run.stages
            .insert(stage.name().to_string(), json!({"dimensions": dims, "seconds": secs}));
    }

    let effective = serde_json::to_value(cfg)?;
    let config_hash = hex::encode(Sha256::digest(serde_json::to_string(&effective)?.as_bytes()));
    let mut files = Vec::new();
    for s in Stage::ALL {
        list_files(out, &out.join(s.name()), &mut files)?;
    }
    let mut artifacts = BTreeMap::new();
    for f in files {
        artifacts.insert(f.to_string_lossy().replace('\\', "/"), file_sha256(&out.join(&f))?);
    }
    let manifest = json!({
        "tool": "stance",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": config_hash,
        "seed": cfg.seed,
        "threads": crate::parallel::current_threads(),
        "parallel": crate::parallel::is_parallel(),
        "effective_config": effective,
        "stages": run.stages,
        "artifacts": artifacts,
    });
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}
