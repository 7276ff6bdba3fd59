//! JSON run configuration. Every section is optional except `samples`;
//! omitted fields take the defaults below, and the fully resolved document
//! is what the manifest records.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSelection, HdbscanParams, DEFAULT_MIN_CLUSTER_SIZE, DEFAULT_PERCENTILE};
use crate::compose::{ComponentRule, ComposeConfig, DEFAULT_VARIANCE_TARGET, DEFAULT_WINDOW_PCS};
use crate::error::{Error, Result};
use crate::graph::{EdgeWeighting, GraphLevel, DEFAULT_LOUVAIN_RESTARTS};
use crate::ingest::{self, EventFormat, SampleSpec, DEFAULT_ERROR_LIMIT, DEFAULT_WINDOW_LEN};
use crate::matrix::DEFAULT_INFLUENCER_FRACTION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleInput {
    pub sample_id: String,
    pub start: String,
    pub end: String,
    pub paths: Vec<PathBuf>,
    #[serde(default = "default_format")]
    pub format: EventFormat,
}

fn default_format() -> EventFormat {
    EventFormat::Jsonl
}

impl SampleInput {
    pub fn spec(&self) -> Result<SampleSpec> {
        let mut s = SampleSpec::new(
            self.sample_id.clone(),
            ingest::parse_iso_date(&self.start)?,
            ingest::parse_iso_date(&self.end)?,
        )?;
        s.source_paths = self.paths.clone();
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub active_users: Option<PathBuf>,
    /// Derive the active set from the corpus: users with at least this many
    /// events across all samples. Ignored when `active_users` is set.
    pub min_events: Option<usize>,
    pub error_limit: f64,
    pub window_seconds: i64,
    /// Defaults to `window_seconds` (non-overlapping windows).
    pub window_step_seconds: Option<i64>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            active_users: None,
            min_events: None,
            error_limit: DEFAULT_ERROR_LIMIT,
            window_seconds: DEFAULT_WINDOW_LEN,
            window_step_seconds: None,
        }
    }
}

impl IngestOptions {
    pub fn step(&self) -> i64 {
        self.window_step_seconds.unwrap_or(self.window_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixOptions {
    pub influencer_fraction: f64,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            influencer_fraction: DEFAULT_INFLUENCER_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeOptions {
    pub window_max_components: usize,
    pub sample_variance_target: f64,
    pub common_components: ComponentRule,
    pub standardize: bool,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            window_max_components: DEFAULT_WINDOW_PCS,
            sample_variance_target: DEFAULT_VARIANCE_TARGET,
            common_components: ComponentRule::default(),
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    pub percentile: f64,
    pub min_cluster_size: usize,
    pub min_samples: Option<usize>,
    pub selection: ClusterSelection,
    pub float32: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            percentile: DEFAULT_PERCENTILE,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            min_samples: None,
            selection: ClusterSelection::ExcessOfMass,
            float32: false,
        }
    }
}

impl ClusterOptions {
    pub fn params(&self) -> HdbscanParams {
        HdbscanParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
            selection: self.selection,
            allow_single_cluster: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    pub level: GraphLevel,
    pub weighting: EdgeWeighting,
    pub resolution: f64,
    pub louvain_restarts: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            level: GraphLevel::Cluster,
            weighting: EdgeWeighting::Binary,
            resolution: 1.0,
            louvain_restarts: DEFAULT_LOUVAIN_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub top_k: usize,
    /// 1-based common PCs for the biplot.
    pub biplot_pcs: [usize; 2],
    pub drop_noise: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            top_k: 10,
            biplot_pcs: [1, 2],
            drop_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub samples: Vec<SampleInput>,
    #[serde(default)]
    pub ingest: IngestOptions,
    #[serde(default)]
    pub matrix: MatrixOptions,
    #[serde(default)]
    pub compose: ComposeOptions,
    #[serde(default)]
    pub cluster: ClusterOptions,
    #[serde(default)]
    pub graph: GraphOptions,
    #[serde(default)]
    pub report: ReportOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Reads, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.samples {
            s.paths.iter_mut().for_each(fix);
        }
        if let Some(p) = self.ingest.active_users.as_mut() {
            fix(p);
        }
    }

    pub fn compose_config(&self) -> ComposeConfig {
        ComposeConfig {
            window_max_components: self.compose.window_max_components,
            sample_variance_target: self.compose.sample_variance_target,
            common_components: self.compose.common_components,
            standardize: self.compose.standardize,
            seed: self.seed,
        }
    }

    pub fn sample_specs(&self) -> Result<Vec<SampleSpec>> {
        let specs: Vec<SampleSpec> = self.samples.iter().map(SampleInput::spec).collect::<Result<_>>()?;
        ingest::validate_samples(&specs)?;
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples.len() < 2 {
            return bad("at least two samples are needed to build a common space".into());
        }
        for s in &self.samples {
            if s.paths.is_empty() {
                return bad(format!("sample {:?} lists no input files", s.sample_id));
            }
        }
        self.sample_specs()?;
        let i = &self.ingest;
        if !(0.0..=1.0).contains(&i.error_limit) {
            return bad(format!("error_limit {} outside [0, 1]", i.error_limit));
        }
        if i.window_seconds <= 0 {
            return bad("window_seconds must be positive".into());
        }
        let step = i.step();
        if step <= 0 || step > i.window_seconds {
            return bad(format!(
                "window step {step} must lie in (0, window length {}]",
                i.window_seconds
            ));
        }
        let f = self.matrix.influencer_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("influencer_fraction {f} outside (0, 1)"));
        }
        let c = &self.compose;
        if c.window_max_components == 0 {
            return bad("window_max_components must be positive".into());
        }
        if !(c.sample_variance_target > 0.0 && c.sample_variance_target <= 1.0) {
            return bad(format!(
                "sample_variance_target {} outside (0, 1]",
                c.sample_variance_target
            ));
        }
        match c.common_components {
            ComponentRule::Fixed(0) => return bad("fixed common components must be positive".into()),
            ComponentRule::Scree {
                min_components,
                max_considered,
            } if min_components == 0 || max_considered < min_components => {
                return bad("scree needs 0 < min_components <= max_considered".into())
            }
            _ => {}
        }
        let k = &self.cluster;
        if !(0.0..100.0).contains(&k.percentile) {
            return bad(format!("percentile {} outside [0, 100)", k.percentile));
        }
        if k.min_cluster_size < 2 || k.min_samples == Some(0) {
            return bad("min_cluster_size must be >= 2 and min_samples positive".into());
        }
        if !(self.graph.resolution > 0.0) {
            return bad("graph resolution must be positive".into());
        }
        if self.graph.louvain_restarts == 0 {
            return bad("louvain_restarts must be positive".into());
        }
        let r = &self.report;
        if r.top_k == 0 || r.biplot_pcs.contains(&0) {
            return bad("report top_k and biplot PCs must be positive".into());
        }
        Ok(())
    }
}
