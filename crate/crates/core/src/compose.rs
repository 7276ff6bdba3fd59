//! Window PCAs, per-sample PCA over stacked window scores, and the common
//! space over users matched across samples.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, RetweetEvent, SampleSpec, TimeWindow};
use crate::matrix::{self, IncidenceMatrix};
use crate::parallel;
use crate::pca::{self, DataMatrix, PcaModel, PcaOptions, Provenance, ScoreMatrix, ScreeSelection, VarianceSelection};

pub const DEFAULT_WINDOW_PCS: usize = 10;
pub const DEFAULT_VARIANCE_TARGET: f64 = 0.95;

/// How many common-space components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    /// Max-curvature elbow, never fewer than `min_components` and computed
    /// over at most `max_considered` leading eigenvalues.
    Scree {
        min_components: usize,
        max_considered: usize,
    },
    Fixed(usize),
}

impl Default for ComponentRule {
    fn default() -> Self {
        ComponentRule::Scree {
            min_components: 2,
            max_considered: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub window_max_components: usize,
    pub sample_variance_target: f64,
    pub common_components: ComponentRule,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        ComposeConfig {
            window_max_components: DEFAULT_WINDOW_PCS,
            sample_variance_target: DEFAULT_VARIANCE_TARGET,
            common_components: ComponentRule::default(),
            standardize: false,
            seed: 0,
        }
    }
}

/// Stable 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    // FNV-1a over the parts, then a splitmix64 finalizer mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One fitted window: its incidence matrix, model and scores.
#[derive(Debug, Clone)]
pub struct WindowFit {
    pub window: TimeWindow,
    pub matrix: IncidenceMatrix,
    pub model: PcaModel,
    pub scores: ScoreMatrix,
}

#[derive(Debug, Clone)]
pub struct SamplePipelineResult {
    pub sample_id: String,
    /// Non-degenerate windows in window order.
    pub windows: Vec<WindowFit>,
    pub skipped_windows: Vec<usize>,
    pub stacked: ScoreMatrix,
    pub sample_model: PcaModel,
    pub sample_scores: ScoreMatrix,
    pub selection: VarianceSelection,
}

/// Coordinates of one sample PC across the common PCs (a biplot arrow).
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    pub sample_id: String,
    pub sample_pc: String,
    pub loadings: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CommonSpace {
    pub user_ids: Vec<String>,
    pub model: PcaModel,
    pub scores: ScoreMatrix,
    pub sample_pc_rotations: Vec<Rotation>,
    pub scree: Option<ScreeSelection>,
}

/// Everything the hierarchy produced.
#[derive(Debug, Clone)]
pub struct StanceSpace {
    pub samples: Vec<SamplePipelineResult>,
    pub matched: Vec<String>,
    pub common: CommonSpace,
}

/// A sample's influencer-thresholded matrix and its window matrices.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub matrix: IncidenceMatrix,
    pub windows: Vec<(TimeWindow, IncidenceMatrix)>,
}

/// Thresholds the sample's influencers once, then builds each window's
/// matrix over the surviving influencer set. Window rows are the retweeters
/// with at least one event in the window.
pub fn prepare_sample(
    events: &[RetweetEvent],
    spec: &SampleSpec,
    influencer_fraction: f64,
    window_len: i64,
    step: i64,
) -> Result<PreparedSample> {
    let full = matrix::build_incidence(events)?;
    let thresholded = matrix::threshold_influencers(&full, influencer_fraction)?;
    prepare_with_columns(events, spec, thresholded, window_len, step)
}

/// Window matrices over the columns of an already thresholded sample matrix.
pub fn prepare_with_columns(
    events: &[RetweetEvent],
    spec: &SampleSpec,
    thresholded: IncidenceMatrix,
    window_len: i64,
    step: i64,
) -> Result<PreparedSample> {
    let cols = thresholded.col_ids().to_vec();
    let windows = ingest::partition_windows(events, spec, window_len, step)?;
    let built = parallel::map_slice(&windows, |w| {
        matrix::build_with_columns(&w.events, &cols).map(|m| (w.window.clone(), m))
    });
    Ok(PreparedSample {
        sample_id: spec.sample_id.clone(),
        matrix: thresholded,
        windows: built.into_iter().collect::<Result<_>>()?,
    })
}

/// Fits one PCA per window (in parallel), keeping at most `max_pcs`
/// components each. Windows with fewer than two retweeters or a constant
/// matrix are skipped; their indices are returned alongside.
pub fn window_stage(
    windows: &[(TimeWindow, IncidenceMatrix)],
    max_pcs: usize,
    seed: u64,
) -> Result<(Vec<WindowFit>, Vec<usize>)> {
    if max_pcs == 0 {
        return Err(Error::Config("window max components must be positive".into()));
    }
    let fits = parallel::map_slice(windows, |(tw, m)| -> Result<Option<WindowFit>> {
        if m.n_rows() < 2 || m.n_cols() == 0 {
            return Ok(None);
        }
        let k = max_pcs.min(m.n_rows() - 1).min(m.n_cols());
        let wseed = derive_seed(seed, &[&tw.sample_id, &tw.window_index.to_string()]);
        let model = match pca::fit_pca(m, &PcaOptions::new(k, wseed)) {
            Ok(model) => model,
            Err(Error::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let provenance = Provenance::Window {
            sample_id: tw.sample_id.clone(),
            window_index: tw.window_index,
        };
        let model = model.labeled(provenance, m.col_ids().to_vec())?;
        let scores = pca::transform(&model, m, m.row_ids().to_vec())?;
        Ok(Some(WindowFit {
            window: tw.clone(),
            matrix: m.clone(),
            model,
            scores,
        }))
    });
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (fit, (tw, _)) in fits.into_iter().zip(windows) {
        match fit? {
            Some(f) => kept.push(f),
            None => {
                log::warn!(
                    "stage=window event=skipped sample={} window={}",
                    tw.sample_id,
                    tw.window_index
                );
                skipped.push(tw.window_index);
            }
        }
    }
    if kept.is_empty() {
        let sample = windows.first().map(|w| w.0.sample_id.as_str()).unwrap_or("?");
        return Err(Error::Degenerate(format!(
            "every window of sample {sample} is degenerate"
        )));
    }
    Ok((kept, skipped))
}

/// Concatenates window scores column-wise over `universe`; users absent
/// from a window get zeros in that window's columns.
pub fn stack_scores(per_window: &[&ScoreMatrix], universe: &[String], provenance: Provenance) -> Result<ScoreMatrix> {
    let lookup: std::collections::HashMap<&str, usize> =
        universe.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    if lookup.len() != universe.len() {
        return Err(Error::Integrity("duplicate user in stacking universe".into()));
    }
    let total: usize = per_window.iter().map(|s| s.n_components()).sum();
    let mut out = DMatrix::zeros(universe.len(), total);
    let mut labels = Vec::with_capacity(total);
    let mut offset = 0;
    for s in per_window {
        for (i, u) in s.user_ids.iter().enumerate() {
            let row = *lookup
                .get(u.as_str())
                .ok_or_else(|| Error::Integrity(format!("user {u:?} missing from stacking universe")))?;
            for j in 0..s.n_components() {
                out[(row, offset + j)] = s.scores[(i, j)];
            }
        }
        labels.extend(s.pc_labels.iter().cloned());
        offset += s.n_components();
    }
    ScoreMatrix::new(universe.to_vec(), out, provenance, labels)
}

/// PCA over a sample's stacked window scores, keeping the components that
/// cover `target` of the variance.
pub fn sample_stage(
    stacked: &ScoreMatrix,
    sample_id: &str,
    target: f64,
    seed: u64,
) -> Result<(PcaModel, ScoreMatrix, VarianceSelection)> {
    if stacked.n_users() < 2 {
        return Err(Error::Degenerate(format!(
            "sample {sample_id} has fewer than two users"
        )));
    }
    let (model, sel) = pca::fit_to_variance(&stacked.scores, target, seed)?;
    if sel.shortfall {
        log::warn!(
            "stage=sample event=variance_shortfall sample={sample_id} fraction={:.6}",
            sel.fraction
        );
    }
    let model = model.labeled(
        Provenance::Sample {
            sample_id: sample_id.to_string(),
        },
        stacked.pc_labels.clone(),
    )?;
    let scores = pca::transform(&model, &stacked.scores, stacked.user_ids.clone())?;
    Ok((model, scores, sel))
}

/// Window and sample stages for one prepared sample.
pub fn run_sample(prepared: &PreparedSample, cfg: &ComposeConfig) -> Result<SamplePipelineResult> {
    let sid = &prepared.sample_id;
    let (windows, skipped) = window_stage(
        &prepared.windows,
        cfg.window_max_components,
        derive_seed(cfg.seed, &["window", sid]),
    )?;
    let universe: Vec<String> = windows
        .iter()
        .flat_map(|w| w.scores.user_ids.iter().map(String::as_str))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let per_window: Vec<&ScoreMatrix> = windows.iter().map(|w| &w.scores).collect();
    let stacked = stack_scores(&per_window, &universe, Provenance::Sample { sample_id: sid.clone() })?;
    let (sample_model, sample_scores, selection) = sample_stage(
        &stacked,
        sid,
        cfg.sample_variance_target,
        derive_seed(cfg.seed, &["sample", sid]),
    )?;
    log::info!(
        "stage=sample event=fitted sample={sid} windows={} skipped={} stacked_cols={} pcs={} fraction={:.4}",
        windows.len(),
        skipped.len(),
        stacked.n_components(),
        sample_model.n_components(),
        selection.fraction
    );
    Ok(SamplePipelineResult {
        sample_id: sid.clone(),
        windows,
        skipped_windows: skipped,
        stacked,
        sample_model,
        sample_scores,
        selection,
    })
}

/// Users present in every sample's score table, sorted.
pub fn match_users(results: &[SamplePipelineResult]) -> Result<Vec<String>> {
    let sets: Vec<&[String]> = results.iter().map(|r| r.sample_scores.user_ids.as_slice()).collect();
    match_user_sets(&sets)
}

pub fn match_user_sets(sets: &[&[String]]) -> Result<Vec<String>> {
    if sets.len() < 2 {
        return Err(Error::Config("matching users needs at least two samples".into()));
    }
    let mut common: BTreeSet<&str> = sets[0].iter().map(String::as_str).collect();
    for s in &sets[1..] {
        let other: BTreeSet<&str> = s.iter().map(String::as_str).collect();
        common = common.intersection(&other).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Empty("no user appears in every sample".into()));
    }
    Ok(common.into_iter().map(str::to_string).collect())
}

/// PCA over matched users' concatenated sample scores.
pub fn common_stage(
    results: &[SamplePipelineResult],
    matched: &[String],
    rule: ComponentRule,
    standardize: bool,
    seed: u64,
) -> Result<CommonSpace> {
    if matched.is_empty() {
        return Err(Error::Empty("no matched users".into()));
    }
    let parts: Vec<ScoreMatrix> = results
        .iter()
        .map(|r| r.sample_scores.select_users(matched))
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.n_components()).sum();
    let mut data = DMatrix::zeros(matched.len(), total);
    let mut labels = Vec::with_capacity(total);
    let mut sample_of = Vec::with_capacity(total);
    let mut offset = 0;
    for (p, r) in parts.iter().zip(results) {
        data.view_mut((0, offset), (matched.len(), p.n_components()))
            .copy_from(&p.scores);
        labels.extend(p.pc_labels.iter().cloned());
        sample_of.extend(std::iter::repeat_n(r.sample_id.clone(), p.n_components()));
        offset += p.n_components();
    }
    let cap = matched.len().saturating_sub(1).min(total);
    if cap == 0 {
        return Err(Error::Degenerate(
            "common space needs at least two matched users".into(),
        ));
    }
    let fit = |k: usize| -> Result<PcaModel> {
        let opts = PcaOptions::new(k, seed);
        if standardize {
            pca::fit_pca_standardized(&data, &opts)
        } else {
            pca::fit_pca(&data, &opts)
        }
    };
    let (model, scree) = match rule {
        ComponentRule::Fixed(k) => {
            if k == 0 || k > cap {
                return Err(Error::Config(format!("fixed common components {k} outside [1, {cap}]")));
            }
            (fit(k)?, None)
        }
        ComponentRule::Scree {
            min_components,
            max_considered,
        } => {
            let mut model = fit(max_considered.max(3).min(cap))?;
            let sel = pca::scree_select(&model.variances);
            if let Some(w) = &sel.warning {
                log::warn!("stage=common event=scree_warning msg={w:?}");
            }
            let k = sel.k.max(min_components).min(model.n_components());
            model.truncate(k);
            (model, Some(sel))
        }
    };
    let model = model.labeled(Provenance::Common, labels.clone())?;
    let scores = pca::transform(&model, &data, matched.to_vec())?;
    let sample_pc_rotations = labels
        .into_iter()
        .zip(sample_of)
        .enumerate()
        .map(|(i, (label, sample_id))| Rotation {
            sample_id,
            sample_pc: label,
            loadings: model.loadings.row(i).iter().copied().collect(),
        })
        .collect();
    Ok(CommonSpace {
        user_ids: matched.to_vec(),
        model,
        scores,
        sample_pc_rotations,
        scree,
    })
}

/// Biplot arrows of a common model whose inputs are sample PCs labelled
/// `sample:<id>/PC<k>`.
pub fn rotations_from_model(model: &PcaModel) -> Result<Vec<Rotation>> {
    model
        .col_labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let prov = label
                .rsplit_once('/')
                .map(|(p, _)| p)
                .ok_or_else(|| Error::Parse(format!("bad sample PC label {label:?}")))?;
            let sample_id = match prov.parse::<Provenance>()? {
                Provenance::Sample { sample_id } => sample_id,
                _ => return Err(Error::Parse(format!("{label:?} is not a sample PC"))),
            };
            Ok(Rotation {
                sample_id,
                sample_pc: label.clone(),
                loadings: model.loadings.row(i).iter().copied().collect(),
            })
        })
        .collect()
}

/// Full hierarchy over prepared samples.
pub fn compose(samples: &[PreparedSample], cfg: &ComposeConfig) -> Result<StanceSpace> {
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        results.push(run_sample(s, cfg)?);
    }
    let matched = match_users(&results)?;
    let common = common_stage(
        &results,
        &matched,
        cfg.common_components,
        cfg.standardize,
        derive_seed(cfg.seed, &["common"]),
    )?;
    log::info!(
        "stage=common event=fitted matched={} cols={} pcs={} fraction={:.4}",
        matched.len(),
        common.model.n_cols(),
        common.model.n_components(),
        common.model.explained_fraction()
    );
    Ok(StanceSpace {
        samples: results,
        matched,
        common,
    })
}

fn dense_row(m: &IncidenceMatrix, r: usize) -> Vec<f64> {
    let mut x = vec![0.0; m.n_cols()];
    for &c in m.row(r) {
        x[c] = 1.0;
    }
    x
}

/// A sample's score vector for `user`, recomposed from the user's raw
/// binary window rows through the stored window and sample models.
pub fn sample_contribution(sample: &SamplePipelineResult, user: &str) -> Result<DVector<f64>> {
    let mut stacked = Vec::with_capacity(sample.sample_model.n_cols());
    for w in &sample.windows {
        match w.matrix.row_index(user) {
            Some(r) => {
                let s = w.model.transform_row(&dense_row(&w.matrix, r))?;
                stacked.extend(s.iter().copied());
            }
            None => stacked.extend(std::iter::repeat_n(0.0, w.model.n_components())),
        }
    }
    sample.sample_model.transform_row(&stacked)
}

/// Recomputes `user`'s common-space scores by applying every stored affine
/// map in turn to the raw incidence rows.
pub fn end_to_end_linear_check(space: &StanceSpace, user: &str) -> Result<DVector<f64>> {
    if space.common.scores.index_of(user).is_none() {
        return Err(Error::Integrity(format!("user {user:?} is not a matched user")));
    }
    let mut concat = Vec::with_capacity(space.common.model.n_cols());
    for s in &space.samples {
        concat.extend(sample_contribution(s, user)?.iter().copied());
    }
    space.common.model.transform_row(&concat)
}

/// Fraction of structurally nonzero entries in a stacked matrix's window
/// blocks, i.e. the share of (user, window) pairs where the user was active.
pub fn stacked_membership_fraction(sample: &SamplePipelineResult) -> f64 {
    let users = sample.stacked.n_users();
    let present: usize = sample.windows.iter().map(|w| w.scores.n_users()).sum();
    present as f64 / (users * sample.windows.len()) as f64
}

impl StanceSpace {
    /// The models alone, enough to compose influencer weights.
    pub fn hierarchy(&self) -> ModelHierarchy {
        ModelHierarchy {
            samples: self
                .samples
                .iter()
                .map(|s| SampleModels {
                    sample_id: s.sample_id.clone(),
                    windows: s.windows.iter().map(|w| w.model.clone()).collect(),
                    sample_model: s.sample_model.clone(),
                })
                .collect(),
            common: self.common.model.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleModels {
    pub sample_id: String,
    pub windows: Vec<PcaModel>,
    pub sample_model: PcaModel,
}

/// The stored affine maps of a composed run, without data.
#[derive(Debug, Clone)]
pub struct ModelHierarchy {
    pub samples: Vec<SampleModels>,
    pub common: PcaModel,
}

impl ModelHierarchy {
    /// Net linear weight of every original influencer column on common PC
    /// `pc` (0-based), per sample: the product of window, sample and common
    /// loadings, summed over windows that share the influencer column.
    pub fn composed_weights(&self, pc: usize) -> Result<Vec<(String, Vec<(String, f64)>)>> {
        if pc >= self.common.n_components() {
            return Err(Error::Config(format!(
                "common PC{} does not exist ({} retained)",
                pc + 1,
                self.common.n_components()
            )));
        }
        let common_l = self.common.effective_loadings();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let k_s = s.sample_model.n_components();
            let common_block = common_l.view((offset, pc), (k_s, 1)).into_owned();
            offset += k_s;
            // direction in the stacked-window space
            let stacked_dir = s.sample_model.effective_loadings() * common_block;
            let mut weights: Vec<(String, f64)> = Vec::new();
            let mut index: std::collections::HashMap<String, usize> = Default::default();
            let mut row = 0;
            for w in &s.windows {
                let k_w = w.n_components();
                let dir = stacked_dir.rows(row, k_w).into_owned();
                row += k_w;
                let infl = w.effective_loadings() * dir;
                for (j, label) in w.col_labels.iter().enumerate() {
                    let slot = *index.entry(label.clone()).or_insert_with(|| {
                        weights.push((label.clone(), 0.0));
                        weights.len() - 1
                    });
                    weights[slot].1 += infl[(j, 0)];
                }
            }
            if row != s.sample_model.n_cols() {
                return Err(Error::Shape(format!(
                    "sample {} model has {} inputs, windows supply {row}",
                    s.sample_id,
                    s.sample_model.n_cols()
                )));
            }
            out.push((s.sample_id.clone(), weights));
        }
        if offset != self.common.n_cols() {
            return Err(Error::Shape(format!(
                "common model has {} inputs, samples supply {offset}",
                self.common.n_cols()
            )));
        }
        Ok(out)
    }
}

/// Checks that the models chain: window PC labels are the sample model's
/// inputs and sample PC labels are the common model's inputs.
pub fn validate_hierarchy(h: &ModelHierarchy) -> Result<()> {
    for s in &h.samples {
        let expected: Vec<String> = s.windows.iter().flat_map(|w| w.pc_labels()).collect();
        if expected != s.sample_model.col_labels {
            return Err(Error::Integrity(format!(
                "window models of sample {} do not match the sample model inputs",
                s.sample_id
            )));
        }
    }
    let expected: Vec<String> = h.samples.iter().flat_map(|s| s.sample_model.pc_labels()).collect();
    if expected != h.common.col_labels {
        return Err(Error::Integrity(
            "sample models do not match the common model inputs".into(),
        ));
    }
    Ok(())
}

/// Variance of each column of a dense matrix (denominator `n - 1`).
pub fn column_variances(m: &DMatrix<f64>) -> Vec<f64> {
    let means = m.col_means();
    m.col_variances(&means)
}
