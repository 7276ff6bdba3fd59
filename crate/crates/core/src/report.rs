//! Interpretive tables: influencer rankings, cluster evidence, pair-plot
//! and biplot exports. Nothing here labels clusters; that is left to the
//! reader.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::cluster::ClusterAssignment;
use crate::compose::{CommonSpace, ModelHierarchy};
use crate::error::{Error, Result};
use crate::matrix::IncidenceMatrix;
use crate::pca::ScoreMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedInfluencer {
    pub rank: usize,
    pub influencer: String,
    /// Signed net weight on the common PC.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRanking {
    pub sample_id: String,
    pub component: String,
    pub influencers: Vec<RankedInfluencer>,
}

/// Sorts by descending |weight|, then influencer id.
fn rank(mut weights: Vec<(String, f64)>, k: usize) -> Vec<RankedInfluencer> {
    weights.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    weights
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (influencer, weight))| RankedInfluencer {
            rank: i + 1,
            influencer,
            weight,
        })
        .collect()
}

/// Top `k` influencers per sample by the magnitude of their composed
/// weight on common PC `pc` (0-based).
pub fn top_influencers_per_component(h: &ModelHierarchy, pc: usize, k: usize) -> Result<Vec<SampleRanking>> {
    let component = h
        .common
        .pc_labels()
        .get(pc)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown common component PC{}", pc + 1)))?;
    Ok(h.composed_weights(pc)?
        .into_iter()
        .map(|(sample_id, w)| SampleRanking {
            sample_id,
            component: component.clone(),
            influencers: rank(w, k),
        })
        .collect())
}

/// Parses `PC3`, `common/PC3` or `3` into a 0-based index.
pub fn parse_pc(s: &str) -> Result<usize> {
    let t = s.rsplit('/').next().unwrap_or(s);
    let t = t.strip_prefix("PC").unwrap_or(t);
    match t.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k - 1),
        _ => Err(Error::Config(format!("bad component id {s:?}"))),
    }
}

pub fn write_rankings_csv<W: Write>(rankings: &[SampleRanking], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["component", "sample", "rank", "influencer", "weight", "sign"])?;
    for r in rankings {
        for e in &r.influencers {
            wr.write_record([
                r.component.as_str(),
                r.sample_id.as_str(),
                &e.rank.to_string(),
                e.influencer.as_str(),
                &format!("{:?}", e.weight),
                if e.weight < 0.0 { "-" } else { "+" },
            ])?;
        }
    }
    wr.flush().map_err(|e| Error::io("<rankings>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluencerCount {
    pub influencer: String,
    /// Cluster members who retweeted the influencer at least once.
    pub retweeters: usize,
    /// Their retweets of the influencer.
    pub retweets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleClusterSummary {
    pub sample_id: String,
    pub active_members: usize,
    /// Share of the sample's retweets made by the cluster.
    pub activity_share: f64,
    pub top_influencers: Vec<InfluencerCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub samples: Vec<SampleClusterSummary>,
}

/// Per-cluster evidence table: size and, per sample, the most retweeted
/// influencers among members plus the cluster's share of activity.
pub fn cluster_summary(
    assignment: &ClusterAssignment,
    matrices: &[(String, &IncidenceMatrix)],
    k: usize,
) -> Result<Vec<ClusterSummary>> {
    for u in &assignment.user_ids {
        if !matrices.iter().any(|(_, m)| m.row_index(u).is_some()) {
            return Err(Error::Shape(format!("user {u:?} is in no sample matrix")));
        }
    }
    let n_clusters = assignment.n_clusters();
    let mut out: Vec<ClusterSummary> = (0..n_clusters)
        .map(|c| ClusterSummary {
            cluster: c,
            size: assignment.labels.iter().filter(|l| **l == Some(c)).count(),
            samples: Vec::new(),
        })
        .collect();
    for (sample_id, m) in matrices {
        let total: u64 = m.triples().map(|t| t.2 as u64).sum();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
        for (u, l) in assignment.user_ids.iter().zip(&assignment.labels) {
            if let (Some(c), Some(r)) = (l, m.row_index(u)) {
                members[*c].push(r);
            }
        }
        for (c, rows) in members.iter().enumerate() {
            let mut per: HashMap<usize, (usize, u64)> = HashMap::new();
            let mut activity = 0u64;
            for &r in rows {
                for (&col, &cnt) in m.row(r).iter().zip(m.row_counts(r)) {
                    let e = per.entry(col).or_default();
                    e.0 += 1;
                    e.1 += cnt as u64;
                    activity += cnt as u64;
                }
            }
            let mut top: Vec<InfluencerCount> = per
                .into_iter()
                .map(|(col, (retweeters, retweets))| InfluencerCount {
                    influencer: m.col_ids()[col].clone(),
                    retweeters,
                    retweets,
                })
                .collect();
            top.sort_by(|a, b| {
                b.retweeters
                    .cmp(&a.retweeters)
                    .then(b.retweets.cmp(&a.retweets))
                    .then_with(|| a.influencer.cmp(&b.influencer))
            });
            top.truncate(k);
            out[c].samples.push(SampleClusterSummary {
                sample_id: sample_id.clone(),
                active_members: rows.len(),
                activity_share: if total > 0 { activity as f64 / total as f64 } else { 0.0 },
                top_influencers: top,
            });
        }
    }
    Ok(out)
}

/// `user_id,cluster,PC1..PCk` for every user in the assignment.
pub fn export_pairplot<W: Write>(
    scores: &ScoreMatrix,
    assignment: &ClusterAssignment,
    drop_noise: bool,
    w: W,
) -> Result<usize> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["user_id".to_string(), "cluster".to_string()];
    header.extend((1..=scores.n_components()).map(|k| format!("PC{k}")));
    wr.write_record(&header)?;
    let mut rows = 0;
    for (u, l) in assignment.user_ids.iter().zip(&assignment.labels) {
        if drop_noise && l.is_none() {
            continue;
        }
        let row = scores
            .row_of(u)
            .ok_or_else(|| Error::Shape(format!("user {u:?} has no scores")))?;
        let mut rec = vec![u.clone(), l.map_or("noise".to_string(), |c| c.to_string())];
        rec.extend(row.iter().map(|x| format!("{x:?}")));
        wr.write_record(&rec)?;
        rows += 1;
    }
    wr.flush().map_err(|e| Error::io("<pairplot>", e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiplotRow {
    pub sample: String,
    pub sample_pc: String,
    pub x_loading: f64,
    pub y_loading: f64,
}

/// One arrow per sample PC: its common-model loadings on `pc_x`, `pc_y`.
pub fn export_biplot(common: &CommonSpace, pc_x: usize, pc_y: usize) -> Result<Vec<BiplotRow>> {
    let k = common.model.n_components();
    for pc in [pc_x, pc_y] {
        if pc >= k {
            return Err(Error::Config(format!(
                "unknown common component PC{} ({k} retained)",
                pc + 1
            )));
        }
    }
    Ok(common
        .sample_pc_rotations
        .iter()
        .map(|r| BiplotRow {
            sample: r.sample_id.clone(),
            sample_pc: r.sample_pc.clone(),
            x_loading: r.loadings[pc_x],
            y_loading: r.loadings[pc_y],
        })
        .collect())
}

pub fn write_biplot_csv<W: Write>(rows: &[BiplotRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sample", "sample_pc", "x_loading", "y_loading"])?;
    for r in rows {
        wr.write_record([
            r.sample.as_str(),
            r.sample_pc.as_str(),
            &format!("{:?}", r.x_loading),
            &format!("{:?}", r.y_loading),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<biplot>", e))?;
    Ok(())
}
