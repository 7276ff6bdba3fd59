//! Planted-stance retweet corpora with known ground truth, plus the
//! agreement metrics used to score recovery.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::compose::derive_seed;
use crate::error::{Error, Result};
use crate::ingest::{self, RetweetEvent};
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub sample_id: String,
    /// `YYYY-MM-DD` or RFC 3339.
    pub start: String,
    pub end: String,
}

/// Probability that a user of a given stance retweets a given influencer
/// of a given block, indexed `[stance][block]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Affinity {
    Contrast { in_block: f64, out_block: f64 },
    Matrix(Vec<Vec<f64>>),
    PerSample(BTreeMap<String, Vec<Vec<f64>>>),
}

impl Affinity {
    pub fn for_sample(&self, sample_id: &str, k: usize) -> Result<Vec<Vec<f64>>> {
        let m = match self {
            Affinity::Contrast { in_block, out_block } => (0..k)
                .map(|s| (0..k).map(|b| if s == b { *in_block } else { *out_block }).collect())
                .collect(),
            Affinity::Matrix(m) => m.clone(),
            Affinity::PerSample(map) => map
                .get(sample_id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no affinity for sample {sample_id:?}")))?,
        };
        if m.len() != k || m.iter().any(|r| r.len() != k) {
            return Err(Error::Config(format!("affinity for {sample_id:?} must be {k}x{k}")));
        }
        if m.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("affinity probabilities must lie in [0, 1]".into()));
        }
        Ok(m)
    }
}

fn default_sigma() -> f64 {
    1.0
}

fn default_consistency() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_influencers_per_sample: usize,
    pub samples: Vec<SynthSample>,
    pub k_stances: usize,
    pub stance_mixture: Vec<f64>,
    pub affinity: Affinity,
    pub cross_sample_participation: f64,
    /// Mean of the log-normal number of retweets per active user.
    pub events_per_active_user: f64,
    #[serde(default = "default_sigma")]
    pub activity_sigma: f64,
    #[serde(default = "default_consistency")]
    pub stance_consistency: f64,
}

impl PlantedConfig {
    /// Balanced two-block corpus used throughout the tests.
    pub fn two_stance(seed: u64, n_users: usize) -> Self {
        PlantedConfig {
            seed,
            n_users,
            n_influencers_per_sample: 100,
            samples: ["s1", "s2", "s3"]
                .iter()
                .enumerate()
                .map(|(i, s)| SynthSample {
                    sample_id: s.to_string(),
                    start: format!("2021-0{}-01", i + 1),
                    end: format!("2021-0{}-28", i + 1),
                })
                .collect(),
            k_stances: 2,
            stance_mixture: vec![0.5, 0.5],
            affinity: Affinity::Contrast {
                in_block: 0.3,
                out_block: 0.005,
            },
            cross_sample_participation: 0.6,
            events_per_active_user: 40.0,
            activity_sigma: 1.0,
            stance_consistency: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.k_stances == 0 || self.samples.is_empty() {
            return bad("n_users, k_stances and samples must be non-empty".into());
        }
        if self.n_influencers_per_sample < self.k_stances {
            return bad("need at least one influencer per block".into());
        }
        if self.stance_mixture.len() != self.k_stances {
            return bad(format!("stance_mixture needs {} entries", self.k_stances));
        }
        if self.stance_mixture.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.stance_mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("stance_mixture must be probabilities summing to 1".into());
        }
        for p in [self.cross_sample_participation, self.stance_consistency] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.events_per_active_user > 0.0) || !(self.activity_sigma >= 0.0) {
            return bad("activity parameters must be positive".into());
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.sample_id) {
                return bad(format!("duplicate sample {:?}", s.sample_id));
            }
            let (a, b) = (ingest::parse_iso_date(&s.start)?, ingest::parse_iso_date(&s.end)?);
            if a >= b {
                return bad(format!("sample {:?} has an empty date range", s.sample_id));
            }
            self.affinity.for_sample(&s.sample_id, self.k_stances)?;
        }
        Ok(())
    }

    /// Expected number of users active in every sample.
    pub fn expected_intersection(&self) -> f64 {
        self.n_users as f64 * self.cross_sample_participation.powi(self.samples.len() as i32)
    }
}

pub fn user_id(i: usize) -> String {
    format!("u{i:06}")
}

pub fn influencer_id(sample_id: &str, j: usize) -> String {
    format!("{sample_id}_i{j:04}")
}

/// Influencer `j` of `n` belongs to block `j * k / n` (contiguous, balanced).
pub fn influencer_block(j: usize, n: usize, k: usize) -> usize {
    j * k / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub start: i64,
    pub end: i64,
    /// Stance expressed in this sample; `None` when the user is inactive.
    pub stances: Vec<Option<usize>>,
    pub influencer_blocks: Vec<usize>,
    pub n_participants: usize,
    pub n_events: usize,
    /// Retweeted (user, influencer) pairs by `[stance][block]`.
    pub block_cells: Vec<Vec<u64>>,
    /// Candidate (user, influencer) pairs by `[stance][block]`.
    pub block_pairs: Vec<Vec<u64>>,
    pub affinity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub k_stances: usize,
    pub users: Vec<String>,
    pub stances: Vec<usize>,
    pub activity: Vec<f64>,
    /// Percentile rank of each user's activity (0 to 100). Heavier users sit
    /// farther from the common-space origin, so this is the expected side of
    /// the distance-percentile filter each user lands on.
    pub activity_percentile: Vec<f64>,
    pub expected_intersection: f64,
    pub n_active_in_all: usize,
    pub samples: Vec<SampleTruth>,
}

impl GroundTruth {
    pub fn stance_of(&self) -> HashMap<&str, usize> {
        self.users
            .iter()
            .map(String::as_str)
            .zip(self.stances.iter().copied())
            .collect()
    }

    /// Block of every influencer across samples.
    pub fn influencer_blocks(&self) -> HashMap<String, usize> {
        self.samples
            .iter()
            .flat_map(|s| {
                s.influencer_blocks
                    .iter()
                    .enumerate()
                    .map(move |(j, &b)| (influencer_id(&s.sample_id, j), b))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Events per sample, in config order, sorted by (timestamp, retweeter,
    /// influencer).
    pub events: Vec<(String, Vec<RetweetEvent>)>,
    pub truth: GroundTruth,
}

/// `100 * (number of values <= x) / n` for each `x`.
fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .map(|x| 100.0 * sorted.partition_point(|y| y <= x) as f64 / n)
        .collect()
}

fn draw_stance(rng: &mut ChaCha8Rng, mixture: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, p) in mixture.iter().enumerate() {
        acc += p;
        if u < acc {
            return s;
        }
    }
    mixture.len() - 1
}

/// Generates the corpus. Population draws (stances, activity,
/// participation) use one stream; each sample then uses its own stream
/// derived from `(seed, sample_id)`, so samples can be built in parallel.
pub fn generate(cfg: &PlantedConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let expected = cfg.expected_intersection();
    if expected < 1.0 {
        log::warn!(
            "stage=synth event=sparse_intersection expected_intersection={expected:.3} participation={}",
            cfg.cross_sample_participation
        );
    }
    let k = cfg.k_stances;
    let n = cfg.n_users;
    let mut pop = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["synth", "population"]));
    let sigma = cfg.activity_sigma;
    let mu = cfg.events_per_active_user.ln() - sigma * sigma / 2.0;
    let lognormal = LogNormal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let stances: Vec<usize> = (0..n).map(|_| draw_stance(&mut pop, &cfg.stance_mixture)).collect();
    let activity: Vec<f64> = (0..n).map(|_| lognormal.sample(&mut pop)).collect();
    let participation: Vec<Vec<Option<usize>>> = cfg
        .samples
        .iter()
        .map(|_| {
            (0..n)
                .map(|u| {
                    if !pop.random_bool(cfg.cross_sample_participation) {
                        return None;
                    }
                    if k == 1 || pop.random_bool(cfg.stance_consistency) {
                        return Some(stances[u]);
                    }
                    let other = pop.random_range(0..k - 1);
                    Some(if other >= stances[u] { other + 1 } else { other })
                })
                .collect()
        })
        .collect();
    let n_active_in_all = (0..n).filter(|&u| participation.iter().all(|p| p[u].is_some())).count();

    let jobs: Vec<usize> = (0..cfg.samples.len()).collect();
    let per_sample = parallel::map_slice(&jobs, |&si| generate_sample(cfg, si, &participation[si], &activity));
    let mut events = Vec::new();
    let mut samples = Vec::new();
    for r in per_sample {
        let (ev, truth) = r?;
        events.push((truth.sample_id.clone(), ev));
        samples.push(truth);
    }
    Ok(SynthOutput {
        events,
        truth: GroundTruth {
            seed: cfg.seed,
            k_stances: k,
            users: (0..n).map(user_id).collect(),
            stances,
            activity_percentile: percentile_ranks(&activity),
            activity,
            expected_intersection: expected,
            n_active_in_all,
            samples,
        },
    })
}

fn generate_sample(
    cfg: &PlantedConfig,
    si: usize,
    stances: &[Option<usize>],
    activity: &[f64],
) -> Result<(Vec<RetweetEvent>, SampleTruth)> {
    let spec = &cfg.samples[si];
    let k = cfg.k_stances;
    let n_inf = cfg.n_influencers_per_sample;
    let affinity = cfg.affinity.for_sample(&spec.sample_id, k)?;
    let (start, end) = (ingest::parse_iso_date(&spec.start)?, ingest::parse_iso_date(&spec.end)?);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["synth", &spec.sample_id]));
    let blocks: Vec<usize> = (0..n_inf).map(|j| influencer_block(j, n_inf, k)).collect();
    let mut block_size = vec![0u64; k];
    for &b in &blocks {
        block_size[b] += 1;
    }
    let mut block_cells = vec![vec![0u64; k]; k];
    let mut block_pairs = vec![vec![0u64; k]; k];
    let inf_ids: Vec<String> = (0..n_inf).map(|j| influencer_id(&spec.sample_id, j)).collect();
    let mut events = Vec::new();
    let mut n_participants = 0;
    for (u, stance) in stances.iter().enumerate() {
        let Some(s) = *stance else { continue };
        n_participants += 1;
        for b in 0..k {
            block_pairs[s][b] += block_size[b];
        }
        let cells: Vec<usize> = (0..n_inf)
            .filter(|&j| rng.random_bool(affinity[s][blocks[j]]))
            .collect();
        if cells.is_empty() {
            continue;
        }
        for &j in &cells {
            block_cells[s][blocks[j]] += 1;
        }
        let total = (activity[u].round() as usize).max(cells.len());
        let mut counts = vec![1usize; cells.len()];
        for _ in cells.len()..total {
            counts[rng.random_range(0..cells.len())] += 1;
        }
        let uid = user_id(u);
        for (&j, &c) in cells.iter().zip(&counts) {
            for _ in 0..c {
                events.push(RetweetEvent {
                    retweeter: uid.clone(),
                    influencer: inf_ids[j].clone(),
                    timestamp: rng.random_range(start..end),
                    sample_id: spec.sample_id.clone(),
                });
            }
        }
    }
    events.sort_by(|a, b| (a.timestamp, &a.retweeter, &a.influencer).cmp(&(b.timestamp, &b.retweeter, &b.influencer)));
    let truth = SampleTruth {
        sample_id: spec.sample_id.clone(),
        start,
        end,
        stances: stances.to_vec(),
        influencer_blocks: blocks,
        n_participants,
        n_events: events.len(),
        block_cells,
        block_pairs,
        affinity,
    };
    Ok((events, truth))
}

/// Writes `<sample>.jsonl` per sample, `ground_truth.json` and
/// `active_users.txt` (users active in at least one sample).
pub fn write_output(out: &SynthOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (sample_id, events) in &out.events {
        let path = dir.join(format!("{sample_id}.jsonl"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        ingest::write_events_jsonl(BufWriter::new(f), events)?;
    }
    out.truth.save(&dir.join("ground_truth.json"))?;
    let mut active = String::from("# users active in at least one sample\n");
    for (u, id) in out.truth.users.iter().enumerate() {
        if out.truth.samples.iter().any(|s| s.stances[u].is_some()) {
            active.push_str(id);
            active.push('\n');
        }
    }
    let path = dir.join("active_users.txt");
    fs::write(&path, active).map_err(|e| Error::io(&path, e))
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

/// Adjusted Rand index from the pair-counting contingency table. When the
/// index is undefined (both labelings all-one-class, or both
/// all-singletons) it is 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// ARI over the points that are not noise in `predicted`.
pub fn adjusted_rand_index_excluding_noise(truth: &[usize], predicted: &[Option<usize>]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape("labelings differ in length".into()));
    }
    let (t, p): (Vec<usize>, Vec<usize>) = truth
        .iter()
        .zip(predicted)
        .filter_map(|(&t, p)| p.map(|p| (t, p)))
        .unzip();
    adjusted_rand_index(&t, &p)
}

/// `|mean(a) - mean(b)| / pooled standard deviation`.
pub fn standardized_mean_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("each group needs at least two values".into()));
    }
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        (m, ss)
    };
    let (ma, ssa) = stats(a);
    let (mb, ssb) = stats(b);
    let pooled = ((ssa + ssb) / (a.len() + b.len() - 2) as f64).sqrt();
    if pooled == 0.0 {
        return Ok(if ma == mb { 0.0 } else { f64::INFINITY });
    }
    Ok((ma - mb).abs() / pooled)
}
