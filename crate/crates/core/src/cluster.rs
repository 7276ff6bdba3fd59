//! Distance-percentile user selection, cosine distances and HDBSCAN on a
//! precomputed distance matrix.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::pca::ScoreMatrix;

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 20;

/// Distances below this are treated as this value when converted to
/// lambda = 1 / distance, so duplicate points keep finite stabilities.
pub const MIN_LAMBDA_DISTANCE: f64 = 1e-12;

/// Euclidean norm of every score row.
pub fn row_norms(scores: &ScoreMatrix) -> Vec<f64> {
    (0..scores.n_users())
        .map(|i| scores.scores.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Norm threshold at the given percentile under the nearest-rank rule:
/// the `ceil(p/100 * n)`-th smallest norm (no threshold at rank 0).
pub fn nearest_rank_threshold(norms: &[f64], percentile: f64) -> Option<f64> {
    let rank = ((percentile / 100.0) * norms.len() as f64 - 1e-9).ceil() as usize;
    if rank == 0 {
        return None;
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Keeps users whose distance from the origin is at or above the
/// `percentile`-th percentile. User order is preserved.
pub fn percentile_filter(scores: &ScoreMatrix, percentile: f64) -> Result<ScoreMatrix> {
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::Config(format!("percentile {percentile} outside [0, 100)")));
    }
    if scores.n_users() == 0 {
        return Err(Error::Empty("no users to filter".into()));
    }
    let norms = row_norms(scores);
    let keep: Vec<String> = match nearest_rank_threshold(&norms, percentile) {
        None => scores.user_ids.clone(),
        Some(t) => scores
            .user_ids
            .iter()
            .zip(&norms)
            .filter(|(_, &n)| n >= t)
            .map(|(u, _)| u.clone())
            .collect(),
    };
    scores.select_users(&keep)
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

/// Dense symmetric distance matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub user_ids: Vec<String>,
    n: usize,
    data: Storage,
}

impl DistanceMatrix {
    /// Wraps a row-major `n x n` matrix after checking it is a valid
    /// dissimilarity: finite, non-negative, symmetric, zero diagonal.
    pub fn from_dense(user_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = user_ids.len();
        if values.len() != n * n {
            return Err(Error::Shape(format!("{} values for {n} users", values.len())));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::Integrity(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Integrity(format!("invalid distance {v} at ({i}, {j})")));
                }
                if v != values[j * n + i] {
                    return Err(Error::Integrity(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix {
            user_ids,
            n,
            data: Storage::F64(values),
        })
    }

    /// Euclidean distances between rows; handy for fixtures.
    pub fn euclidean(user_ids: Vec<String>, points: &DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        let mut values = vec![0.0; n * n];
        parallel::for_each_chunk_mut(&mut values, n.max(1), |i, row| {
            for (j, slot) in row.iter_mut().enumerate() {
                if i != j {
                    let mut s = 0.0;
                    for k in 0..points.ncols() {
                        let d = points[(i, k)] - points[(j, k)];
                        s += d * d;
                    }
                    *slot = s.sqrt();
                }
            }
        });
        Self::from_dense(user_ids, values)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.data {
            Storage::F64(v) => v[i * self.n + j],
            Storage::F32(v) => v[i * self.n + j] as f64,
        }
    }

    pub fn is_f32(&self) -> bool {
        matches!(self.data, Storage::F32(_))
    }

    /// Halves memory by storing 32-bit distances.
    pub fn into_f32(self) -> Self {
        let data = match self.data {
            Storage::F64(v) => Storage::F32(v.into_iter().map(|x| x as f32).collect()),
            s => s,
        };
        DistanceMatrix { data, ..self }
    }
}

/// Pairwise cosine distances `1 - cos(x_i, x_j)` between score rows,
/// clamped to `[0, 2]`.
pub fn cosine_distances(scores: &ScoreMatrix, float32: bool) -> Result<DistanceMatrix> {
    let n = scores.n_users();
    let k = scores.n_components();
    let norms = row_norms(scores);
    if let Some(i) = norms.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Degenerate(format!(
            "user {:?} has a zero or non-finite score vector",
            scores.user_ids[i]
        )));
    }
    // Row-major unit vectors.
    let unit: Vec<f64> = (0..n)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| scores.scores[(i, j)] / norms[i])
        .collect();
    let mut values = vec![0.0; n * n];
    parallel::for_each_chunk_mut(&mut values, n.max(1), |i, row| {
        let xi = &unit[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let xj = &unit[j * k..(j + 1) * k];
            let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            *slot = (1.0 - dot).clamp(0.0, 2.0);
        }
    });
    let d = DistanceMatrix::from_dense(scores.user_ids.clone(), values)?;
    Ok(if float32 { d.into_f32() } else { d })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSelection {
    #[default]
    ExcessOfMass,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
    pub selection: ClusterSelection,
    pub allow_single_cluster: bool,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            min_samples: None,
            selection: ClusterSelection::ExcessOfMass,
            allow_single_cluster: false,
        }
    }
}

impl HdbscanParams {
    pub fn with_min_cluster_size(min_cluster_size: usize) -> Self {
        HdbscanParams {
            min_cluster_size,
            ..Default::default()
        }
    }

    pub fn effective_min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

impl MstEdge {
    fn key(&self) -> (f64, usize, usize) {
        (self.weight, self.a.min(self.b), self.a.max(self.b))
    }
}

fn key_less(x: (f64, usize, usize), y: (f64, usize, usize)) -> bool {
    match x.0.total_cmp(&y.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => (x.1, x.2) < (y.1, y.2),
    }
}

/// One row of the condensed tree. Children below `n_points` are points,
/// the rest are clusters; cluster ids start at `n_points` (the root).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

/// Flat clustering of a set of users.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub user_ids: Vec<String>,
    /// `None` is noise.
    pub labels: Vec<Option<usize>>,
    pub stabilities: Vec<f64>,
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn label_of(&self, user: &str) -> Option<Option<usize>> {
        self.user_ids.iter().position(|u| u == user).map(|i| self.labels[i])
    }

    /// `user_id,cluster,probability_placeholder`; noise is written `noise`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["user_id", "cluster", "probability_placeholder"])?;
        for (u, l) in self.user_ids.iter().zip(&self.labels) {
            let (c, p) = match l {
                Some(c) => (c.to_string(), "1"),
                None => ("noise".to_string(), "0"),
            };
            wr.write_record([u.as_str(), c.as_str(), p])?;
        }
        wr.flush().map_err(|e| Error::io("<assignments>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut user_ids = Vec::new();
        let mut labels = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            user_ids.push(rec.get(0).unwrap_or_default().to_string());
            let c = rec.get(1).unwrap_or_default();
            labels.push(if c == "noise" {
                None
            } else {
                Some(c.parse().map_err(|_| Error::Parse(format!("bad cluster {c:?}")))?)
            });
        }
        let k = labels.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
        let mut sizes = vec![0; k];
        for c in labels.iter().flatten() {
            sizes[*c] += 1;
        }
        Ok(ClusterAssignment {
            user_ids,
            labels,
            stabilities: vec![f64::NAN; k],
            sizes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HdbscanResult {
    pub assignment: ClusterAssignment,
    pub core_distances: Vec<f64>,
    pub mst: Vec<MstEdge>,
    pub condensed: Vec<CondensedEdge>,
    /// Stability of every condensed-tree cluster, indexed by `id - n`.
    pub cluster_stabilities: Vec<f64>,
    /// Condensed-tree ids of the selected clusters, in output-label order.
    pub selected: Vec<usize>,
}

impl HdbscanResult {
    pub fn write_condensed_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["parent", "child", "lambda", "size"])?;
        for e in &self.condensed {
            wr.write_record([
                e.parent.to_string(),
                e.child.to_string(),
                format!("{:?}", e.lambda),
                e.size.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<condensed tree>", e))?;
        Ok(())
    }

    pub fn summary(&self, params: &HdbscanParams) -> serde_json::Value {
        let a = &self.assignment;
        serde_json::json!({
            "n_points": a.user_ids.len(),
            "n_clusters": a.n_clusters(),
            "n_noise": a.n_noise(),
            "min_cluster_size": params.min_cluster_size,
            "min_samples": params.effective_min_samples(),
            "selection": params.selection,
            "clusters": (0..a.n_clusters()).map(|c| serde_json::json!({
                "cluster": c,
                "size": a.sizes[c],
                "stability": a.stabilities[c],
            })).collect::<Vec<_>>(),
        })
    }
}

/// Distance to the `min_samples`-th nearest neighbour, counting the point
/// itself as the first.
pub fn core_distances(d: &DistanceMatrix, min_samples: usize) -> Vec<f64> {
    let n = d.len();
    let k = min_samples.clamp(1, n.max(1));
    parallel::map_range(n, |i| {
        let mut row: Vec<f64> = (0..n).map(|j| d.get(i, j)).collect();
        row.select_nth_unstable_by(k - 1, f64::total_cmp);
        row[k - 1]
    })
}

/// Exact minimum spanning tree of the mutual-reachability graph (Prim on
/// the dense matrix). Equal weights are ordered by (min endpoint, max
/// endpoint), which makes the tree unique.
pub fn mutual_reachability_mst(d: &DistanceMatrix, core: &[f64]) -> Vec<MstEdge> {
    let n = d.len();
    if n < 2 {
        return Vec::new();
    }
    let mr = |a: usize, b: usize| d.get(a, b).max(core[a]).max(core[b]);
    let mut in_tree = vec![false; n];
    let mut best: Vec<Option<MstEdge>> = vec![None; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next: Option<usize> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let cand = MstEdge {
                a: current,
                b: v,
                weight: mr(current, v),
            };
            if best[v].is_none_or(|e| key_less(cand.key(), e.key())) {
                best[v] = Some(cand);
            }
            let bv = best[v].expect("set above");
            if next.is_none_or(|u| key_less(bv.key(), best[u].expect("candidate").key())) {
                next = Some(v);
            }
        }
        let v = next.expect("graph is complete");
        in_tree[v] = true;
        edges.push(best[v].expect("candidate"));
        current = v;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage merge of the MST: `(left, right, distance, size)` rows
/// where node ids `>= n` refer to earlier merges.
pub fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<(usize, usize, f64, usize)> {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| {
        let (kx, ky) = (x.key(), y.key());
        kx.0.total_cmp(&ky.0).then((kx.1, kx.2).cmp(&(ky.1, ky.2)))
    });
    let mut uf = UnionFind::new(2 * n);
    let mut node_of_root: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (k, e) in edges.iter().enumerate() {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let (na, nb) = (node_of_root[ra], node_of_root[rb]);
        let new = n + k;
        size[new] = size[na] + size[nb];
        merges.push((na, nb, e.weight, size[new]));
        uf.parent[ra] = new;
        uf.parent[rb] = new;
        node_of_root[new] = new;
    }
    merges
}

fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(MIN_LAMBDA_DISTANCE)
}

/// Condenses a single-linkage hierarchy: splits producing a child smaller
/// than `min_cluster_size` become points falling out of the parent.
pub fn condense_tree(n: usize, merges: &[(usize, usize, f64, usize)], min_cluster_size: usize) -> Vec<CondensedEdge> {
    if n < 2 {
        return Vec::new();
    }
    let root = 2 * n - 2;
    let children = |node: usize| merges[node - n];
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].3 };
    let leaves_under = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let (l, r, _, _) = children(x);
                stack.push(r);
                stack.push(l);
            }
        }
        out.sort_unstable();
        out
    };
    let mut relabel = vec![usize::MAX; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut out = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let (left, right, dist, _) = children(node);
        let lambda = lambda_of(dist);
        let parent = relabel[node];
        let (ls, rs) = (size_of(left), size_of(right));
        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        let fall_out = |sub: usize, out: &mut Vec<CondensedEdge>| {
            for p in leaves_under(sub) {
                out.push(CondensedEdge {
                    parent,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
        };
        match (big_l, big_r) {
            (true, true) => {
                for (child, sz) in [(left, ls), (right, rs)] {
                    relabel[child] = next_label;
                    out.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: sz,
                    });
                    next_label += 1;
                    queue.push_back(child);
                }
            }
            (false, false) => {
                fall_out(left, &mut out);
                fall_out(right, &mut out);
            }
            (false, true) => {
                relabel[right] = parent;
                fall_out(left, &mut out);
                queue.push_back(right);
            }
            (true, false) => {
                relabel[left] = parent;
                fall_out(right, &mut out);
                queue.push_back(left);
            }
        }
    }
    out
}

/// Stability of each condensed cluster (indexed by `id - n`):
/// sum over its children of `(lambda_child - lambda_birth) * child_size`.
pub fn cluster_stabilities(n: usize, condensed: &[CondensedEdge]) -> Vec<f64> {
    let n_clusters = condensed
        .iter()
        .map(|e| e.parent.max(if e.child >= n { e.child } else { 0 }))
        .max()
        .map_or(0, |m| m + 1 - n);
    let mut birth = vec![0.0; n_clusters];
    for e in condensed.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
    }
    let mut stab = vec![0.0; n_clusters];
    for e in condensed {
        stab[e.parent - n] += (e.lambda - birth[e.parent - n]) * e.size as f64;
    }
    stab
}

fn select_clusters(n: usize, condensed: &[CondensedEdge], stabilities: &[f64], params: &HdbscanParams) -> Vec<usize> {
    let m = stabilities.len();
    if m == 0 {
        return Vec::new();
    }
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); m];
    for e in condensed.iter().filter(|e| e.child >= n) {
        kids[e.parent - n].push(e.child - n);
    }
    let first = if params.allow_single_cluster { 0 } else { 1 };
    let mut selected = vec![false; m];
    match params.selection {
        ClusterSelection::Leaf => {
            for c in first..m {
                selected[c] = kids[c].is_empty();
            }
            if params.allow_single_cluster && m == 1 {
                selected[0] = true;
            }
        }
        ClusterSelection::ExcessOfMass => {
            let mut stab = stabilities.to_vec();
            for c in first..m {
                selected[c] = true;
            }
            // Children always carry larger ids than their parent.
            for c in (first..m).rev() {
                let subtree: f64 = kids[c].iter().map(|&k| stab[k]).sum();
                if subtree > stab[c] {
                    selected[c] = false;
                    stab[c] = subtree;
                } else {
                    let mut stack = kids[c].clone();
                    while let Some(x) = stack.pop() {
                        selected[x] = false;
                        stack.extend(kids[x].iter().copied());
                    }
                }
            }
        }
    }
    (0..m).filter(|&c| selected[c]).map(|c| c + n).collect()
}

/// HDBSCAN on a precomputed distance matrix.
pub fn hdbscan(d: &DistanceMatrix, params: &HdbscanParams) -> Result<HdbscanResult> {
    let n = d.len();
    if params.min_cluster_size < 2 {
        return Err(Error::Config("min_cluster_size must be at least 2".into()));
    }
    if params.effective_min_samples() == 0 {
        return Err(Error::Config("min_samples must be positive".into()));
    }
    let core = core_distances(d, params.effective_min_samples());
    let mst = mutual_reachability_mst(d, &core);
    if n < params.min_cluster_size {
        log::warn!(
            "stage=cluster event=too_few_points n={n} min_cluster_size={}",
            params.min_cluster_size
        );
        return Ok(HdbscanResult {
            assignment: ClusterAssignment {
                user_ids: d.user_ids.clone(),
                labels: vec![None; n],
                stabilities: Vec::new(),
                sizes: Vec::new(),
            },
            core_distances: core,
            mst,
            condensed: Vec::new(),
            cluster_stabilities: Vec::new(),
            selected: Vec::new(),
        });
    }
    let merges = single_linkage(n, &mst);
    let condensed = condense_tree(n, &merges, params.min_cluster_size);
    let stabilities = cluster_stabilities(n, &condensed);
    let selected = select_clusters(n, &condensed, &stabilities, params);

    let m = stabilities.len();
    let mut parent_of_cluster = vec![usize::MAX; m];
    let mut point_parent = vec![n; n];
    for e in &condensed {
        if e.child >= n {
            parent_of_cluster[e.child - n] = e.parent - n;
        } else {
            point_parent[e.child] = e.parent - n;
        }
    }
    let mut label_of_cluster: Vec<Option<usize>> = vec![None; m];
    for (label, &c) in selected.iter().enumerate() {
        label_of_cluster[c - n] = Some(label);
    }
    // Resolve each condensed cluster to its selected ancestor, if any.
    let mut resolved: Vec<Option<usize>> = vec![None; m];
    for c in 0..m {
        let mut x = c;
        loop {
            if let Some(l) = label_of_cluster[x] {
                resolved[c] = Some(l);
                break;
            }
            if parent_of_cluster[x] == usize::MAX {
                break;
            }
            x = parent_of_cluster[x];
        }
    }
    let labels: Vec<Option<usize>> = point_parent.iter().map(|&c| resolved[c]).collect();
    let mut sizes = vec![0usize; selected.len()];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    let assignment = ClusterAssignment {
        user_ids: d.user_ids.clone(),
        labels,
        stabilities: selected.iter().map(|&c| stabilities[c - n]).collect(),
        sizes,
    };
    Ok(HdbscanResult {
        assignment,
        core_distances: core,
        mst,
        condensed,
        cluster_stabilities: stabilities,
        selected,
    })
}
