//! Co-retweet networks and Louvain community detection.
//!
//! Self-loop convention: a node's internal weight `w` counts as `A_ii = 2w`
//! in the adjacency, so it adds `2w` to the node degree. Louvain's
//! aggregated graphs use the same convention, so modularity of an
//! aggregated partition equals modularity on the original graph.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::matrix::IncidenceMatrix;
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeighting {
    /// Number of shared influencers.
    #[default]
    Binary,
    /// Sum over shared influencers of the product of retweet counts.
    Counts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    pub nodes: Vec<String>,
    /// `(a, b, weight)` with `a < b` and `weight > 0`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
    pub node_cluster: Vec<Option<String>>,
    /// Within-node weight (within-cluster shared retweets at cluster level).
    pub internal_weight: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(nodes: Vec<String>, mut edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = nodes.len();
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0, e.2);
            }
        }
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        for (i, &(a, b, w)) in edges.iter().enumerate() {
            if a == b {
                return Err(Error::Integrity(format!("self-loop on node {a}")));
            }
            if b >= n {
                return Err(Error::Integrity(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Integrity(format!("edge ({a}, {b}) has weight {w}")));
            }
            if i > 0 && (edges[i - 1].0, edges[i - 1].1) == (a, b) {
                return Err(Error::Integrity(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(WeightedGraph {
            node_cluster: vec![None; n],
            internal_weight: vec![0.0; n],
            nodes,
            edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum::<f64>() + self.internal_weight.iter().sum::<f64>()
    }

    /// Weighted degrees with internal weight counted twice.
    pub fn degrees(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self.internal_weight.iter().map(|w| 2.0 * w).collect();
        for &(a, b, w) in &self.edges {
            k[a] += w;
            k[b] += w;
        }
        k
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        let (a, b) = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&(a, b)))
            .map_or(0.0, |i| self.edges[i].2)
    }

    /// Same graph with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> WeightedGraph {
        WeightedGraph {
            edges: self.edges.iter().map(|&(a, b, w)| (a, b, w * factor)).collect(),
            internal_weight: self.internal_weight.iter().map(|w| w * factor).collect(),
            ..self.clone()
        }
    }

    pub fn write_edge_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["source", "target", "weight"])?;
        for &(a, b, wt) in &self.edges {
            wr.write_record([self.nodes[a].as_str(), self.nodes[b].as_str(), &format!("{wt:?}")])?;
        }
        wr.flush().map_err(|e| Error::io("<edge list>", e))?;
        Ok(())
    }

    pub fn write_graphml<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        s.push_str("  <key id=\"cluster\" for=\"node\" attr.name=\"cluster\" attr.type=\"string\"/>\n");
        s.push_str("  <key id=\"internal_weight\" for=\"node\" attr.name=\"internal_weight\" attr.type=\"double\"/>\n");
        s.push_str("  <key id=\"weight\" for=\"edge\" attr.name=\"weight\" attr.type=\"double\"/>\n");
        s.push_str("  <graph id=\"co_retweet\" edgedefault=\"undirected\">\n");
        for (i, id) in self.nodes.iter().enumerate() {
            s.push_str(&format!("    <node id=\"{}\">\n", xml_escape(id)));
            if let Some(c) = &self.node_cluster[i] {
                s.push_str(&format!("      <data key=\"cluster\">{}</data>\n", xml_escape(c)));
            }
            s.push_str(&format!(
                "      <data key=\"internal_weight\">{:?}</data>\n",
                self.internal_weight[i]
            ));
            s.push_str("    </node>\n");
        }
        for &(a, b, wt) in &self.edges {
            s.push_str(&format!(
                "    <edge source=\"{}\" target=\"{}\"><data key=\"weight\">{:?}</data></edge>\n",
                xml_escape(&self.nodes[a]),
                xml_escape(&self.nodes[b]),
                wt
            ));
        }
        s.push_str("  </graph>\n</graphml>\n");
        w.write_all(s.as_bytes()).map_err(|e| Error::io("<graphml>", e))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Which graph to build from the incidence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphLevel {
    User,
    #[default]
    Cluster,
}

fn member_rows(m: &IncidenceMatrix, members: &[String]) -> Result<Vec<usize>> {
    if members.is_empty() {
        return Err(Error::Empty("no members for the co-retweet graph".into()));
    }
    let mut seen = std::collections::HashSet::new();
    members
        .iter()
        .map(|u| {
            if !seen.insert(u.as_str()) {
                return Err(Error::Integrity(format!("duplicate member {u:?}")));
            }
            m.row_index(u)
                .ok_or_else(|| Error::Integrity(format!("member {u:?} is not a matrix row")))
        })
        .collect()
}

/// User-level co-retweet graph over `members` (in the given order): the
/// off-diagonal Gram matrix of the incidence rows.
pub fn user_graph(m: &IncidenceMatrix, members: &[String], weighting: EdgeWeighting) -> Result<WeightedGraph> {
    let rows = member_rows(m, members)?;
    let mut pos = vec![usize::MAX; m.n_rows()];
    for (i, &r) in rows.iter().enumerate() {
        pos[r] = i;
    }
    let per_member = parallel::map_range(rows.len(), |i| {
        let r = rows[i];
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (&c, &cnt) in m.row(r).iter().zip(m.row_counts(r)) {
            for &v in m.col(c) {
                let j = pos[v];
                if j == usize::MAX || j <= i {
                    continue;
                }
                let w = match weighting {
                    EdgeWeighting::Binary => 1.0,
                    EdgeWeighting::Counts => cnt as f64 * m.count(v, c) as f64,
                };
                *acc.entry(j).or_insert(0.0) += w;
            }
        }
        let mut out: Vec<(usize, usize, f64)> = acc.into_iter().map(|(j, w)| (i, j, w)).collect();
        out.sort_by_key(|e| e.1);
        out
    });
    WeightedGraph::new(members.to_vec(), per_member.into_iter().flatten().collect())
}

/// Cluster-level graph: between-cluster weights are summed user-level
/// weights; within-cluster totals go to `internal_weight`. Noise users
/// are left out. Nodes are named `C<k>`.
pub fn cluster_graph(
    m: &IncidenceMatrix,
    assignment: &ClusterAssignment,
    weighting: EdgeWeighting,
) -> Result<WeightedGraph> {
    let (members, labels): (Vec<String>, Vec<usize>) = assignment
        .user_ids
        .iter()
        .zip(&assignment.labels)
        .filter_map(|(u, l)| l.map(|c| (u.clone(), c)))
        .unzip();
    let users = user_graph(m, &members, weighting)?;
    let k = assignment
        .n_clusters()
        .max(labels.iter().map(|c| c + 1).max().unwrap_or(0));
    let mut internal = vec![0.0; k];
    let mut between: HashMap<(usize, usize), f64> = HashMap::new();
    for &(a, b, w) in &users.edges {
        let (ca, cb) = (labels[a], labels[b]);
        if ca == cb {
            internal[ca] += w;
        } else {
            *between.entry((ca.min(cb), ca.max(cb))).or_insert(0.0) += w;
        }
    }
    let nodes: Vec<String> = (0..k).map(|c| format!("C{c}")).collect();
    let mut g = WeightedGraph::new(nodes, between.into_iter().map(|((a, b), w)| (a, b, w)).collect())?;
    g.internal_weight = internal;
    g.node_cluster = (0..k).map(|c| Some(c.to_string())).collect();
    Ok(g)
}

pub fn co_retweet_graph(
    m: &IncidenceMatrix,
    members: &[String],
    level: GraphLevel,
    assignment: Option<&ClusterAssignment>,
    weighting: EdgeWeighting,
) -> Result<WeightedGraph> {
    match level {
        GraphLevel::User => {
            let mut g = user_graph(m, members, weighting)?;
            if let Some(a) = assignment {
                let lookup: HashMap<&str, Option<usize>> = a
                    .user_ids
                    .iter()
                    .map(String::as_str)
                    .zip(a.labels.iter().copied())
                    .collect();
                g.node_cluster = g
                    .nodes
                    .iter()
                    .map(|u| {
                        lookup.get(u.as_str()).map(|l| match l {
                            Some(c) => c.to_string(),
                            None => "noise".to_string(),
                        })
                    })
                    .collect();
            }
            Ok(g)
        }
        GraphLevel::Cluster => {
            let a = assignment.ok_or_else(|| Error::Config("cluster-level graph needs an assignment".into()))?;
            let keep: std::collections::HashSet<&str> = members.iter().map(String::as_str).collect();
            if keep.is_empty() {
                return Err(Error::Empty("no members for the co-retweet graph".into()));
            }
            let restricted = ClusterAssignment {
                user_ids: a
                    .user_ids
                    .iter()
                    .filter(|u| keep.contains(u.as_str()))
                    .cloned()
                    .collect(),
                labels: a
                    .user_ids
                    .iter()
                    .zip(&a.labels)
                    .filter(|(u, _)| keep.contains(u.as_str()))
                    .map(|(_, l)| *l)
                    .collect(),
                stabilities: a.stabilities.clone(),
                sizes: a.sizes.clone(),
            };
            cluster_graph(m, &restricted, weighting)
        }
    }
}

/// Community labels, dense from 0 in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub modularity: f64,
}

impl Partition {
    pub fn n_communities(&self) -> usize {
        self.labels.iter().map(|c| c + 1).max().unwrap_or(0)
    }

    pub fn write_csv<W: Write>(&self, g: &WeightedGraph, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["node", "community"])?;
        for (node, c) in g.nodes.iter().zip(&self.labels) {
            wr.write_record([node.as_str(), &c.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("<partition>", e))?;
        Ok(())
    }
}

/// Renumbers labels densely by first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// `Q = (1/2m) sum_ij (A_ij - gamma k_i k_j / 2m) [c_i = c_j]`; zero for
/// graphs without weight.
pub fn modularity(g: &WeightedGraph, labels: &[usize], resolution: f64) -> Result<f64> {
    let n = g.n_nodes();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
    }
    let k = labels.iter().map(|c| c + 1).max().unwrap_or(0);
    let degrees = g.degrees();
    let two_m: f64 = degrees.iter().sum();
    if two_m == 0.0 {
        return Ok(0.0);
    }
    let mut inside = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for i in 0..n {
        inside[labels[i]] += 2.0 * g.internal_weight[i];
        tot[labels[i]] += degrees[i];
    }
    for &(a, b, w) in &g.edges {
        if labels[a] == labels[b] {
            inside[labels[a]] += 2.0 * w;
        }
    }
    let q: f64 = (0..k)
        .map(|c| inside[c] / two_m - resolution * (tot[c] / two_m) * (tot[c] / two_m))
        .sum();
    Ok(q)
}

/// Adjacency without self-loops plus a per-node loop weight.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    loops: Vec<f64>,
}

impl Level {
    fn from_graph(g: &WeightedGraph) -> Self {
        let mut adj = vec![Vec::new(); g.n_nodes()];
        for &(a, b, w) in &g.edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        Level {
            adj,
            loops: g.internal_weight.clone(),
        }
    }

    fn degree(&self, i: usize) -> f64 {
        2.0 * self.loops[i] + self.adj[i].iter().map(|e| e.1).sum::<f64>()
    }

    /// One round of local moves; returns the (not yet dense) community of
    /// each node and whether anything moved.
    fn local_moves(&self, resolution: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let k: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let two_m: f64 = k.iter().sum();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = k.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut moved_any = false;
        let mut links: Vec<f64> = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        loop {
            let mut moved = false;
            for &i in &order {
                let old = comm[i];
                touched.clear();
                for &(j, w) in &self.adj[i] {
                    let c = comm[j];
                    if links[c] == 0.0 {
                        touched.push(c);
                    }
                    links[c] += w;
                }
                tot[old] -= k[i];
                let gain = |c: usize, links: &[f64]| links[c] - resolution * tot[c] * k[i] / two_m;
                let mut best = old;
                let mut best_gain = gain(old, &links);
                for &c in &touched {
                    let g = gain(c, &links);
                    if g > best_gain + 1e-12 * two_m.max(1.0) {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += k[i];
                comm[i] = best;
                if best != old {
                    moved = true;
                    moved_any = true;
                }
                for &c in &touched {
                    links[c] = 0.0;
                }
            }
            if !moved {
                break;
            }
        }
        (comm, moved_any)
    }

    fn aggregate(&self, dense: &[usize], n_comm: usize) -> Level {
        let mut loops = vec![0.0; n_comm];
        let mut between: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n_comm];
        for (i, edges) in self.adj.iter().enumerate() {
            let ci = dense[i];
            loops[ci] += self.loops[i];
            for &(j, w) in edges {
                if j < i {
                    continue;
                }
                let cj = dense[j];
                if ci == cj {
                    loops[ci] += w;
                } else {
                    *between[ci].entry(cj).or_insert(0.0) += w;
                    *between[cj].entry(ci).or_insert(0.0) += w;
                }
            }
        }
        let adj = between
            .into_iter()
            .map(|m| {
                let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect();
        Level { adj, loops }
    }
}

/// Independent Louvain passes run by [`louvain`]; the best modularity wins.
pub const DEFAULT_LOUVAIN_RESTARTS: usize = 10;

/// Two-phase Louvain with seeded node order, best of
/// [`DEFAULT_LOUVAIN_RESTARTS`] passes. Never returns a partition with
/// lower modularity than all singletons.
pub fn louvain(g: &WeightedGraph, seed: u64, resolution: f64) -> Result<Partition> {
    louvain_restarts(g, seed, resolution, DEFAULT_LOUVAIN_RESTARTS)
}

/// Louvain from `restarts` shuffled node orders drawn from one seeded
/// stream. A single pass gets stuck in local optima (a path collapsing
/// into one community, say); extra passes are cheap insurance. Ties keep
/// the earliest pass.
pub fn louvain_restarts(g: &WeightedGraph, seed: u64, resolution: f64, restarts: usize) -> Result<Partition> {
    if restarts == 0 {
        return Err(Error::Config("louvain needs at least one pass".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = louvain_pass(g, &mut rng, resolution)?;
    for _ in 1..restarts {
        let p = louvain_pass(g, &mut rng, resolution)?;
        if p.modularity > best.modularity {
            best = p;
        }
    }
    Ok(best)
}

fn louvain_pass(g: &WeightedGraph, rng: &mut ChaCha8Rng, resolution: f64) -> Result<Partition> {
    let n = g.n_nodes();
    let singletons: Vec<usize> = (0..n).collect();
    if n == 0 {
        return Ok(Partition {
            labels: Vec::new(),
            modularity: 0.0,
        });
    }
    if g.total_weight() == 0.0 {
        return Ok(Partition {
            modularity: modularity(g, &singletons, resolution)?,
            labels: singletons,
        });
    }
    let mut level = Level::from_graph(g);
    let mut membership = singletons.clone();
    loop {
        let (comm, moved) = level.local_moves(resolution, rng);
        if !moved {
            break;
        }
        let dense = canonical_labels(&comm);
        let n_comm = dense.iter().map(|c| c + 1).max().unwrap_or(0);
        for m in membership.iter_mut() {
            *m = dense[*m];
        }
        level = level.aggregate(&dense, n_comm);
    }
    let labels = canonical_labels(&membership);
    let q = modularity(g, &labels, resolution)?;
    let q0 = modularity(g, &singletons, resolution)?;
    if q < q0 {
        return Ok(Partition {
            labels: singletons,
            modularity: q0,
        });
    }
    Ok(Partition { labels, modularity: q })
}
