//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Deliberately naive and std-only: nothing here calls
//! into the library under test.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues in non-increasing order and the matching unit eigenvectors.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance (denominator `n - 1`) of row-major data.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let p = rows[0].len();
    let means: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut c = vec![vec![0.0; p]; p];
    for r in rows {
        for i in 0..p {
            let di = r[i] - means[i];
            for j in i..p {
                c[i][j] += di * (r[j] - means[j]);
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            c[i][j] /= (n - 1) as f64;
            c[j][i] = c[i][j];
        }
    }
    c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sine of the largest principal angle between the spans of two sets of
/// orthonormal vectors: the spectral norm of `A - B B^T A`.
pub fn max_principal_angle_sin(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let resid: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| {
            let mut r = ai.clone();
            for bj in b {
                let c = dot(bj, ai);
                for (x, y) in r.iter_mut().zip(bj) {
                    *x -= c * y;
                }
            }
            r
        })
        .collect();
    let k = resid.len();
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| dot(&resid[i], &resid[j])).collect())
        .collect();
    let (vals, _) = jacobi_eigen(gram);
    vals.first().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// One cluster of the brute-force condensed tree.
#[derive(Debug, Clone)]
pub struct OracleCluster {
    pub points: BTreeSet<usize>,
    pub stability: f64,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct OracleHdbscan {
    /// Index 0 is the root.
    pub clusters: Vec<OracleCluster>,
    /// Selected clusters as point sets, sorted.
    pub partition: Vec<BTreeSet<usize>>,
}

enum Node {
    Leaf(usize),
    Merge(usize, usize, f64),
}

fn leaves(nodes: &[Node], x: usize, out: &mut BTreeSet<usize>) {
    match nodes[x] {
        Node::Leaf(p) => {
            out.insert(p);
        }
        Node::Merge(l, r, _) => {
            leaves(nodes, l, out);
            leaves(nodes, r, out);
        }
    }
}

/// HDBSCAN by definition: core distances from sorted rows, Kruskal on the
/// complete mutual-reachability graph (ties by `(w, i, j)`), recursive
/// condensation and excess-of-mass selection with the root excluded.
pub fn brute_hdbscan(d: &[Vec<f64>], min_cluster_size: usize, min_samples: usize) -> OracleHdbscan {
    let n = d.len();
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut row = d[i].clone();
            row.sort_by(f64::total_cmp);
            row[min_samples - 1]
        })
        .collect();
    let mr = |i: usize, j: usize| d[i][j].max(core[i]).max(core[j]);

    let mut nodes: Vec<Node> = (0..n).map(Node::Leaf).collect();
    let mut comp: Vec<usize> = (0..n).collect();
    let mut comp_node: Vec<usize> = (0..n).collect();
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in i + 1..n {
                if comp[i] == comp[j] {
                    continue;
                }
                let w = mr(i, j);
                let better = match best {
                    None => true,
                    Some((bw, _, _)) => w.total_cmp(&bw).is_lt(),
                };
                if better {
                    best = Some((w, i, j));
                }
            }
        }
        let (w, i, j) = best.unwrap();
        let (ci, cj) = (comp[i], comp[j]);
        nodes.push(Node::Merge(comp_node[ci], comp_node[cj], w));
        comp_node[ci] = nodes.len() - 1;
        for c in comp.iter_mut() {
            if *c == cj {
                *c = ci;
            }
        }
    }
    let root = nodes.len() - 1;

    let size = |x: usize| {
        let mut s = BTreeSet::new();
        leaves(&nodes, x, &mut s);
        s
    };
    let mut clusters = vec![OracleCluster {
        points: size(root),
        stability: 0.0,
        parent: None,
    }];
    let mut births = vec![0.0];
    // (dendrogram node, condensed cluster it belongs to)
    let mut work = vec![(root, 0usize)];
    while let Some((x, c)) = work.pop() {
        let Node::Merge(l, r, h) = nodes[x] else {
            continue;
        };
        let lambda = 1.0 / h.max(1e-12);
        let (ls, rs) = (size(l), size(r));
        let (big_l, big_r) = (ls.len() >= min_cluster_size, rs.len() >= min_cluster_size);
        if big_l && big_r {
            for (child, pts) in [(l, ls), (r, rs)] {
                clusters[c].stability += (lambda - births[c]) * pts.len() as f64;
                clusters.push(OracleCluster {
                    points: pts,
                    stability: 0.0,
                    parent: Some(c),
                });
                births.push(lambda);
                work.push((child, clusters.len() - 1));
            }
        } else {
            for (child, pts, big) in [(l, ls, big_l), (r, rs, big_r)] {
                if big {
                    work.push((child, c));
                } else {
                    clusters[c].stability += (lambda - births[c]) * pts.len() as f64;
                }
            }
        }
    }

    fn select(clusters: &[OracleCluster], c: usize) -> (f64, Vec<usize>) {
        let kids: Vec<usize> = (0..clusters.len()).filter(|&k| clusters[k].parent == Some(c)).collect();
        if kids.is_empty() {
            return (clusters[c].stability, vec![c]);
        }
        let mut sub = 0.0;
        let mut chosen = Vec::new();
        for k in kids {
            let (s, ch) = select(clusters, k);
            sub += s;
            chosen.extend(ch);
        }
        if sub > clusters[c].stability {
            (sub, chosen)
        } else {
            (clusters[c].stability, vec![c])
        }
    }
    let mut partition: Vec<BTreeSet<usize>> = (1..clusters.len())
        .filter(|&k| clusters[k].parent == Some(0))
        .flat_map(|k| select(&clusters, k).1)
        .map(|k| clusters[k].points.clone())
        .collect();
    partition.sort();
    OracleHdbscan { clusters, partition }
}

/// Newman modularity straight from a dense symmetric adjacency matrix
/// (diagonal entries are self-loop weights counted once in the degree).
pub fn naive_modularity(a: &[Vec<f64>], labels: &[usize], resolution: f64) -> f64 {
    let n = a.len();
    let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - resolution * k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Every set partition of `0..n` as restricted-growth label vectors.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for c in 0..=max + 1 {
            cur.push(c);
            rec(i + 1, n, cur, max.max(c), out);
            cur.pop();
        }
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut cur = vec![0];
    rec(1, n, &mut cur, 0, &mut out);
    out
}

/// Best modularity over all set partitions.
pub fn optimal_modularity(a: &[Vec<f64>], resolution: f64) -> f64 {
    all_partitions(a.len())
        .iter()
        .map(|l| naive_modularity(a, l, resolution))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Rand-index contingency ARI, written out independently of the library.
pub fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0f64; kb]; ka];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1.0;
    }
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(n as f64);
    let max = (rows + cols) / 2.0;
    if max == expected {
        return if a == b { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
