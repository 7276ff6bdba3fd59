//! Sparse binary retweeter x influencer incidence matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::RetweetEvent;

pub const DEFAULT_INFLUENCER_FRACTION: f64 = 0.001;

/// Binary incidence matrix with event multiplicities.
///
/// Rows are retweeters, columns influencers. A stored cell means "retweeted
/// at least once"; `counts` keeps the number of events behind each cell.
/// Stored in both CSR and CSC layout; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    counts: Vec<u32>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    row_lookup: HashMap<String, usize>,
    col_lookup: HashMap<String, usize>,
}

impl IncidenceMatrix {
    /// Builds from id lists and `(row, col, count)` triples. Triples may come
    /// in any order; duplicates and out-of-range indices are rejected.
    pub fn from_triples(rows: Vec<String>, cols: Vec<String>, mut triples: Vec<(usize, usize, u32)>) -> Result<Self> {
        let row_lookup = unique_lookup(&rows, "row")?;
        let col_lookup = unique_lookup(&cols, "column")?;
        triples.sort_unstable();
        for w in triples.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Integrity(format!("duplicate cell ({}, {})", w[0].0, w[0].1)));
            }
        }
        let mut row_ptr = vec![0usize; rows.len() + 1];
        let mut col_idx = Vec::with_capacity(triples.len());
        let mut counts = Vec::with_capacity(triples.len());
        let mut col_deg = vec![0usize; cols.len()];
        for &(r, c, k) in &triples {
            if r >= rows.len() || c >= cols.len() {
                return Err(Error::Integrity(format!(
                    "cell ({r}, {c}) outside {}x{}",
                    rows.len(),
                    cols.len()
                )));
            }
            if k == 0 {
                return Err(Error::Integrity(format!("cell ({r}, {c}) has zero count")));
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            counts.push(k);
            col_deg[c] += 1;
        }
        for i in 0..rows.len() {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut col_ptr = vec![0usize; cols.len() + 1];
        for j in 0..cols.len() {
            col_ptr[j + 1] = col_ptr[j] + col_deg[j];
        }
        let mut fill = col_ptr.clone();
        let mut row_idx = vec![0usize; triples.len()];
        for &(r, c, _) in &triples {
            row_idx[fill[c]] = r;
            fill[c] += 1;
        }
        Ok(IncidenceMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            counts,
            col_ptr,
            row_idx,
            row_lookup,
            col_lookup,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.rows
    }

    pub fn col_ids(&self) -> &[String] {
        &self.cols
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.row_lookup.get(id).copied()
    }

    pub fn col_index(&self, id: &str) -> Option<usize> {
        self.col_lookup.get(id).copied()
    }

    /// Column indices of the cells in row `r`, ascending.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Event multiplicities parallel to [`row`](Self::row).
    pub fn row_counts(&self, r: usize) -> &[u32] {
        &self.counts[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Row indices of the cells in column `c`, ascending.
    pub fn col(&self, c: usize) -> &[usize] {
        &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]]
    }

    /// Number of distinct retweeters of column `c`.
    pub fn col_degree(&self, c: usize) -> usize {
        self.col_ptr[c + 1] - self.col_ptr[c]
    }

    pub fn count(&self, r: usize, c: usize) -> u32 {
        let row = self.row(r);
        match row.binary_search(&c) {
            Ok(k) => self.row_counts(r)[k],
            Err(_) => 0,
        }
    }

    /// All cells as `(row, col, count)`, sorted by row then column.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_rows()).flat_map(move |r| {
            self.row(r)
                .iter()
                .zip(self.row_counts(r))
                .map(move |(&c, &k)| (r, c, k))
        })
    }

    /// Dense 0/1 copy; for tests and small fixtures only.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n_rows(), self.n_cols());
        for (r, c, _) in self.triples() {
            d[(r, c)] = 1.0;
        }
        d
    }

    /// Keeps the listed columns (in the given order); rows are untouched.
    pub fn select_columns(&self, keep: &[usize]) -> Result<IncidenceMatrix> {
        let mut remap = vec![usize::MAX; self.n_cols()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n_cols() {
                return Err(Error::Shape(format!("column {old} out of range")));
            }
            remap[old] = new;
        }
        let cols = keep.iter().map(|&c| self.cols[c].clone()).collect();
        let triples = self
            .triples()
            .filter(|&(_, c, _)| remap[c] != usize::MAX)
            .map(|(r, c, k)| (r, remap[c], k))
            .collect();
        IncidenceMatrix::from_triples(self.rows.clone(), cols, triples)
    }

    /// Writes the text form: a `rows=<n> cols=<m> nnz=<k>` header then one
    /// `row col count` line per cell, sorted.
    pub fn write_cells<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "rows={} cols={} nnz={}", self.n_rows(), self.n_cols(), self.nnz())?;
        for (r, c, k) in self.triples() {
            writeln!(w, "{r} {c} {k}")?;
        }
        Ok(())
    }

    /// Writes `<base>.mtx`, `<base>.rows` and `<base>.cols`.
    pub fn save(&self, base: &Path) -> Result<()> {
        for id in self.rows.iter().chain(&self.cols) {
            if id.contains('\n') || id.contains('\r') {
                return Err(Error::Integrity(format!("id {id:?} contains a newline")));
            }
        }
        let (mtx, rows, cols) = sidecar_paths(base);
        let write = |path: &Path, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut buf = std::io::BufWriter::new(file);
            f(&mut buf).and_then(|_| buf.flush()).map_err(|e| Error::io(path, e))
        };
        write(&mtx, &|w| self.write_cells(w))?;
        write(&rows, &|w| write_ids(w, &self.rows))?;
        write(&cols, &|w| write_ids(w, &self.cols))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<IncidenceMatrix> {
        let (mtx, rows, cols) = sidecar_paths(base);
        let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
        let row_ids = read_ids(open(&rows)?)?;
        let col_ids = read_ids(open(&cols)?)?;
        Self::read_cells(open(&mtx)?, row_ids, col_ids)
    }

    pub fn read_cells<R: Read>(r: R, rows: Vec<String>, cols: Vec<String>) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("matrix file is empty".into()))?
            .map_err(|e| Error::io("<matrix>", e))?;
        let mut dims = [0usize; 3];
        let keys = ["rows", "cols", "nnz"];
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("bad matrix header {header:?}")));
        }
        for (slot, (part, key)) in dims.iter_mut().zip(parts.iter().zip(keys)) {
            let v = part
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix('='))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad matrix header {header:?}")))?;
            *slot = v;
        }
        if dims[0] != rows.len() || dims[1] != cols.len() {
            return Err(Error::Shape(format!(
                "header says {}x{}, sidecars list {}x{}",
                dims[0],
                dims[1],
                rows.len(),
                cols.len()
            )));
        }
        let mut triples = Vec::with_capacity(dims[2]);
        for line in lines {
            let line = line.map_err(|e| Error::io("<matrix>", e))?;
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            let mut next = || -> Result<u64> {
                it.next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad matrix line {line:?}")))
            };
            let (r, c, k) = (next()? as usize, next()? as usize, next()? as u32);
            triples.push((r, c, k));
        }
        if triples.len() != dims[2] {
            return Err(Error::Shape(format!(
                "header says nnz={}, found {}",
                dims[2],
                triples.len()
            )));
        }
        Self::from_triples(rows, cols, triples)
    }
}

fn unique_lookup(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Integrity(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(map)
}

fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = base.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".mtx"), with(".rows"), with(".cols"))
}

fn write_ids(w: &mut dyn Write, ids: &[String]) -> std::io::Result<()> {
    for id in ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: R) -> Result<Vec<String>> {
    BufReader::new(r)
        .lines()
        .map(|l| l.map_err(|e| Error::io("<id list>", e)))
        .collect()
}

/// Builds the incidence matrix of a set of events: rows and columns are the
/// distinct retweeters and influencers in lexicographic order.
pub fn build_incidence(events: &[RetweetEvent]) -> Result<IncidenceMatrix> {
    if events.is_empty() {
        return Err(Error::Empty("no events to build an incidence matrix from".into()));
    }
    let cols: Vec<String> = events
        .iter()
        .map(|e| e.influencer.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    build_with_columns(events, &cols)
}

/// Builds a matrix over a fixed column set. Rows are every retweeter in
/// `events`, including those whose influencers are all outside `cols`
/// (they become all-zero rows).
pub fn build_with_columns(events: &[RetweetEvent], cols: &[String]) -> Result<IncidenceMatrix> {
    let col_of: HashMap<&str, usize> = cols.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut pairs: BTreeMap<(&str, usize), u32> = BTreeMap::new();
    let mut rows: BTreeSet<&str> = BTreeSet::new();
    for e in events {
        rows.insert(&e.retweeter);
        if let Some(&c) = col_of.get(e.influencer.as_str()) {
            *pairs.entry((&e.retweeter, c)).or_default() += 1;
        }
    }
    let rows: Vec<String> = rows.into_iter().map(str::to_string).collect();
    let row_of: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let triples = pairs.into_iter().map(|((r, c), k)| (row_of[r], c, k)).collect();
    IncidenceMatrix::from_triples(rows, cols.to_vec(), triples)
}

/// Minimum distinct-retweeter count for a column to survive at `fraction`.
pub fn min_influencer_degree(fraction: f64, n_rows: usize) -> usize {
    // Guard against 0.001 * 1e4 = 10.000000000000002 style rounding.
    let x = fraction * n_rows as f64;
    ((x - 1e-9).ceil().max(0.0)) as usize
}

/// Keeps influencers retweeted by at least `ceil(fraction * rows)` distinct
/// retweeters. Rows are not compacted.
pub fn threshold_influencers(m: &IncidenceMatrix, fraction: f64) -> Result<IncidenceMatrix> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "influencer fraction {fraction} must lie in (0, 1)"
        )));
    }
    let min_deg = min_influencer_degree(fraction, m.n_rows());
    let keep: Vec<usize> = (0..m.n_cols()).filter(|&c| m.col_degree(c) >= min_deg).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate(format!(
            "influencer threshold {min_deg} removes all {} columns",
            m.n_cols()
        )));
    }
    m.select_columns(&keep)
}

/// Union of several matrices over the union of their row and column ids;
/// counts of shared cells are summed.
pub fn combine(matrices: &[&IncidenceMatrix]) -> Result<IncidenceMatrix> {
    let mut rows = BTreeSet::new();
    let mut cols = BTreeSet::new();
    for m in matrices {
        rows.extend(m.row_ids().iter().map(String::as_str));
        cols.extend(m.col_ids().iter().map(String::as_str));
    }
    let rows: Vec<String> = rows.into_iter().map(str::to_string).collect();
    let cols: Vec<String> = cols.into_iter().map(str::to_string).collect();
    let row_of: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let col_of: HashMap<&str, usize> = cols.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut cells: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for m in matrices {
        for (r, c, k) in m.triples() {
            let key = (row_of[m.row_ids()[r].as_str()], col_of[m.col_ids()[c].as_str()]);
            *cells.entry(key).or_default() += k;
        }
    }
    IncidenceMatrix::from_triples(rows, cols, cells.into_iter().map(|((r, c), k)| (r, c, k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(r: &str, i: &str) -> RetweetEvent {
        RetweetEvent {
            retweeter: r.into(),
            influencer: i.into(),
            timestamp: 0,
            sample_id: "s".into(),
        }
    }

    #[test]
    fn dedups_to_binary_with_counts() {
        let m = build_incidence(&[ev("u1", "v1"), ev("u1", "v1"), ev("u2", "v2")]).unwrap();
        assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (2, 2, 2));
        assert_eq!(m.count(0, 0), 2);
        assert_eq!(m.count(1, 1), 1);
        assert_eq!(m.count(0, 1), 0);
        assert_eq!(m.col(1), &[1]);
    }

    #[test]
    fn single_event_and_empty() {
        let m = build_incidence(&[ev("a", "b")]).unwrap();
        assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (1, 1, 1));
        assert!(matches!(build_incidence(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn ceil_threshold_boundaries() {
        assert_eq!(min_influencer_degree(0.001, 1000), 1);
        assert_eq!(min_influencer_degree(0.002, 1000), 2);
        assert_eq!(min_influencer_degree(0.001, 10_000), 10);
        assert_eq!(min_influencer_degree(0.001, 1500), 2);
    }

    #[test]
    fn threshold_keeps_single_retweeter_at_one_per_mille() {
        let mut events: Vec<_> = (0..1000).map(|i| ev(&format!("u{i:04}"), "popular")).collect();
        events.push(ev("u0000", "niche"));
        let m = build_incidence(&events).unwrap();
        let t = threshold_influencers(&m, 0.001).unwrap();
        assert_eq!(t.n_cols(), 2);
        let t = threshold_influencers(&m, 0.002).unwrap();
        assert_eq!(t.col_ids(), &["popular".to_string()]);
        assert_eq!(t.n_rows(), 1000);
    }

    #[test]
    fn threshold_removing_everything_is_degenerate() {
        let m = build_incidence(&[ev("a", "x"), ev("b", "y")]).unwrap();
        assert!(matches!(threshold_influencers(&m, 0.9), Err(Error::Degenerate(_))));
        assert!(matches!(threshold_influencers(&m, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn rows_outside_column_set_are_zero_rows() {
        let m = build_with_columns(&[ev("a", "x"), ev("b", "z")], &["x".into()]).unwrap();
        assert_eq!(m.row_ids(), &["a".to_string(), "b".to_string()]);
        assert!(m.row(1).is_empty());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = build_incidence(&[ev("u1", "v1"), ev("u1", "v1"), ev("u2", "v2"), ev("u2", "v1")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        m.save(&base).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.mtx")).unwrap();
        assert_eq!(text, "rows=2 cols=2 nnz=3\n0 0 2\n1 0 1\n1 1 1\n");
        let back = IncidenceMatrix::load(&base).unwrap();
        assert_eq!(back, m);
        back.save(&dir.path().join("again")).unwrap();
        let again = std::fs::read(dir.path().join("again.mtx")).unwrap();
        assert_eq!(again, text.as_bytes());
    }

    #[test]
    fn rejects_bad_triples() {
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        assert!(IncidenceMatrix::from_triples(ids(2), ids(2), vec![(0, 0, 1), (0, 0, 2)]).is_err());
        assert!(IncidenceMatrix::from_triples(ids(2), ids(2), vec![(2, 0, 1)]).is_err());
        assert!(IncidenceMatrix::from_triples(vec!["a".into(), "a".into()], ids(1), vec![]).is_err());
    }

    #[test]
    fn combine_sums_counts() {
        let a = build_incidence(&[ev("u", "x"), ev("v", "y")]).unwrap();
        let b = build_incidence(&[ev("u", "x"), ev("w", "z")]).unwrap();
        let c = combine(&[&a, &b]).unwrap();
        assert_eq!(c.n_rows(), 3);
        assert_eq!(c.n_cols(), 3);
        assert_eq!(c.count(c.row_index("u").unwrap(), c.col_index("x").unwrap()), 2);
    }
}
