//! Centered truncated principal components.
//!
//! Inputs are either sparse binary incidence matrices or dense score tables.
//! Centering never materialises the centered matrix: the covariance operator
//! is applied as `(X - 1 m^T)^T (X - 1 m^T) V / (n - 1)` with the mean
//! correction folded into the products.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::IncidenceMatrix;
use crate::parallel;

/// Anything the covariance operator can be applied to.
pub trait DataMatrix: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn col_means(&self) -> DVector<f64>;
    /// Sample variances (denominator `n - 1`) given the column means.
    fn col_variances(&self, means: &DVector<f64>) -> Vec<f64>;
    /// `X * v` for a `n_cols x b` block.
    fn mul(&self, v: &DMatrix<f64>) -> DMatrix<f64>;
    /// `X^T * y` for a `n_rows x b` block.
    fn tmul(&self, y: &DMatrix<f64>) -> DMatrix<f64>;
}

impl DataMatrix for IncidenceMatrix {
    fn n_rows(&self) -> usize {
        IncidenceMatrix::n_rows(self)
    }

    fn n_cols(&self) -> usize {
        IncidenceMatrix::n_cols(self)
    }

    fn col_means(&self) -> DVector<f64> {
        let n = IncidenceMatrix::n_rows(self) as f64;
        DVector::from_fn(IncidenceMatrix::n_cols(self), |c, _| self.col_degree(c) as f64 / n)
    }

    fn col_variances(&self, means: &DVector<f64>) -> Vec<f64> {
        let n = IncidenceMatrix::n_rows(self) as f64;
        (0..IncidenceMatrix::n_cols(self))
            .map(|c| {
                let deg = self.col_degree(c) as f64;
                let m = means[c];
                // sum of (x - m)^2 over deg ones and n - deg zeros
                (deg * (1.0 - m) * (1.0 - m) + (n - deg) * m * m) / (n - 1.0)
            })
            .collect()
    }

    fn mul(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let b = v.ncols();
        let rows = parallel::map_range(IncidenceMatrix::n_rows(self), |r| {
            let mut acc = vec![0.0; b];
            for &c in self.row(r) {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += v[(c, j)];
                }
            }
            acc
        });
        DMatrix::from_fn(rows.len(), b, |i, j| rows[i][j])
    }

    fn tmul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let b = y.ncols();
        let cols = parallel::map_range(IncidenceMatrix::n_cols(self), |c| {
            let mut acc = vec![0.0; b];
            for &r in self.col(c) {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += y[(r, j)];
                }
            }
            acc
        });
        DMatrix::from_fn(cols.len(), b, |i, j| cols[i][j])
    }
}

impl DataMatrix for DMatrix<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_cols(&self) -> usize {
        self.ncols()
    }

    fn col_means(&self) -> DVector<f64> {
        let n = self.nrows() as f64;
        DVector::from_fn(self.ncols(), |c, _| self.column(c).sum() / n)
    }

    fn col_variances(&self, means: &DVector<f64>) -> Vec<f64> {
        let n = self.nrows() as f64;
        (0..self.ncols())
            .map(|c| {
                let m = means[c];
                self.column(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
            })
            .collect()
    }

    fn mul(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self * v
    }

    fn tmul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(y)
    }
}

/// Where a model or score table sits in the window/sample/common hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Window { sample_id: String, window_index: usize },
    Sample { sample_id: String },
    Common,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Window {
                sample_id,
                window_index,
            } => write!(f, "window:{sample_id}:{window_index}"),
            Provenance::Sample { sample_id } => write!(f, "sample:{sample_id}"),
            Provenance::Common => f.write_str("common"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad provenance {s:?}"));
        if s == "common" {
            return Ok(Provenance::Common);
        }
        if let Some(rest) = s.strip_prefix("sample:") {
            return Ok(Provenance::Sample {
                sample_id: rest.to_string(),
            });
        }
        if let Some(rest) = s.strip_prefix("window:") {
            let (sample, idx) = rest.rsplit_once(':').ok_or_else(bad)?;
            return Ok(Provenance::Window {
                sample_id: sample.to_string(),
                window_index: idx.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

impl Provenance {
    /// Stable label of the `k`-th (0-based) component: `<provenance>/PC<k+1>`.
    pub fn pc_label(&self, k: usize) -> String {
        format!("{self}/PC{}", k + 1)
    }
}

#[derive(Debug, Clone)]
pub struct PcaOptions {
    pub max_components: usize,
    pub seed: u64,
    /// Residual bound relative to the largest eigenvalue.
    pub tol: f64,
    pub oversample: usize,
    pub min_iters: usize,
    pub max_iters: usize,
}

impl PcaOptions {
    pub fn new(max_components: usize, seed: u64) -> Self {
        PcaOptions {
            max_components,
            seed,
            tol: 1e-11,
            oversample: 10,
            min_iters: 2,
            max_iters: 3000,
        }
    }
}

/// A fitted principal component model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub means: DVector<f64>,
    /// Per-column divisors when the input was standardized before fitting.
    pub scales: Option<DVector<f64>>,
    /// `n_cols x k`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// Eigenvalues of the covariance, non-increasing.
    pub variances: Vec<f64>,
    pub total_variance: f64,
    pub provenance: Provenance,
    pub col_labels: Vec<String>,
    pub seed: u64,
    pub n_obs: usize,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n_cols(&self) -> usize {
        self.means.len()
    }

    pub fn pc_labels(&self) -> Vec<String> {
        (0..self.n_components()).map(|k| self.provenance.pc_label(k)).collect()
    }

    pub fn explained_fraction(&self) -> f64 {
        self.variances.iter().sum::<f64>() / self.total_variance
    }

    /// Attaches provenance and column labels.
    pub fn labeled(mut self, provenance: Provenance, col_labels: Vec<String>) -> Result<Self> {
        if col_labels.len() != self.n_cols() {
            return Err(Error::Shape(format!(
                "{} labels for {} columns",
                col_labels.len(),
                self.n_cols()
            )));
        }
        self.provenance = provenance;
        self.col_labels = col_labels;
        Ok(self)
    }

    /// Keeps the first `k` components.
    pub fn truncate(&mut self, k: usize) {
        let k = k.min(self.n_components()).max(1);
        self.loadings = self.loadings.columns(0, k).into_owned();
        self.variances.truncate(k);
    }

    /// Loadings divided row-wise by the column scales (the linear map applied
    /// to uncentered, unscaled input).
    pub fn effective_loadings(&self) -> DMatrix<f64> {
        match &self.scales {
            None => self.loadings.clone(),
            Some(s) => {
                let mut l = self.loadings.clone();
                for (i, mut row) in l.row_iter_mut().enumerate() {
                    row /= s[i];
                }
                l
            }
        }
    }

    /// Score of one dense input row.
    pub fn transform_row(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_cols() {
            return Err(Error::Shape(format!(
                "row has {} values, model expects {}",
                x.len(),
                self.n_cols()
            )));
        }
        let mut centered = DVector::from_fn(x.len(), |i, _| x[i] - self.means[i]);
        if let Some(s) = &self.scales {
            centered.component_div_assign(s);
        }
        Ok(self.loadings.tr_mul(&centered))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stance-pca-model 1")?;
        writeln!(w, "provenance={}", self.provenance)?;
        writeln!(w, "n_cols={}", self.n_cols())?;
        writeln!(w, "n_components={}", self.n_components())?;
        writeln!(w, "n_obs={}", self.n_obs)?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "standardized={}", u8::from(self.scales.is_some()))?;
        writeln!(w, "labels:")?;
        for l in &self.col_labels {
            writeln!(w, "{l}")?;
        }
        writeln!(w, "end")?;
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        for &m in self.means.iter() {
            put(m)?;
        }
        // nalgebra storage is column-major already
        for &l in self.loadings.as_slice() {
            put(l)?;
        }
        for &v in &self.variances {
            put(v)?;
        }
        put(self.total_variance)?;
        if let Some(s) = &self.scales {
            for &x in s.iter() {
                put(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<PcaModel> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| Error::io("<model>", e))?;
            if n == 0 {
                return Err(Error::Parse("model header truncated".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != "stance-pca-model 1" {
            return Err(Error::Parse("not a stance PCA model file".into()));
        }
        let mut kv = HashMap::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "labels:" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad model header line {l:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get =
            |k: &str| -> Result<&String> { kv.get(k).ok_or_else(|| Error::Parse(format!("model header lacks {k}"))) };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad model header value for {k}")))
        };
        let provenance: Provenance = get("provenance")?.parse()?;
        let p = num("n_cols")? as usize;
        let k = num("n_components")? as usize;
        let n_obs = num("n_obs")? as usize;
        let seed = num("seed")?;
        let standardized = num("standardized")? == 1;
        let mut col_labels = Vec::with_capacity(p);
        loop {
            let l = next_line(&mut r)?;
            if l == "end" && col_labels.len() == p {
                break;
            }
            col_labels.push(l);
            if col_labels.len() > p {
                return Err(Error::Parse("model label list longer than n_cols".into()));
            }
        }
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf).map_err(|e| Error::io("<model body>", e))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let means = DVector::from_vec(take(p)?);
        let loadings = DMatrix::from_vec(p, k, take(p * k)?);
        let variances = take(k)?;
        let total_variance = take(1)?[0];
        let scales = if standardized {
            Some(DVector::from_vec(take(p)?))
        } else {
            None
        };
        Ok(PcaModel {
            means,
            scales,
            loadings,
            variances,
            total_variance,
            provenance,
            col_labels,
            seed,
            n_obs,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<PcaModel> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f).map_err(|e| e.in_stage("load-model", path))
    }
}

/// Dense user x component scores keyed by user id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub user_ids: Vec<String>,
    pub scores: DMatrix<f64>,
    pub provenance: Provenance,
    pub pc_labels: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ScoreMatrix {
    pub fn new(
        user_ids: Vec<String>,
        scores: DMatrix<f64>,
        provenance: Provenance,
        pc_labels: Vec<String>,
    ) -> Result<Self> {
        if user_ids.len() != scores.nrows() {
            return Err(Error::Shape(format!(
                "{} user ids for {} score rows",
                user_ids.len(),
                scores.nrows()
            )));
        }
        if pc_labels.len() != scores.ncols() {
            return Err(Error::Shape(format!(
                "{} labels for {} score columns",
                pc_labels.len(),
                scores.ncols()
            )));
        }
        let mut lookup = HashMap::with_capacity(user_ids.len());
        for (i, u) in user_ids.iter().enumerate() {
            if lookup.insert(u.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate user {u:?} in score matrix")));
            }
        }
        Ok(ScoreMatrix {
            user_ids,
            scores,
            provenance,
            pc_labels,
            lookup,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    pub fn index_of(&self, user: &str) -> Option<usize> {
        self.lookup.get(user).copied()
    }

    pub fn row_of(&self, user: &str) -> Option<Vec<f64>> {
        self.index_of(user)
            .map(|i| self.scores.row(i).iter().copied().collect())
    }

    /// Rows for the given users, in that order.
    pub fn select_users(&self, users: &[String]) -> Result<ScoreMatrix> {
        let idx: Vec<usize> = users
            .iter()
            .map(|u| {
                self.index_of(u)
                    .ok_or_else(|| Error::Integrity(format!("user {u:?} has no scores")))
            })
            .collect::<Result<_>>()?;
        let scores = DMatrix::from_fn(idx.len(), self.n_components(), |i, j| self.scores[(idx[i], j)]);
        ScoreMatrix::new(users.to_vec(), scores, self.provenance.clone(), self.pc_labels.clone())
    }

    /// CSV with header `user_id,<pc_label>...`. Values use the shortest
    /// representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["user_id".to_string()];
        header.extend(self.pc_labels.iter().cloned());
        wr.write_record(&header)?;
        for (i, u) in self.user_ids.iter().enumerate() {
            let mut rec = vec![u.clone()];
            rec.extend(self.scores.row(i).iter().map(|x| format!("{x:?}")));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<scores>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, provenance: Provenance) -> Result<ScoreMatrix> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("user_id") {
            return Err(Error::Parse("scores csv must start with user_id".into()));
        }
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut users = Vec::new();
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            users.push(rec.get(0).unwrap_or_default().to_string());
            for v in rec.iter().skip(1) {
                values.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad score value {v:?}")))?,
                );
            }
        }
        let k = labels.len();
        if values.len() != users.len() * k {
            return Err(Error::Shape("ragged scores csv".into()));
        }
        let scores = DMatrix::from_row_slice(users.len(), k, &values);
        ScoreMatrix::new(users, scores, provenance, labels)
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &std::path::Path, provenance: Provenance) -> Result<ScoreMatrix> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, provenance).map_err(|e| e.in_stage("load-scores", path))
    }
}

/// Applies the centered covariance operator to a block `v` (`p x b`).
fn apply_covariance<M: DataMatrix + ?Sized>(
    m: &M,
    means: &DVector<f64>,
    scales: Option<&DVector<f64>>,
    v: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = m.n_rows();
    let scaled;
    let v = match scales {
        Some(s) => {
            let mut t = v.clone();
            for (i, mut row) in t.row_iter_mut().enumerate() {
                row /= s[i];
            }
            scaled = t;
            &scaled
        }
        None => v,
    };
    // y = (X - 1 m^T) v
    let mut y = m.mul(v);
    let shift = v.tr_mul(means);
    for j in 0..y.ncols() {
        let s = shift[j];
        y.column_mut(j).add_scalar_mut(-s);
    }
    // z = (X - 1 m^T)^T y
    let mut z = m.tmul(&y);
    let col_sums: Vec<f64> = (0..y.ncols()).map(|j| y.column(j).sum()).collect();
    for j in 0..z.ncols() {
        let cs = col_sums[j];
        for i in 0..z.nrows() {
            z[(i, j)] -= means[i] * cs;
        }
    }
    if let Some(s) = scales {
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row /= s[i];
        }
    }
    z / (n as f64 - 1.0)
}

/// Eigenpairs of a symmetric matrix, sorted by decreasing eigenvalue.
fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (&h + h.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

fn orthonormalize(z: DMatrix<f64>) -> DMatrix<f64> {
    nalgebra::linalg::QR::new(z).q()
}

/// Result of the eigensolver before rank truncation.
struct EigenBlock {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

fn exact_eigen<M: DataMatrix + ?Sized>(m: &M, means: &DVector<f64>, scales: Option<&DVector<f64>>) -> EigenBlock {
    let p = m.n_cols();
    let cov = apply_covariance(m, means, scales, &DMatrix::identity(p, p));
    let (values, vectors) = sorted_eigen(cov);
    EigenBlock { values, vectors }
}

fn subspace_eigen<M: DataMatrix + ?Sized>(
    m: &M,
    means: &DVector<f64>,
    scales: Option<&DVector<f64>>,
    k: usize,
    opts: &PcaOptions,
) -> Result<EigenBlock> {
    let p = m.n_cols();
    let b = (k + opts.oversample).min(p);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = DMatrix::from_fn(p, b, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(start);
    let mut last_residual = f64::INFINITY;
    for iter in 1..=opts.max_iters {
        let z = apply_covariance(m, means, scales, &q);
        let h = q.tr_mul(&z);
        let (theta, s) = sorted_eigen(h);
        let vectors = &q * &s;
        let az = &z * &s;
        let scale = theta[0].abs().max(f64::MIN_POSITIVE);
        let worst = (0..k)
            .map(|i| (az.column(i) - vectors.column(i) * theta[i]).norm())
            .fold(0.0f64, f64::max);
        last_residual = worst / scale;
        if iter >= opts.min_iters && last_residual <= opts.tol {
            return Ok(EigenBlock { values: theta, vectors });
        }
        q = orthonormalize(az);
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        residual: last_residual,
    })
}

/// Largest dense covariance the solver falls back to when subspace
/// iteration stalls.
const DENSE_FALLBACK_LIMIT: usize = 2048;

/// Relative eigenvalue below which a direction counts as null.
const RANK_TOL: f64 = 1e-10;

fn fit_impl<M: DataMatrix + ?Sized>(
    m: &M,
    means: DVector<f64>,
    scales: Option<DVector<f64>>,
    total_variance: f64,
    opts: &PcaOptions,
) -> Result<PcaModel> {
    let (n, p) = (m.n_rows(), m.n_cols());
    let k = opts.max_components;
    let block = (k + opts.oversample).min(p);
    let eig = if block >= p {
        exact_eigen(m, &means, scales.as_ref())
    } else {
        match subspace_eigen(m, &means, scales.as_ref(), k, opts) {
            Ok(e) => e,
            Err(Error::NotConverged { residual, .. }) if p <= DENSE_FALLBACK_LIMIT => {
                log::warn!("stage=pca event=dense_fallback cols={p} residual={residual:e}");
                exact_eigen(m, &means, scales.as_ref())
            }
            Err(e) => return Err(e),
        }
    };
    let floor = RANK_TOL * total_variance;
    let rank = eig.values.iter().take_while(|&&v| v > floor).count();
    if rank == 0 {
        return Err(Error::Degenerate("covariance has rank 0".into()));
    }
    let kept = k.min(rank);
    let mut loadings = eig.vectors.columns(0, kept).into_owned();
    apply_sign_convention(&mut loadings);
    let variances = eig.values[..kept].iter().map(|&v| v.max(0.0)).collect();
    Ok(PcaModel {
        means,
        scales,
        loadings,
        variances,
        total_variance,
        provenance: Provenance::Common,
        col_labels: (0..p).map(|j| format!("col{j}")).collect(),
        seed: opts.seed,
        n_obs: n,
    })
}

fn check_shape<M: DataMatrix + ?Sized>(m: &M, opts: &PcaOptions) -> Result<()> {
    let (n, p) = (m.n_rows(), m.n_cols());
    if n < 2 || p < 1 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 rows and 1 column, got {n}x{p}"
        )));
    }
    let cap = (n - 1).min(p);
    if opts.max_components == 0 || opts.max_components > cap {
        return Err(Error::Config(format!(
            "max_components {} outside [1, {cap}] for a {n}x{p} matrix",
            opts.max_components
        )));
    }
    Ok(())
}

/// Fits up to `opts.max_components` principal components of the
/// column-centered matrix. Fewer are kept when the covariance rank is lower.
pub fn fit_pca<M: DataMatrix + ?Sized>(m: &M, opts: &PcaOptions) -> Result<PcaModel> {
    check_shape(m, opts)?;
    let means = m.col_means();
    let total: f64 = m.col_variances(&means).iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all columns are constant".into()));
    }
    fit_impl(m, means, None, total, opts)
}

/// Like [`fit_pca`] on the z-scored columns. Constant columns keep scale 1.
pub fn fit_pca_standardized<M: DataMatrix + ?Sized>(m: &M, opts: &PcaOptions) -> Result<PcaModel> {
    check_shape(m, opts)?;
    let means = m.col_means();
    let vars = m.col_variances(&means);
    let scales = DVector::from_iterator(vars.len(), vars.iter().map(|&v| if v > 0.0 { v.sqrt() } else { 1.0 }));
    let total = vars.iter().filter(|&&v| v > 0.0).count() as f64;
    if total == 0.0 {
        return Err(Error::Degenerate("all columns are constant".into()));
    }
    fit_impl(m, means, Some(scales), total, opts)
}

/// Flips each loading column so its largest-magnitude entry is positive
/// (first such entry on ties).
pub fn apply_sign_convention(loadings: &mut DMatrix<f64>) {
    for mut col in loadings.column_iter_mut() {
        let mut best = 0usize;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Scores of `m`'s rows: `(X - 1 m^T) L`, row-scaled when standardized.
pub fn transform<M: DataMatrix + ?Sized>(model: &PcaModel, m: &M, user_ids: Vec<String>) -> Result<ScoreMatrix> {
    if m.n_cols() != model.n_cols() {
        return Err(Error::Shape(format!(
            "matrix has {} columns, model expects {}",
            m.n_cols(),
            model.n_cols()
        )));
    }
    if m.n_rows() != user_ids.len() {
        return Err(Error::Shape(format!(
            "{} user ids for {} rows",
            user_ids.len(),
            m.n_rows()
        )));
    }
    let l = model.effective_loadings();
    let mut scores = m.mul(&l);
    let shift = l.tr_mul(&model.means);
    for j in 0..scores.ncols() {
        scores.column_mut(j).add_scalar_mut(-shift[j]);
    }
    ScoreMatrix::new(user_ids, scores, model.provenance.clone(), model.pc_labels())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSelection {
    pub k: usize,
    pub fraction: f64,
    /// All computed components together still fall short of the target.
    pub shortfall: bool,
}

/// Smallest `k` whose cumulative variance reaches `target` of the total.
pub fn select_by_variance(variances: &[f64], total_variance: f64, target: f64) -> VarianceSelection {
    let mut cum = 0.0;
    for (i, &v) in variances.iter().enumerate() {
        cum += v;
        // slack for summation rounding at target = 1.0
        if cum >= target * total_variance * (1.0 - 1e-12) {
            return VarianceSelection {
                k: i + 1,
                fraction: cum / total_variance,
                shortfall: false,
            };
        }
    }
    VarianceSelection {
        k: variances.len(),
        fraction: cum / total_variance,
        shortfall: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeSelection {
    pub k: usize,
    pub warning: Option<String>,
}

/// Elbow of a non-increasing spectrum: the number of components before the
/// point of maximum curvature `v[i-1] - 2 v[i] + v[i+1]`, ties going to the
/// smaller `k`.
pub fn scree_select(variances: &[f64]) -> ScreeSelection {
    let n = variances.len();
    if n < 3 {
        return ScreeSelection {
            k: n,
            warning: Some(format!("scree needs 3 variances, got {n}; keeping all")),
        };
    }
    let mut best = 1usize;
    let mut best_val = f64::NEG_INFINITY;
    for i in 1..n - 1 {
        let d = variances[i - 1] - 2.0 * variances[i] + variances[i + 1];
        if d > best_val {
            best_val = d;
            best = i;
        }
    }
    let warning = (best == 1).then(|| "weak elbow: curvature peaks at the first interior point".to_string());
    ScreeSelection { k: best, warning }
}

/// Fits enough components to reach `target` of the total variance, growing
/// the requested count geometrically, then truncates to the minimal `k`.
pub fn fit_to_variance<M: DataMatrix + ?Sized>(m: &M, target: f64, seed: u64) -> Result<(PcaModel, VarianceSelection)> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("variance target {target} outside (0, 1]")));
    }
    let cap = m.n_rows().saturating_sub(1).min(m.n_cols());
    let mut want = cap.min(32).max(1);
    loop {
        let model = fit_pca(m, &PcaOptions::new(want, seed))?;
        let sel = select_by_variance(&model.variances, model.total_variance, target);
        let rank_bound = model.n_components() < want;
        if !sel.shortfall || want >= cap || rank_bound {
            let mut model = model;
            model.truncate(sel.k);
            return Ok((model, sel));
        }
        want = (want * 2).min(cap);
    }
}
