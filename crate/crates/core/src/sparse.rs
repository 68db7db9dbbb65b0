//! Sparse matrices, constrained linear systems and their solvers.
//!
//! Systems up to [`SolverOptions::direct_max_dim`] unknowns are factorised with a sparse
//! LU; larger ones use BiCGSTAB with a Jacobi preconditioner. Either way the returned
//! solution is checked against the original system with one extra product.

use std::io::{self, Write};

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinAlgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, values }
    }
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let row = |i: usize| -> f64 {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            s
        };
        if self.nrows > 20_000 {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = row(i);
            }
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        d
    }

    fn triplets(&self) -> Vec<Triplet<usize, usize, f64>> {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push(Triplet::new(i, j, v));
            }
        }
        t
    }

    /// True when every row sums to zero, i.e. constants lie in the kernel.
    fn annihilates_constants(&self) -> bool {
        (0..self.nrows).all(|i| {
            let (mut s, mut a) = (0.0, 0.0);
            for (_, v) in self.row(i) {
                s += v;
                a += v.abs();
            }
            s.abs() <= 1e-12 * a.max(f64::MIN_POSITIVE)
        })
    }

    /// Writes the matrix in coordinate format (1-based indices), one entry per line.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Side condition closing a linear system.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    None,
    /// `sum_i weights[i] x[i] = 0`, imposed with a Lagrange multiplier.
    ZeroMean { weights: Vec<f64> },
    /// Rows of `dofs` are replaced by identity rows with the given values.
    Dirichlet { dofs: Vec<usize>, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Direct,
    Bicgstab,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target of the iterative solver.
    pub tol: f64,
    /// Iteration cap; `None` means ten times the dimension.
    pub max_iter: Option<usize>,
    /// Largest dimension solved with the direct factorisation.
    pub direct_max_dim: usize,
    /// Relative residual the post-solve check accepts.
    pub check_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: None, direct_max_dim: 20_000, check_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub method: Method,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` of the constrained system.
    pub residual: f64,
    /// Lagrange multiplier of a zero-mean constraint (zero otherwise).
    pub multiplier: f64,
}

enum Backend {
    Direct(Box<Lu<usize, f64>>),
    Iterative { inv_diag: Vec<f64> },
}

/// A constrained system prepared for repeated solves with different right-hand sides.
pub struct PreparedSystem {
    matrix: CsrMatrix,
    n: usize,
    constraint: Constraint,
    backend: Backend,
    opts: SolverOptions,
}

impl std::fmt::Debug for PreparedSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedSystem").field("n", &self.n).field("method", &self.method()).finish()
    }
}

impl PreparedSystem {
    pub fn new(a: &CsrMatrix, constraint: Constraint, opts: SolverOptions) -> Result<Self, LinAlgError> {
        let n = a.nrows;
        if a.ncols != n {
            return Err(LinAlgError::DimensionMismatch { expected: n, got: a.ncols });
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(LinAlgError::NonFinite("matrix"));
        }
        let matrix = match &constraint {
            Constraint::None => {
                if n > 0 && a.annihilates_constants() {
                    return Err(LinAlgError::Singular(
                        "constants are in the kernel; a zero-mean constraint is required".into(),
                    ));
                }
                a.clone()
            }
            Constraint::ZeroMean { weights } => {
                if weights.len() != n {
                    return Err(LinAlgError::DimensionMismatch { expected: n, got: weights.len() });
                }
                let mut b = TripletBuilder::with_capacity(n + 1, n + 1, a.nnz() + 2 * n);
                for i in 0..n {
                    for (j, v) in a.row(i) {
                        b.add(i, j, v);
                    }
                }
                for (i, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        b.add(i, n, w);
                        b.add(n, i, w);
                    }
                }
                b.build()
            }
            Constraint::Dirichlet { dofs, values } => {
                if dofs.len() != values.len() {
                    return Err(LinAlgError::DimensionMismatch { expected: dofs.len(), got: values.len() });
                }
                let mut fixed = vec![false; n];
                for &d in dofs {
                    if d >= n {
                        return Err(LinAlgError::DimensionMismatch { expected: n, got: d + 1 });
                    }
                    fixed[d] = true;
                }
                let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
                for i in 0..n {
                    if fixed[i] {
                        b.add(i, i, 1.0);
                    } else {
                        for (j, v) in a.row(i) {
                            b.add(i, j, v);
                        }
                    }
                }
                b.build()
            }
        };
        let dim = matrix.nrows;
        let backend = if dim <= opts.direct_max_dim {
            let sp = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &matrix.triplets())
                .map_err(|e| LinAlgError::Singular(format!("assembly: {e:?}")))?;
            let lu = sp.sp_lu().map_err(|e| LinAlgError::Singular(format!("LU factorisation failed: {e:?}")))?;
            Backend::Direct(Box::new(lu))
        } else {
            let inv_diag = matrix
                .diagonal()
                .iter()
                .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
                .collect();
            Backend::Iterative { inv_diag }
        };
        Ok(Self { matrix, n, constraint, backend, opts })
    }

    pub fn method(&self) -> Method {
        match self.backend {
            Backend::Direct(_) => Method::Direct,
            Backend::Iterative { .. } => Method::Bicgstab,
        }
    }

    /// Dimension of the unconstrained unknown.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// The matrix actually solved (bordered or with identity rows).
    pub fn system_matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Solves for `rhs`, optionally warm-starting the iterative solver from `guess`.
    pub fn solve(&self, rhs: &[f64], guess: Option<&[f64]>) -> Result<(Vec<f64>, SolveReport), LinAlgError> {
        let n = self.n;
        if rhs.len() != n {
            return Err(LinAlgError::DimensionMismatch { expected: n, got: rhs.len() });
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(LinAlgError::NonFinite("right-hand side"));
        }
        let mut b = rhs.to_vec();
        match &self.constraint {
            Constraint::ZeroMean { .. } => b.push(0.0),
            Constraint::Dirichlet { dofs, values } => {
                for (&d, &v) in dofs.iter().zip(values) {
                    b[d] = v;
                }
            }
            Constraint::None => {}
        }
        let dim = b.len();
        let (x, iterations) = match &self.backend {
            Backend::Direct(lu) => {
                let rhs_mat = faer::Mat::<f64>::from_fn(dim, 1, |i, _| b[i]);
                let sol = lu.solve(&rhs_mat);
                ((0..dim).map(|i| sol[(i, 0)]).collect::<Vec<_>>(), 0)
            }
            Backend::Iterative { inv_diag } => {
                let mut x0 = vec![0.0; dim];
                if let Some(g) = guess {
                    let m = g.len().min(dim);
                    x0[..m].copy_from_slice(&g[..m]);
                }
                let max_iter = self.opts.max_iter.unwrap_or(10 * dim);
                bicgstab(&self.matrix, &b, x0, inv_diag, self.opts.tol, max_iter)?
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinAlgError::Singular("solution contains non-finite values".into()));
        }
        let residual = relative_residual(&self.matrix, &x, &b);
        let limit = match self.backend {
            Backend::Direct(_) => self.opts.check_tol,
            Backend::Iterative { .. } => self.opts.check_tol.max(10.0 * self.opts.tol),
        };
        if residual > limit {
            return Err(match self.backend {
                Backend::Direct(_) => LinAlgError::Singular(format!("post-solve residual {residual:e}")),
                Backend::Iterative { .. } => LinAlgError::NotConverged { iterations, residual },
            });
        }
        let multiplier = if matches!(self.constraint, Constraint::ZeroMean { .. }) { x[n] } else { 0.0 };
        let method = self.method();
        let mut x = x;
        x.truncate(n);
        Ok((x, SolveReport { method, iterations, residual, multiplier }))
    }
}

/// One-shot solve of `A x = b` under `constraint`.
pub fn solve(
    a: &CsrMatrix,
    rhs: &[f64],
    constraint: Constraint,
    opts: SolverOptions,
) -> Result<(Vec<f64>, SolveReport), LinAlgError> {
    PreparedSystem::new(a, constraint, opts)?.solve(rhs, None)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() > 20_000 {
        a.par_iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let nb = norm(b);
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

/// Jacobi-preconditioned BiCGSTAB. Returns the iterate and the iteration count.
fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    mut x: Vec<f64>,
    inv_diag: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize), LinAlgError> {
    let n = b.len();
    let nb = norm(b);
    if nb == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut r = a.mul(&x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if norm(&r) / nb <= tol {
        return Ok((x, 0));
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = norm(&r) / nb;
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // Breakdown: restart the shadow residual.
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.matvec(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / nb <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.matvec(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / nb;
        if !res.is_finite() {
            return Err(LinAlgError::NonFinite("BiCGSTAB iterate"));
        }
        if res <= tol {
            return Ok((x, it));
        }
    }
    Err(LinAlgError::NotConverged { iterations: max_iter, residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.0 + shift);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
            }
        }
        b.build()
    }

    fn periodic_laplacian(n: usize) -> CsrMatrix {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.0);
            b.add(i, (i + n - 1) % n, -1.0);
            b.add(i, (i + 1) % n, -1.0);
        }
        b.build()
    }

    fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Vec<f64> {
        let d = a.to_dense();
        let m = DMatrix::from_fn(a.nrows, a.ncols, |i, j| d[i][j]);
        m.lu().solve(&DVector::from_column_slice(b)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut b = TripletBuilder::new(2, 2);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.0);
        b.add(1, 0, -1.0);
        let m = b.build();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.mul(&[1.0, 1.0]), vec![3.0, -1.0]);
    }

    #[test]
    fn neumann_laplacian_needs_constraint() {
        let a = periodic_laplacian(10);
        let rhs = vec![0.0; 10];
        assert!(matches!(solve(&a, &rhs, Constraint::None, SolverOptions::default()), Err(LinAlgError::Singular(_))));
    }

    #[test]
    fn zero_mean_bordered_solve() {
        let n = 40;
        let a = periodic_laplacian(n);
        let rhs: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin()).collect();
        let w = vec![1.0 / n as f64; n];
        let (x, rep) = solve(&a, &rhs, Constraint::ZeroMean { weights: w.clone() }, SolverOptions::default()).unwrap();
        let mean: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!(mean.abs() < 1e-12);
        assert!(rep.multiplier.abs() < 1e-12);
        let r = a.mul(&x);
        for i in 0..n {
            assert!((r[i] - rhs[i]).abs() < 1e-10);
        }
        // An incompatible load shows up in the multiplier: 1^T A = 0 so lambda = sum(b) / sum(w).
        let shifted: Vec<f64> = rhs.iter().map(|v| v + 0.5).collect();
        let (_, rep) = solve(&a, &shifted, Constraint::ZeroMean { weights: w }, SolverOptions::default()).unwrap();
        assert!((rep.multiplier - 0.5 * n as f64).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_rows() {
        let a = laplacian_1d(5, 0.0);
        let (x, _) = solve(
            &a,
            &[0.0; 5],
            Constraint::Dirichlet { dofs: vec![0, 4], values: vec![1.0, 5.0] },
            SolverOptions::default(),
        )
        .unwrap();
        for (i, v) in x.iter().enumerate() {
            assert!((v - (i as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bicgstab_matches_direct() {
        let n = 300;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 4.0);
            if i > 0 {
                b.add(i, i - 1, -1.5);
            }
            if i + 1 < n {
                b.add(i, i + 1, -0.5);
            }
            if i + 17 < n {
                b.add(i, i + 17, -0.7);
            }
        }
        let a = b.build();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let direct = solve(&a, &rhs, Constraint::None, SolverOptions::default()).unwrap().0;
        let opts = SolverOptions { direct_max_dim: 0, ..Default::default() };
        let (it, rep) = solve(&a, &rhs, Constraint::None, opts).unwrap();
        assert_eq!(rep.method, Method::Bicgstab);
        assert!(rep.iterations > 0);
        for i in 0..n {
            assert!((it[i] - direct[i]).abs() < 1e-8);
        }
        // Warm start from the solution converges immediately.
        let prepared = PreparedSystem::new(&a, Constraint::None, opts).unwrap();
        let (_, rep) = prepared.solve(&rhs, Some(&direct)).unwrap();
        assert!(rep.iterations <= 1);
    }

    #[test]
    fn bicgstab_on_bordered_system() {
        let n = 64;
        let a = periodic_laplacian(n);
        let rhs: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        let w = vec![1.0; n];
        let opts = SolverOptions { direct_max_dim: 0, ..Default::default() };
        let (x, _) = solve(&a, &rhs, Constraint::ZeroMean { weights: w.clone() }, opts).unwrap();
        let (y, _) = solve(&a, &rhs, Constraint::ZeroMean { weights: w }, SolverOptions::default()).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn coordinate_dump() {
        let a = laplacian_1d(3, 0.0);
        let mut out = Vec::new();
        a.write_coordinate(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("%%MatrixMarket"));
        assert_eq!(s.lines().count(), 2 + 7);
    }

    proptest! {
        #[test]
        fn direct_matches_dense_oracle(n in 2usize..25, seed in 0u64..1000) {
            let mut b = TripletBuilder::new(n, n);
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            };
            for i in 0..n {
                b.add(i, i, n as f64);
                for _ in 0..3 {
                    let j = ((next() + 0.5) * n as f64) as usize % n;
                    b.add(i, j, next());
                }
            }
            let a = b.build();
            let rhs: Vec<f64> = (0..n).map(|_| next()).collect();
            let (x, rep) = solve(&a, &rhs, Constraint::None, SolverOptions::default()).unwrap();
            let oracle = dense_solve(&a, &rhs);
            prop_assert!(rep.residual < 1e-12);
            for i in 0..n {
                prop_assert!((x[i] - oracle[i]).abs() < 1e-10 * (1.0 + oracle[i].abs()));
            }
        }
    }
}
