//! Coefficient sets of the two-field system and their validation.
//!
//! The elliptic equation reads
//! `M V - div(E grad V + D V) = H + K U + eps J . grad U` on the perforated domain with
//! the conormal flux vanishing on holes, and the ODE `dU/dt + L U = G V` is posed
//! pointwise with `U(0) = U*`. Every entry is an [`Expr`] in `(t, x, y)`; `L`, `G` and
//! `U*` must not depend on `y`.
//!
//! Entries are addressed by keys such as `M.12`, `E.11`, `D.112` (direction first, then
//! the two component indices), `H.1` and `U.1`, all 1-based.

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::expr::{Expr, ExprError, Point, Var};

/// Spatial dimension.
pub const DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoefficientError {
    #[error("unknown coefficient key '{0}'")]
    UnknownKey(String),
    #[error("index out of range in key '{key}' (system size {n})")]
    IndexOutOfRange { key: String, n: usize },
    #[error("duplicate coefficient key '{0}'")]
    DuplicateKey(String),
    #[error("missing required diagonal entry '{0}'")]
    MissingDiagonal(String),
    #[error("cannot parse '{key}': {source}")]
    Parse { key: String, source: ExprError },
    #[error("system size must be at least 1")]
    EmptySystem,
    #[error("invalid corrosion parameters: {0}")]
    InvalidCorrosion(String),
    #[error("malformed line {line}: {text}")]
    MalformedLine { line: usize, text: String },
}

/// Full coefficient description for a system of `n` species.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub n: usize,
    /// `M[a*n + b]`
    pub m: Vec<Expr>,
    /// `E[i*2 + j]`
    pub e: Vec<Expr>,
    /// `D[(i*n + a)*n + b]`
    pub d: Vec<Expr>,
    pub h: Vec<Expr>,
    pub k: Vec<Expr>,
    /// `J[(i*n + a)*n + b]`
    pub j: Vec<Expr>,
    pub l: Vec<Expr>,
    pub g: Vec<Expr>,
    /// Initial value `U*`.
    pub ustar: Vec<Expr>,
}

/// Flat index of a three-index tensor `(i, a, b)`.
#[inline]
pub fn idx3(n: usize, i: usize, a: usize, b: usize) -> usize {
    (i * n + a) * n + b
}

fn zeros(len: usize) -> Vec<Expr> {
    vec![Expr::zero(); len]
}

fn any_uses(exprs: &[Expr], f: impl Fn(&Expr) -> bool) -> bool {
    exprs.iter().any(f)
}

impl CoefficientSet {
    /// All-zero set of size `n` with `M = I` and `E = I`.
    pub fn identity(n: usize) -> Self {
        let mut m = zeros(n * n);
        for a in 0..n {
            m[a * n + a] = Expr::constant(1.0);
        }
        Self {
            n,
            m,
            e: vec![Expr::constant(1.0), Expr::zero(), Expr::zero(), Expr::constant(1.0)],
            d: zeros(DIM * n * n),
            h: zeros(n),
            k: zeros(n * n),
            j: zeros(DIM * n * n),
            l: zeros(n * n),
            g: zeros(n * n),
            ustar: zeros(n),
        }
    }

    /// Builds a set from `(key, expression)` pairs. Missing entries are zero except the
    /// diagonals of `M` and `E`, which must be present.
    pub fn from_entries<I, K, V>(n: usize, entries: I) -> Result<Self, CoefficientError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        if n == 0 {
            return Err(CoefficientError::EmptySystem);
        }
        let mut set = Self::identity(n);
        let mut seen = BTreeMap::new();
        for (key, value) in entries {
            let key = key.as_ref().trim().to_string();
            let expr = Expr::parse(value.as_ref()).map_err(|source| CoefficientError::Parse { key: key.clone(), source })?;
            let slot = set.slot_mut(&key)?;
            *slot = expr;
            if seen.insert(key.clone(), ()).is_some() {
                return Err(CoefficientError::DuplicateKey(key));
            }
        }
        for a in 1..=n {
            let key = format!("M.{a}{a}");
            if !seen.contains_key(&key) {
                return Err(CoefficientError::MissingDiagonal(key));
            }
        }
        for i in 1..=DIM {
            let key = format!("E.{i}{i}");
            if !seen.contains_key(&key) {
                return Err(CoefficientError::MissingDiagonal(key));
            }
        }
        Ok(set)
    }

    /// Parses the line format written by [`CoefficientSet::write_entries`]:
    /// `"KEY" = "EXPR"` per line (quotes optional), `#` comments, and an `n = <size>` line.
    pub fn parse_text(text: &str) -> Result<Self, CoefficientError> {
        let mut n = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CoefficientError::MalformedLine { line: lineno + 1, text: raw.to_string() });
            };
            let unquote = |s: &str| s.trim().trim_matches('"').to_string();
            let (k, v) = (unquote(k), unquote(v));
            if k == "n" {
                n = Some(v.parse::<usize>().map_err(|_| CoefficientError::MalformedLine { line: lineno + 1, text: raw.to_string() })?);
            } else {
                entries.push((k, v));
            }
        }
        Self::from_entries(n.unwrap_or(1), entries)
    }

    /// Writes every entry as `"KEY" = "EXPR"`, preceded by `n = <size>`.
    pub fn write_entries<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n = {}", self.n)?;
        for (k, e) in self.entries() {
            writeln!(w, "\"{k}\" = \"{e}\"")?;
        }
        Ok(())
    }

    /// All entries with their keys, in a fixed order.
    pub fn entries(&self) -> Vec<(String, &Expr)> {
        let n = self.n;
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                out.push((format!("M.{}{}", a + 1, b + 1), &self.m[a * n + b]));
            }
        }
        for i in 0..DIM {
            for j in 0..DIM {
                out.push((format!("E.{}{}", i + 1, j + 1), &self.e[i * DIM + j]));
            }
        }
        for i in 0..DIM {
            for a in 0..n {
                for b in 0..n {
                    out.push((format!("D.{}{}{}", i + 1, a + 1, b + 1), &self.d[idx3(n, i, a, b)]));
                }
            }
        }
        for a in 0..n {
            out.push((format!("H.{}", a + 1), &self.h[a]));
        }
        for a in 0..n {
            for b in 0..n {
                out.push((format!("K.{}{}", a + 1, b + 1), &self.k[a * n + b]));
            }
        }
        for i in 0..DIM {
            for a in 0..n {
                for b in 0..n {
                    out.push((format!("J.{}{}{}", i + 1, a + 1, b + 1), &self.j[idx3(n, i, a, b)]));
                }
            }
        }
        for (name, v) in [("L", &self.l), ("G", &self.g)] {
            for a in 0..n {
                for b in 0..n {
                    out.push((format!("{name}.{}{}", a + 1, b + 1), &v[a * n + b]));
                }
            }
        }
        for a in 0..n {
            out.push((format!("U.{}", a + 1), &self.ustar[a]));
        }
        out
    }

    fn slot_mut(&mut self, key: &str) -> Result<&mut Expr, CoefficientError> {
        let n = self.n;
        let (name, digits) = key.split_once('.').ok_or_else(|| CoefficientError::UnknownKey(key.into()))?;
        let idx: Option<Vec<usize>> = digits.chars().map(|c| c.to_digit(10).map(|d| d as usize)).collect();
        let idx = idx.ok_or_else(|| CoefficientError::UnknownKey(key.into()))?;
        let oor = || CoefficientError::IndexOutOfRange { key: key.into(), n };
        if idx.contains(&0) {
            return Err(oor());
        }
        let idx: Vec<usize> = idx.iter().map(|i| i - 1).collect();
        let pair = |lim: usize| -> Result<usize, CoefficientError> {
            if idx.len() != 2 {
                return Err(CoefficientError::UnknownKey(key.into()));
            }
            if idx[0] >= lim || idx[1] >= lim {
                return Err(oor());
            }
            Ok(idx[0] * lim + idx[1])
        };
        let triple = || -> Result<usize, CoefficientError> {
            if idx.len() != 3 {
                return Err(CoefficientError::UnknownKey(key.into()));
            }
            if idx[0] >= DIM || idx[1] >= n || idx[2] >= n {
                return Err(oor());
            }
            Ok(idx3(n, idx[0], idx[1], idx[2]))
        };
        let single = || -> Result<usize, CoefficientError> {
            if idx.len() != 1 {
                return Err(CoefficientError::UnknownKey(key.into()));
            }
            if idx[0] >= n {
                return Err(oor());
            }
            Ok(idx[0])
        };
        Ok(match name {
            "M" => {
                let i = pair(n)?;
                &mut self.m[i]
            }
            "E" => {
                let i = pair(DIM)?;
                &mut self.e[i]
            }
            "K" => {
                let i = pair(n)?;
                &mut self.k[i]
            }
            "L" => {
                let i = pair(n)?;
                &mut self.l[i]
            }
            "G" => {
                let i = pair(n)?;
                &mut self.g[i]
            }
            "D" => {
                let i = triple()?;
                &mut self.d[i]
            }
            "J" => {
                let i = triple()?;
                &mut self.j[i]
            }
            "H" => {
                let i = single()?;
                &mut self.h[i]
            }
            "U" => {
                let i = single()?;
                &mut self.ustar[i]
            }
            _ => return Err(CoefficientError::UnknownKey(key.into())),
        })
    }

    /// Coefficients entering the cell problems (`E`, `D`).
    pub fn cell_coefficients(&self) -> impl Iterator<Item = &Expr> {
        self.e.iter().chain(&self.d)
    }

    /// Coefficients of the elliptic equation.
    pub fn elliptic_coefficients(&self) -> impl Iterator<Item = &Expr> {
        self.m.iter().chain(&self.e).chain(&self.d).chain(&self.h).chain(&self.k).chain(&self.j)
    }

    /// True when no elliptic coefficient depends on `x`.
    pub fn elliptic_constant_in_x(&self) -> bool {
        !self.elliptic_coefficients().any(|e| e.depends_on_x())
    }

    /// True when no elliptic coefficient depends on `t`.
    pub fn elliptic_constant_in_t(&self) -> bool {
        !self.elliptic_coefficients().any(|e| e.depends_on_t())
    }

    /// True when the operator part (`M`, `E`, `D`) is independent of `t`.
    pub fn operator_constant_in_t(&self) -> bool {
        !any_uses(&self.m, Expr::depends_on_t) && !any_uses(&self.e, Expr::depends_on_t) && !any_uses(&self.d, Expr::depends_on_t)
    }

    /// True when `L` and `G` are independent of `x` and `t`.
    pub fn ode_constant(&self) -> bool {
        !self.l.iter().chain(&self.g).any(|e| e.depends_on_x() || e.depends_on_t())
    }

    pub fn eval_into(exprs: &[Expr], p: &Point, out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(exprs) {
            *o = e.eval(p);
        }
    }

    pub fn eval_vec(exprs: &[Expr], p: &Point) -> Vec<f64> {
        exprs.iter().map(|e| e.eval(p)).collect()
    }

    pub fn eval_e(&self, p: &Point) -> [[f64; 2]; 2] {
        [[self.e[0].eval(p), self.e[1].eval(p)], [self.e[2].eval(p), self.e[3].eval(p)]]
    }

    /// Central difference in `x_dir` of an entry, step [`FD_STEP`].
    pub fn dx(expr: &Expr, p: &Point, x_dir: usize) -> f64 {
        if !expr.uses(if x_dir == 0 { Var::X1 } else { Var::X2 }) {
            return 0.0;
        }
        let (mut a, mut b) = (*p, *p);
        a.x[x_dir] += FD_STEP;
        b.x[x_dir] -= FD_STEP;
        (expr.eval(&a) - expr.eval(&b)) / (2.0 * FD_STEP)
    }

    /// Central difference in `y_dir` of an entry, step [`FD_STEP`].
    pub fn dy(expr: &Expr, p: &Point, y_dir: usize) -> f64 {
        if !expr.uses(if y_dir == 0 { Var::Y1 } else { Var::Y2 }) {
            return 0.0;
        }
        let (mut a, mut b) = (*p, *p);
        a.y[y_dir] += FD_STEP;
        b.y[y_dir] -= FD_STEP;
        (expr.eval_unreduced(&a) - expr.eval_unreduced(&b)) / (2.0 * FD_STEP)
    }
}

/// Step of the central differences applied to coefficient entries.
pub const FD_STEP: f64 = 1e-6;

/// Tensor sampling grid over `(t, x1, x2, y1, y2)`; only the variables an expression
/// uses are sampled. `x` covers `[0, 1]` inclusively, `y` covers `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGrid {
    pub t_end: f64,
    pub points_per_axis: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { t_end: 1.0, points_per_axis: 17 }
    }
}

impl SampleGrid {
    fn axis(&self, v: Var) -> Vec<f64> {
        let n = self.points_per_axis.max(2);
        match v {
            Var::T => (0..n).map(|k| self.t_end * k as f64 / (n - 1) as f64).collect(),
            Var::X1 | Var::X2 => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
            Var::Y1 | Var::Y2 => (0..n).map(|k| k as f64 / n as f64).collect(),
        }
    }

    /// Calls `f` at every grid point over the union of variables used by `exprs`.
    pub fn for_each<'a>(&self, exprs: impl IntoIterator<Item = &'a Expr> + Clone, mut f: impl FnMut(&Point)) {
        let vars = [Var::T, Var::X1, Var::X2, Var::Y1, Var::Y2];
        let axes: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| if exprs.clone().into_iter().any(|e| e.uses(v)) { self.axis(v) } else { vec![0.0] })
            .collect();
        for &t in &axes[0] {
            for &x1 in &axes[1] {
                for &x2 in &axes[2] {
                    for &y1 in &axes[3] {
                        for &y2 in &axes[4] {
                            f(&Point::new(t, [x1, x2], [y1, y2]));
                        }
                    }
                }
            }
        }
    }

    /// Supremum of `|expr|` over the grid.
    pub fn sup_abs(&self, expr: &Expr) -> f64 {
        let mut s: f64 = 0.0;
        self.for_each([expr], |p| s = s.max(expr.eval(p).abs()));
        s
    }
}

/// Coercivity constants of a square matrix coefficient sampled on a grid.
///
/// When the symmetric part is diagonal at every sample, the constant of component `a`
/// is `1 / sup(1 / A_aa)`. Otherwise every component gets the infimum of the smallest
/// eigenvalue of the symmetric part, which is what bounds the quadratic form.
pub fn coercivity(exprs: &[Expr], dim: usize, grid: &SampleGrid) -> Vec<f64> {
    let mut sup_inv = vec![f64::NEG_INFINITY; dim];
    let mut min_eig = f64::INFINITY;
    let mut offdiag: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut vals = vec![0.0; dim * dim];
    grid.for_each(exprs, |p| {
        CoefficientSet::eval_into(exprs, p, &mut vals);
        for a in 0..dim {
            let d = vals[a * dim + a];
            sup_inv[a] = sup_inv[a].max(if d > 0.0 { 1.0 / d } else { f64::INFINITY });
            scale = scale.max(d.abs());
            for b in 0..a {
                offdiag = offdiag.max((vals[a * dim + b] + vals[b * dim + a]).abs() / 2.0);
            }
        }
        let sym = DMatrix::from_fn(dim, dim, |a, b| 0.5 * (vals[a * dim + b] + vals[b * dim + a]));
        let eig = SymmetricEigen::new(sym).eigenvalues;
        min_eig = min_eig.min(eig.iter().copied().fold(f64::INFINITY, f64::min));
    });
    if offdiag <= 1e-14 * scale.max(1.0) {
        sup_inv.iter().map(|&s| if s.is_finite() && s > 0.0 { 1.0 / s } else { 0.0 }).collect()
    } else {
        vec![min_eig; dim]
    }
}

/// Outcome of one validation check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Checks positivity of the diagonal coercivity constants, the drift smallness
/// condition `sup|D_iba|^2 < 4 m_a e_i / (d N^2)`, `y`-independence of `L`, `G`, `U*`,
/// periodicity in `y` and finiteness.
pub fn validate_assumptions(c: &CoefficientSet, grid: &SampleGrid) -> ValidationReport {
    let n = c.n;
    let mut rep = ValidationReport::default();
    let keyed = c.entries();

    let mut nonfinite = Vec::new();
    for (key, e) in &keyed {
        let mut bad = false;
        grid.for_each([*e], |p| bad |= !e.eval(p).is_finite());
        if bad {
            nonfinite.push(key.clone());
        }
    }
    rep.push("finite values", nonfinite.is_empty(), if nonfinite.is_empty() { "all entries finite".into() } else { format!("non-finite: {}", nonfinite.join(", ")) });

    let mut aperiodic = Vec::new();
    for (key, e) in &keyed {
        if !e.depends_on_y() {
            continue;
        }
        let mut worst: f64 = 0.0;
        grid.for_each([*e], |p| {
            let base = e.eval_unreduced(p);
            for k in 0..DIM {
                let mut q = *p;
                q.y[k] += 1.0;
                let diff = (base - e.eval_unreduced(&q)).abs();
                if diff.is_finite() {
                    worst = worst.max(diff / (1.0 + base.abs()));
                }
            }
        });
        if worst > 1e-9 {
            aperiodic.push(format!("{key} (jump {worst:.3e})"));
        }
    }
    rep.push("periodic in y", aperiodic.is_empty(), if aperiodic.is_empty() { "all y-dependent entries are 1-periodic".into() } else { aperiodic.join(", ") });

    let mut ydep = Vec::new();
    for (key, e) in &keyed {
        let is_ode = key.starts_with("L.") || key.starts_with("G.") || key.starts_with("U.");
        if is_ode && e.depends_on_y() {
            ydep.push(key.clone());
        }
        if key.starts_with("U.") && e.depends_on_t() {
            ydep.push(format!("{key} (depends on t)"));
        }
    }
    rep.push("L, G, U* independent of y", ydep.is_empty(), if ydep.is_empty() { "ok".into() } else { ydep.join(", ") });

    let m = coercivity(&c.m, n, grid);
    let e = coercivity(&c.e, DIM, grid);
    let pos = m.iter().chain(&e).all(|&v| v > 0.0);
    rep.push("coercivity", pos, format!("m = {m:?}, e = {e:?}"));

    let mut violations = Vec::new();
    for i in 0..DIM {
        for a in 0..n {
            for b in 0..n {
                let dt = grid.sup_abs(&c.d[idx3(n, i, b, a)]);
                let bound = 4.0 * m[a] * e[i] / (DIM as f64 * (n * n) as f64);
                if dt * dt >= bound && dt > 0.0 {
                    violations.push(format!("(i={}, beta={}, alpha={}): {:.4e} >= {:.4e}", i + 1, b + 1, a + 1, dt * dt, bound));
                }
            }
        }
    }
    rep.push("drift smallness", violations.is_empty(), if violations.is_empty() { "sup|D|^2 < 4 m e / (d N^2) for all index triples".into() } else { violations.join("; ") });
    rep
}

/// Physical parameters of the corrosion model preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrosionParams {
    /// Volume fractions of the three phases, summing to one.
    pub phi: [f64; 3],
    pub chi: [f64; 2],
    pub mu: [f64; 2],
    /// Diagonal and off-diagonal interaction coefficients, both negative, `|gamma1| > |gamma2|`.
    pub gamma: [f64; 2],
    pub kappa: [f64; 3],
    /// Lame parameter of the solid phase; it does not enter the reduced system.
    pub lambda_lame: f64,
    /// Magnitude of the constant source term.
    pub f_value: f64,
}

impl Default for CorrosionParams {
    fn default() -> Self {
        Self {
            phi: [0.25, 0.25, 0.5],
            chi: [1.0, 1.0],
            mu: [1.0, 1.0],
            gamma: [-2.0, -1.0],
            kappa: [1.0, 1.0, 1.0],
            lambda_lame: 1.0,
            f_value: 1.0,
        }
    }
}

/// Intermediate 2x2 matrices of the corrosion preset, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrosionMatrices {
    pub m_tilde: [[f64; 2]; 2],
    pub f: [[f64; 2]; 2],
    pub g_tilde: [[f64; 2]; 2],
    pub m: [[f64; 2]; 2],
    pub l: [[f64; 2]; 2],
    pub g: [[f64; 2]; 2],
    pub k: [[f64; 2]; 2],
    pub h: [f64; 2],
}

type M2 = [[f64; 2]; 2];

fn mul2(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn inv2(a: &M2) -> Option<M2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

/// Determinant of the interaction block, `(gamma1^2 - gamma2^2) phi3` in closed form.
pub fn corrosion_interaction_det(p: &CorrosionParams) -> f64 {
    let g = corrosion_interaction(p);
    g[0][0] * g[1][1] - g[0][1] * g[1][0]
}

/// Interaction block `G~_ab = -gamma_ab + phi_a sum_l gamma_lb`, where the third row of
/// the interaction table vanishes.
fn corrosion_interaction(p: &CorrosionParams) -> M2 {
    let [g1, g2] = p.gamma;
    let gamma = [[g1, g2], [g2, g1]];
    let col_sum = [gamma[0][0] + gamma[1][0], gamma[0][1] + gamma[1][1]];
    let mut g = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            g[a][b] = -gamma[a][b] + p.phi[a] * col_sum[b];
        }
    }
    g
}

/// Builds the two-species corrosion coefficient set (`E = I`, `D = J = 0`).
pub fn corrosion_preset(p: &CorrosionParams) -> Result<(CoefficientSet, CorrosionMatrices), CoefficientError> {
    let bad = |s: String| Err(CoefficientError::InvalidCorrosion(s));
    if p.phi.iter().any(|&v| !(v > 0.0)) || (p.phi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return bad(format!("volume fractions must be positive and sum to one, got {:?}", p.phi));
    }
    if p.gamma.iter().any(|&g| !(g < 0.0)) {
        return bad(format!("interaction coefficients must be negative, got {:?}", p.gamma));
    }
    if p.gamma[0] == p.gamma[1] {
        return bad("gamma1 = gamma2 makes the interaction block singular".into());
    }
    if p.gamma[0].abs() <= p.gamma[1].abs() {
        return bad(format!(
            "need |gamma1| > |gamma2| for a positive interaction determinant, got {:?}",
            p.gamma
        ));
    }
    if p.chi.iter().any(|&v| !(v > 0.0)) {
        return bad(format!("chi must be positive, got {:?}", p.chi));
    }
    let [p1, p2, p3] = p.phi;
    let [c1, c2] = p.chi;
    let [m1, m2] = p.mu;
    let m_tilde = [[c1 * (p1 + p3) / p3, c1 * p2 / p3], [c2 * p1 / p3, c2 * (p2 + p3) / p3]];
    let f = [[m1 * (p2 + p3), -m2 * p1], [-m1 * p2, m2 * (p1 + p3)]];
    let g_tilde = corrosion_interaction(p);
    let g_inv = inv2(&g_tilde).ok_or_else(|| CoefficientError::InvalidCorrosion("singular interaction block".into()))?;
    let m = mul2(&m_tilde, &g_inv);
    let l = mul2(&g_inv, &f);
    let mf = mul2(&m, &f);
    let k = [[-mf[0][0], -mf[0][1]], [-mf[1][0], -mf[1][1]]];
    let ksum: f64 = p.kappa.iter().sum();
    let h = [c1 / p3 * p.f_value * ksum, c2 / p3 * p.f_value * ksum];

    let sym = DMatrix::from_fn(2, 2, |a, b| 0.5 * (m[a][b] + m[b][a]));
    let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
    if !(min_eig > 0.0) {
        return bad(format!("resulting M is not positive definite (smallest symmetric eigenvalue {min_eig:e})"));
    }

    let mut set = CoefficientSet::identity(2);
    for a in 0..2 {
        for b in 0..2 {
            set.m[a * 2 + b] = Expr::constant(m[a][b]);
            set.l[a * 2 + b] = Expr::constant(l[a][b]);
            set.g[a * 2 + b] = Expr::constant(g_inv[a][b]);
            set.k[a * 2 + b] = Expr::constant(k[a][b]);
        }
        set.h[a] = Expr::constant(h[a]);
    }
    Ok((set, CorrosionMatrices { m_tilde, f, g_tilde, m, l, g: g_inv, k, h }))
}
