//! Explicit constants of the a priori and corrector bounds.
//!
//! Sup-norms are sampled on a tensor grid ([`sample_norms`]); the constants follow
//! from the norms and a set of Young-inequality weights ([`EtaChoices`]) by direct
//! evaluation ([`compute_constants`]). [`optimize_eta`] searches the weights on a
//! logarithmic product grid and [`rescaled_rates`] tabulates the convergence exponents
//! in rescaled time.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::coefficients::{coercivity, idx3, CoefficientSet, SampleGrid, DIM};
use crate::expr::Expr;
use crate::pde::AprioriConstants;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstantsError {
    #[error("non-finite value while sampling {0}")]
    NonFinite(String),
    #[error("no admissible weight for (i={i}, beta={beta}, alpha={alpha}): interval ({lo:e}, {hi:e}) is empty")]
    EmptyInterval { i: usize, beta: usize, alpha: usize, lo: f64, hi: f64 },
    #[error("weight for (i={i}, beta={beta}, alpha={alpha}) = {value:e} outside ({lo:e}, {hi:e})")]
    InfeasibleEta { i: usize, beta: usize, alpha: usize, value: f64, lo: f64, hi: f64 },
    #[error("weights must be positive: {0}")]
    NonPositive(&'static str),
    #[error("coercivity lost: {0}")]
    NotCoercive(String),
    #[error("q = {0} must lie in (0, 1/2)")]
    InvalidQ(f64),
    #[error("p = {0} must lie in (0, 1/2)")]
    InvalidP(f64),
}

/// Sampled norms feeding the constants.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBundle {
    pub n: usize,
    /// Coercivity constants of `M`.
    pub m: Vec<f64>,
    /// Coercivity constants of `E`.
    pub e: [f64; 2],
    /// `sup |D_iba|` at [`idx3`]`(n, i, b, a)`.
    pub d_sup: Vec<f64>,
    pub h_sup: Vec<f64>,
    /// `sup |K_ab|` at `a * n + b`.
    pub k_sup: Vec<f64>,
    pub j_sup: Vec<f64>,
    /// Largest of `sup |K|`, `sup |grad_x K|`, `sup |grad_y K|` over all entries.
    pub kappa: f64,
    /// `sup (-lambda_min)` of the symmetric part of `L`.
    pub l_min: f64,
    /// Largest `|d L_ab / d x_i|`.
    pub l_grad: f64,
    /// `sup lambda_max` of the symmetric part of `G`.
    pub g_max: f64,
    /// Largest `|d G_ab / d x_i|`.
    pub g_grad: f64,
    /// Largest operator norm of `G`, recorded for comparison with `g_max`.
    pub g_opnorm: f64,
}

fn sup_abs_checked(grid: &SampleGrid, e: &Expr, name: &str) -> Result<f64, ConstantsError> {
    let s = grid.sup_abs(e);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(ConstantsError::NonFinite(name.into()))
    }
}

fn sup_derivative(grid: &SampleGrid, e: &Expr, y_too: bool) -> f64 {
    let mut s: f64 = 0.0;
    if e.depends_on_x() {
        grid.for_each([e], |p| {
            for k in 0..DIM {
                s = s.max(CoefficientSet::dx(e, p, k).abs());
            }
        });
    }
    if y_too && e.depends_on_y() {
        grid.for_each([e], |p| {
            for k in 0..DIM {
                s = s.max(CoefficientSet::dy(e, p, k).abs());
            }
        });
    }
    s
}

/// Extremes of the eigenvalues of the symmetric part and the operator norm.
fn eig_extremes(exprs: &[Expr], n: usize, grid: &SampleGrid) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut op) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    let mut vals = vec![0.0; n * n];
    grid.for_each(exprs, |p| {
        CoefficientSet::eval_into(exprs, p, &mut vals);
        let sym = DMatrix::from_fn(n, n, |a, b| 0.5 * (vals[a * n + b] + vals[b * n + a]));
        let eig = SymmetricEigen::new(sym).eigenvalues;
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
        let full = DMatrix::from_row_slice(n, n, &vals);
        op = op.max(full.singular_values().max());
    });
    (lo, hi, op)
}

/// Samples every norm entering the constants.
pub fn sample_norms(c: &CoefficientSet, grid: &SampleGrid) -> Result<NormBundle, ConstantsError> {
    let n = c.n;
    let m = coercivity(&c.m, n, grid);
    let ev = coercivity(&c.e, DIM, grid);
    let mut d_sup = Vec::with_capacity(c.d.len());
    for (k, e) in c.d.iter().enumerate() {
        d_sup.push(sup_abs_checked(grid, e, &format!("D entry {k}"))?);
    }
    let h_sup = c.h.iter().map(|e| sup_abs_checked(grid, e, "H")).collect::<Result<Vec<_>, _>>()?;
    let k_sup = c.k.iter().map(|e| sup_abs_checked(grid, e, "K")).collect::<Result<Vec<_>, _>>()?;
    let j_sup = c.j.iter().map(|e| sup_abs_checked(grid, e, "J")).collect::<Result<Vec<_>, _>>()?;
    let mut kappa: f64 = k_sup.iter().copied().fold(0.0, f64::max);
    for e in &c.k {
        kappa = kappa.max(sup_derivative(grid, e, true));
    }
    let (l_lo, _, _) = eig_extremes(&c.l, n, grid);
    let (_, g_hi, g_op) = eig_extremes(&c.g, n, grid);
    let l_grad = c.l.iter().map(|e| sup_derivative(grid, e, false)).fold(0.0, f64::max);
    let g_grad = c.g.iter().map(|e| sup_derivative(grid, e, false)).fold(0.0, f64::max);
    let all = [l_lo, g_hi, g_op, l_grad, g_grad, kappa];
    if all.iter().chain(&m).chain(&ev).any(|v| !v.is_finite()) {
        return Err(ConstantsError::NonFinite("L, G, K, M or E".into()));
    }
    Ok(NormBundle {
        n,
        m,
        e: [ev[0], ev[1]],
        d_sup,
        h_sup,
        k_sup,
        j_sup,
        kappa,
        l_min: -l_lo,
        l_grad,
        g_max: g_hi,
        g_grad,
        g_opnorm: g_op,
    })
}

impl NormBundle {
    fn dn(&self) -> f64 {
        (DIM * self.n) as f64
    }

    /// Open interval of admissible `eta_iba`, or `None` when `sup |D_iba| = 0`.
    pub fn eta_interval(&self, i: usize, b: usize, a: usize) -> Option<(f64, f64)> {
        let d = self.d_sup[idx3(self.n, i, b, a)];
        if d == 0.0 {
            return None;
        }
        let nf = self.n as f64;
        Some((self.dn() * d / (2.0 * self.m[a]), 2.0 * self.e[i] / (nf * d)))
    }

    /// `m_a` minus the drift part for weights `eta_iba`.
    fn m_after_drift(&self, eta_iba: &[f64], a: usize) -> f64 {
        let n = self.n;
        let mut s = self.m[a];
        for i in 0..DIM {
            for b in 0..n {
                let d = self.d_sup[idx3(n, i, b, a)];
                if d > 0.0 {
                    s -= d / (2.0 * eta_iba[idx3(n, i, b, a)]);
                }
            }
        }
        s
    }

    /// Number of weights subtracted from `m_a` besides the drift part.
    fn present_count(&self, a: usize) -> usize {
        let n = self.n;
        let mut k = usize::from(self.h_sup[a] > 0.0);
        k += (0..n).filter(|&b| self.k_sup[a * n + b] > 0.0).count();
        k += (0..DIM).flat_map(|i| (0..n).map(move |b| (i, b))).filter(|&(i, b)| self.j_sup[idx3(n, i, a, b)] > 0.0).count();
        k
    }
}

/// Young-inequality weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaChoices {
    /// `eta_iba` at [`idx3`]`(n, i, b, a)`.
    pub eta_iba: Vec<f64>,
    pub eta_a: Vec<f64>,
    /// `eta_ab` at `a * n + b`.
    pub eta_ab: Vec<f64>,
    /// `eta~_iab` at [`idx3`]`(n, i, a, b)`.
    pub eta_tilde_iab: Vec<f64>,
    pub eta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    /// Supremum of admissible periods.
    pub epsilon0: f64,
}

impl EtaChoices {
    /// Defaults: `eta_iba` at the geometric mean of its interval, `eta..eta3 = 1`, and
    /// the weights subtracted from `m_a` sharing half of the margin left by the drift.
    pub fn defaults(nb: &NormBundle) -> Self {
        Self::with_parameters(nb, 0.5, 0.5, [1.0; 4])
    }

    /// Weights with `eta_iba = lo^(1-pos) hi^pos` and the `m_a` weights splitting the
    /// fraction `share` of the remaining margin equally.
    pub fn with_parameters(nb: &NormBundle, pos: f64, share: f64, etas: [f64; 4]) -> Self {
        let n = nb.n;
        let mut eta_iba = vec![1.0; DIM * n * n];
        for i in 0..DIM {
            for b in 0..n {
                for a in 0..n {
                    if let Some((lo, hi)) = nb.eta_interval(i, b, a) {
                        if lo < hi {
                            eta_iba[idx3(n, i, b, a)] = lo.powf(1.0 - pos) * hi.powf(pos);
                        }
                    }
                }
            }
        }
        let mut eta_a = vec![1.0; n];
        let mut eta_ab = vec![1.0; n * n];
        let mut eta_tilde_iab = vec![1.0; DIM * n * n];
        for a in 0..n {
            let count = nb.present_count(a);
            if count == 0 {
                continue;
            }
            let margin = nb.m_after_drift(&eta_iba, a);
            let w = if margin > 0.0 { share * margin / count as f64 } else { 1.0 };
            eta_a[a] = w;
            for b in 0..n {
                eta_ab[a * n + b] = w;
                for i in 0..DIM {
                    eta_tilde_iab[idx3(n, i, a, b)] = w;
                }
            }
        }
        Self {
            eta_iba,
            eta_a,
            eta_ab,
            eta_tilde_iab,
            eta: etas[0],
            eta1: etas[1],
            eta2: etas[2],
            eta3: etas[3],
            epsilon0: 1.0,
        }
    }
}

/// Constants of the a priori, growth and corrector bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    pub kappa: f64,
    pub kappa_tilde: f64,
    pub l: f64,
    pub lambda: f64,
    /// `lambda` with `G_M` taken over species `a < N` only; an alternative reading of
    /// the growth constant, reported for comparison.
    pub lambda_restricted: f64,
    pub mu: f64,
    pub m_tilde: Vec<f64>,
    pub e_tilde: [f64; 2],
    pub h_tilde: f64,
    pub k_tilde: Vec<f64>,
    /// `J~_ia` at `i * N + a`.
    pub j_tilde: Vec<f64>,
    pub l_n: f64,
    pub l_g: f64,
    pub g_n: f64,
    pub g_g: f64,
    pub g_m: f64,
    pub m: f64,
    /// Gronwall rate `I = 2 lambda`.
    pub i_rate: f64,
    pub eta: EtaChoices,
    pub norms: NormBundle,
}

impl BoundConstants {
    pub fn apriori(&self) -> AprioriConstants {
        AprioriConstants {
            m_tilde: self.m_tilde.clone(),
            e_tilde: self.e_tilde,
            h_tilde: self.h_tilde,
            k_tilde: self.k_tilde.clone(),
            j_tilde: self.j_tilde.clone(),
        }
    }

    /// `t_l = min(1/l, t)`, equal to `t` for `l = 0`.
    pub fn t_l(&self, t: f64) -> f64 {
        if self.l > 0.0 {
            t.min(1.0 / self.l)
        } else {
            t
        }
    }

    /// Corrector bound without its free multiplicative constant:
    /// `(e^1/2 + e^3/2) [1 + e^1/2 (1 + (kappa + kappa~) e^{lambda t}) (1 + kappa (1 + t_l e^{l t}))] exp(mu t_l e^{l t})`.
    pub fn corrector_envelope(&self, eps: f64, t: f64) -> f64 {
        let tle = self.t_l(t) * (self.l * t).exp();
        let s = eps.sqrt();
        (s + eps * s)
            * (1.0 + s * (1.0 + (self.kappa + self.kappa_tilde) * (self.lambda * t).exp()) * (1.0 + self.kappa * (1.0 + tle)))
            * (self.mu * tle).exp()
    }

    /// Bound on `||U||_{H1}(t)` from the Gronwall argument:
    /// `||U||^2 <= (||U0||^2 + J/I) e^{I t}` with `J = G_M H~`, or `||U0||^2 + J t` if `I = 0`.
    pub fn growth_bound(&self, u0_h1: f64, t: f64) -> f64 {
        let j = self.g_m * self.h_tilde;
        if self.i_rate > 0.0 {
            ((u0_h1 * u0_h1 + j / self.i_rate) * (self.i_rate * t).exp()).sqrt()
        } else {
            (u0_h1 * u0_h1 + j * t).sqrt()
        }
    }
}

/// Evaluates all constants for given weights.
pub fn compute_constants(nb: &NormBundle, eta: &EtaChoices) -> Result<BoundConstants, ConstantsError> {
    let n = nb.n;
    let dn = nb.dn();
    for (name, v) in [("eta", eta.eta), ("eta1", eta.eta1), ("eta2", eta.eta2), ("eta3", eta.eta3), ("epsilon0", eta.epsilon0)] {
        if !(v > 0.0) {
            return Err(ConstantsError::NonPositive(name));
        }
    }
    if eta.eta_iba.iter().chain(&eta.eta_a).chain(&eta.eta_ab).chain(&eta.eta_tilde_iab).any(|v| !(*v > 0.0)) {
        return Err(ConstantsError::NonPositive("indexed weights"));
    }
    for i in 0..DIM {
        for b in 0..n {
            for a in 0..n {
                if let Some((lo, hi)) = nb.eta_interval(i, b, a) {
                    if lo >= hi {
                        return Err(ConstantsError::EmptyInterval { i: i + 1, beta: b + 1, alpha: a + 1, lo, hi });
                    }
                    let v = eta.eta_iba[idx3(n, i, b, a)];
                    if !(v > lo && v < hi) {
                        return Err(ConstantsError::InfeasibleEta { i: i + 1, beta: b + 1, alpha: a + 1, value: v, lo, hi });
                    }
                }
            }
        }
    }
    let mut m_tilde = Vec::with_capacity(n);
    for a in 0..n {
        let mut v = nb.m_after_drift(&eta.eta_iba, a);
        if nb.h_sup[a] > 0.0 {
            v -= eta.eta_a[a];
        }
        for b in 0..n {
            if nb.k_sup[a * n + b] > 0.0 {
                v -= eta.eta_ab[a * n + b];
            }
            for i in 0..DIM {
                if nb.j_sup[idx3(n, i, a, b)] > 0.0 {
                    v -= eta.eta_tilde_iab[idx3(n, i, a, b)];
                }
            }
        }
        m_tilde.push(v);
    }
    let mut e_tilde = nb.e;
    for (i, et) in e_tilde.iter_mut().enumerate() {
        for a in 0..n {
            for b in 0..n {
                let d = nb.d_sup[idx3(n, i, b, a)];
                if d > 0.0 {
                    *et -= 0.5 * eta.eta_iba[idx3(n, i, b, a)] * d;
                }
            }
        }
    }
    if let Some((a, v)) = m_tilde.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(ConstantsError::NotCoercive(format!("m~_{} = {v:e}", a + 1)));
    }
    if let Some((i, v)) = e_tilde.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(ConstantsError::NotCoercive(format!("e~_{} = {v:e}", i + 1)));
    }
    let h_tilde: f64 =
        (0..n).filter(|&a| nb.h_sup[a] > 0.0).map(|a| nb.h_sup[a].powi(2) / (4.0 * eta.eta_a[a])).sum();
    let k_tilde: Vec<f64> = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| nb.k_sup[b * n + a] > 0.0)
                .map(|b| nb.k_sup[b * n + a].powi(2) / (4.0 * eta.eta_ab[b * n + a]))
                .sum()
        })
        .collect();
    let mut j_tilde = vec![0.0; DIM * n];
    for i in 0..DIM {
        for a in 0..n {
            j_tilde[i * n + a] = (0..n)
                .filter(|&b| nb.j_sup[idx3(n, i, b, a)] > 0.0)
                .map(|b| eta.epsilon0.powi(2) * nb.j_sup[idx3(n, i, b, a)].powi(2) / (4.0 * eta.eta_tilde_iab[idx3(n, i, b, a)]))
                .sum();
        }
    }
    // A negative-definite G gives no useful bound; the constants only use G_max >= 0.
    let g_max = nb.g_max.max(0.0);
    let l_n = 2.0 * nb.l_min + eta.eta * g_max + eta.eta1 * dn * nb.l_grad;
    let l_g = 2.0 * nb.l_min + dn / eta.eta1 * nb.l_grad + eta.eta2 * g_max + eta.eta3 * dn * nb.g_grad;
    let g_n = g_max / eta.eta + dn / eta.eta3 * nb.g_grad;
    let g_g = g_max / eta.eta2;
    let min_m = m_tilde.iter().copied().fold(f64::INFINITY, f64::min);
    let min_e = e_tilde[0].min(e_tilde[1]);
    let g_m = ((g_n + g_g) / min_m).max(g_n / min_e);
    // Alternative growth constant ranging over a < N only.
    let min_m_restricted = m_tilde[..n - 1].iter().copied().fold(f64::INFINITY, f64::min);
    let g_m_restricted = if n > 1 { ((g_n + g_g) / min_m_restricted).max(g_n / min_e) } else { g_n / min_e };
    let m = min_m.min(min_e);
    let max_k = k_tilde.iter().copied().fold(0.0, f64::max);
    let max_j = j_tilde.iter().copied().fold(0.0, f64::max);
    let lam = |gm: f64| 0.5 * f64::max(0.0, l_n + f64::max(l_g + gm * max_k, gm * max_j));
    let lambda = lam(g_m);
    let mu = 9.0 * nb.kappa * nb.kappa / (8.0 * m * m) * g_n;
    Ok(BoundConstants {
        kappa: nb.kappa,
        kappa_tilde: max_k.max(max_j),
        l: l_n.max(0.0),
        lambda,
        lambda_restricted: lam(g_m_restricted),
        mu,
        m_tilde,
        e_tilde,
        h_tilde,
        k_tilde,
        j_tilde,
        l_n,
        l_g,
        g_n,
        g_g,
        g_m,
        m,
        i_rate: 2.0 * lambda,
        eta: eta.clone(),
        norms: nb.clone(),
    })
}

/// Quantity minimised by [`optimize_eta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    MinMu,
    MinLambdaPlusMu,
}

/// Result of the weight search.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub constants: BoundConstants,
    pub evaluated: usize,
    pub feasible: usize,
}

fn logspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..k).map(|j| (lo.ln() + (hi.ln() - lo.ln()) * j as f64 / (k - 1) as f64).exp()).collect()
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
}

/// Product-grid search over `eta, eta1, eta2, eta3` (log-spaced in `[1e-3, 1e3]`), the
/// share of the `m_a` margin given to the source weights (log-spaced in `[1e-3, 0.9]`)
/// and the position of `eta_iba` inside its interval (in `[0.05, 0.95]`), each with
/// `points` values. Candidates are ranked by `l` first and the objective second, so
/// `l = 0` is preferred whenever some candidate reaches it; remaining ties go to the
/// smallest `G_N`, which keeps the displacement bound tight. A grid with `2 points - 1`
/// values per axis contains the smaller one, hence never ranks worse.
pub fn optimize_eta(nb: &NormBundle, objective: Objective, points: usize) -> Result<Optimized, ConstantsError> {
    let start = compute_constants(nb, &EtaChoices::defaults(nb));
    if let Ok(c) = &start {
        if c.kappa == 0.0 && objective == Objective::MinMu {
            return Ok(Optimized { constants: c.clone(), evaluated: 1, feasible: 1 });
        }
    }
    let points = points.max(1);
    let etas = logspace(1e-3, 1e3, points);
    let shares = logspace(1e-3, 0.9, points);
    let positions = linspace(0.05, 0.95, points);
    let score = |c: &BoundConstants| match objective {
        Objective::MinMu => c.mu,
        Objective::MinLambdaPlusMu => c.lambda + c.mu,
    };
    let mut combos = Vec::with_capacity(points.pow(6));
    for &a in &etas {
        for &b in &etas {
            for &c in &etas {
                for &d in &etas {
                    for &s in &shares {
                        for &p in &positions {
                            combos.push(([a, b, c, d], s, p));
                        }
                    }
                }
            }
        }
    }
    let evaluated = combos.len();
    let results: Vec<BoundConstants> = combos
        .into_par_iter()
        .filter_map(|(e4, s, p)| compute_constants(nb, &EtaChoices::with_parameters(nb, p, s, e4)).ok())
        .filter(|c| c.lambda.is_finite() && c.mu.is_finite())
        .collect();
    let feasible = results.len();
    let best = results
        .into_iter()
        .min_by(|x, y| x.l.total_cmp(&y.l).then(score(x).total_cmp(&score(y))).then(x.g_n.total_cmp(&y.g_n)))
        .ok_or_else(|| start.err().unwrap_or(ConstantsError::NotCoercive("no feasible weights on the grid".into())))?;
    Ok(Optimized { constants: best, evaluated, feasible })
}

/// Branch of the rescaled-time rate statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateBranch {
    /// `l > 0`, `tau ln(1/eps) = exp(l t)`.
    Exponential,
    /// `l = 0`, `tau ln(1/eps) = t`.
    Linear,
    /// `l = 0` and `kappa = 0`.
    LinearNoCoupling,
}

impl fmt::Display for RateBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateBranch::Exponential => "l>0",
            RateBranch::Linear => "l=0",
            RateBranch::LinearNoCoupling => "l=0,kappa=0",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub tau: f64,
    pub phi_exponent: f64,
    pub psi_exponent: f64,
}

/// Exponents of the rescaled-time bounds on an open grid of admissible `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub branch: RateBranch,
    pub q: f64,
    pub p: Option<f64>,
    /// Supremum of admissible `tau`; `None` for an empty range.
    pub tau_end: Option<f64>,
    /// Infimum of admissible `tau`.
    pub tau_start: f64,
    /// Upper bound on `eps` for the `l > 0` branch.
    pub eps_threshold: Option<f64>,
    pub rows: Vec<RateRow>,
    l: f64,
    lambda: f64,
    mu: f64,
}

/// Length of the `tau` range shown when the admissible range is unbounded.
pub const TAU_CAP: f64 = 1.0;

impl RateTable {
    /// Exponents at `tau`, or `None` if `tau` is not admissible.
    pub fn exponents(&self, tau: f64) -> Option<(f64, f64)> {
        let end = self.tau_end?;
        if !(tau > self.tau_start && tau < end) {
            return None;
        }
        let phi = match self.branch {
            RateBranch::Exponential => 0.5 - self.mu / self.l * tau,
            RateBranch::Linear => {
                let p = self.p.unwrap_or(0.0);
                (0.5 - self.mu * tau).min(1.0 - (self.lambda + self.mu) * tau - p)
            }
            RateBranch::LinearNoCoupling => 0.5f64.min(1.0 - self.lambda * tau),
        };
        Some((phi, phi - self.q))
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau,branch,phi_exponent,psi_exponent")?;
        for r in &self.rows {
            writeln!(w, "{:.12e},{},{:.12e},{:.12e}", r.tau, self.branch, r.phi_exponent, r.psi_exponent)?;
        }
        Ok(())
    }
}

/// Tabulates the exponents on `points` interior points of the admissible `tau` range.
///
/// * `l > 0`: `0 < mu tau / l < 1/2 - q`; with `mu = 0` the range is unbounded and
///   shown up to [`TAU_CAP`].
/// * `l = 0`: `0 < max(mu tau, (lambda + mu) tau + p - 1/2) < 1/2 - q`.
/// * `l = 0, kappa = 0`: exponent `min(1/2, 1 - lambda tau)`, admissible while the
///   displacement exponent stays positive, `lambda tau < 1 - q`.
pub fn rescaled_rates(bc: &BoundConstants, q: f64, p: Option<f64>, points: usize) -> Result<RateTable, ConstantsError> {
    if !(q > 0.0 && q < 0.5) {
        return Err(ConstantsError::InvalidQ(q));
    }
    let (l, lambda, mu) = (bc.l, bc.lambda, bc.mu);
    let (branch, tau_start, tau_end, eps_threshold) = if l > 0.0 {
        let end = if mu > 0.0 { (0.5 - q) * l / mu } else { TAU_CAP };
        (RateBranch::Exponential, 0.0, Some(end), Some((-2.0 * mu / ((1.0 - 2.0 * q) * l)).exp()))
    } else if bc.kappa == 0.0 {
        let end = if lambda > 0.0 { (1.0 - q) / lambda } else { TAU_CAP };
        (RateBranch::LinearNoCoupling, 0.0, Some(end), None)
    } else {
        let p = p.ok_or(ConstantsError::InvalidP(f64::NAN))?;
        if !(p > 0.0 && p < 0.5) {
            return Err(ConstantsError::InvalidP(p));
        }
        // Upper limits of both arguments of the max.
        let mut end = f64::INFINITY;
        if mu > 0.0 {
            end = end.min((0.5 - q) / mu);
        }
        if lambda + mu > 0.0 {
            end = end.min((1.0 - q - p) / (lambda + mu));
        }
        // The max must be positive: automatic for mu > 0, otherwise needs
        // lambda tau > 1/2 - p.
        let start = if mu > 0.0 { 0.0 } else if lambda > 0.0 { (0.5 - p) / lambda } else { f64::INFINITY };
        if !end.is_finite() {
            end = start + TAU_CAP;
        }
        let range = (start < end).then_some(end);
        (RateBranch::Linear, start, range, None)
    };
    let mut table = RateTable { branch, q, p, tau_end, tau_start, eps_threshold, rows: Vec::new(), l, lambda, mu };
    if let Some(end) = tau_end {
        for k in 1..=points {
            let tau = tau_start + (end - tau_start) * k as f64 / (points + 1) as f64;
            if let Some((phi, psi)) = table.exponents(tau) {
                table.rows.push(RateRow { tau, phi_exponent: phi, psi_exponent: psi });
            }
        }
    }
    Ok(table)
}

impl fmt::Display for BoundConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nb = &self.norms;
        writeln!(f, "# sampled norms")?;
        writeln!(f, "m_alpha        = {:?}  (coercivity of M)", nb.m)?;
        writeln!(f, "e_i            = {:?}  (coercivity of E)", nb.e)?;
        writeln!(f, "sup|D_iba|     = {:?}", nb.d_sup)?;
        writeln!(f, "sup|H_a|       = {:?}", nb.h_sup)?;
        writeln!(f, "sup|K_ab|      = {:?}", nb.k_sup)?;
        writeln!(f, "sup|J_iab|     = {:?}", nb.j_sup)?;
        writeln!(f, "L_min          = {:.12e}  (sup of -lambda_min(sym L))", nb.l_min)?;
        writeln!(f, "L_G norm       = {:.12e}  (sup |grad L|)", nb.l_grad)?;
        writeln!(f, "G_max          = {:.12e}  (sup lambda_max(sym G))", nb.g_max)?;
        writeln!(f, "G_G norm       = {:.12e}  (sup |grad G|)", nb.g_grad)?;
        writeln!(f, "|G| operator   = {:.12e}", nb.g_opnorm)?;
        writeln!(f, "# weights")?;
        writeln!(f, "eta, eta1..3   = {:.6e}, {:.6e}, {:.6e}, {:.6e}", self.eta.eta, self.eta.eta1, self.eta.eta2, self.eta.eta3)?;
        writeln!(f, "eta_iba        = {:?}", self.eta.eta_iba)?;
        writeln!(f, "eta_a          = {:?}", self.eta.eta_a)?;
        writeln!(f, "eta_ab         = {:?}", self.eta.eta_ab)?;
        writeln!(f, "eta~_iab       = {:?}", self.eta.eta_tilde_iab)?;
        writeln!(f, "epsilon0       = {}", self.eta.epsilon0)?;
        writeln!(f, "# constants")?;
        writeln!(f, "m~_alpha       = {:?}  (m_a - drift - source weights)", self.m_tilde)?;
        writeln!(f, "e~_i           = {:?}  (e_i - sum eta_iba D_iba / 2)", self.e_tilde)?;
        writeln!(f, "H~             = {:.12e}  (sum |H_a|^2 / (4 eta_a))", self.h_tilde)?;
        writeln!(f, "K~_alpha       = {:?}  (sum_b |K_ba|^2 / (4 eta_ba))", self.k_tilde)?;
        writeln!(f, "J~_ia          = {:?}  (sum_b eps0^2 |J_iba|^2 / (4 eta~_iba))", self.j_tilde)?;
        writeln!(f, "L_N            = {:.12e}  (2 L_min + eta G_max + eta1 d N L_G)", self.l_n)?;
        writeln!(f, "L_G            = {:.12e}  (2 L_min + d N L_G / eta1 + eta2 G_max + eta3 d N G_G)", self.l_g)?;
        writeln!(f, "G_N            = {:.12e}  (G_max / eta + d N G_G / eta3)", self.g_n)?;
        writeln!(f, "G_G            = {:.12e}  (G_max / eta2)", self.g_g)?;
        writeln!(f, "G_M            = {:.12e}  (max (G_N + G_G) / m~_a, G_N / e~_i)", self.g_m)?;
        writeln!(f, "m              = {:.12e}  (min m~_a, e~_i)", self.m)?;
        writeln!(f, "kappa          = {:.12e}  (max of |K|, |grad_x K|, |grad_y K|)", self.kappa)?;
        writeln!(f, "kappa~         = {:.12e}  (max K~_a, J~_ia)", self.kappa_tilde)?;
        writeln!(f, "l              = {:.12e}  (max(0, L_N))", self.l)?;
        writeln!(f, "lambda         = {:.12e}  (I / 2)", self.lambda)?;
        writeln!(f, "lambda (a<N)   = {:.12e}", self.lambda_restricted)?;
        writeln!(f, "mu             = {:.12e}  (9 kappa^2 G_N / (8 m^2))", self.mu)?;
        if (self.lambda - self.lambda_restricted).abs() > 1e-12 * self.lambda.abs().max(1.0) {
            writeln!(f, "note: the two lambda variants disagree; the first is used")?;
        }
        Ok(())
    }
}
