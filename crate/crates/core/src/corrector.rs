//! Corrector error studies.
//!
//! For each period `eps` the fine problem on the perforated square and the homogenized
//! problem on the full square are advanced together. At every time level the two-scale
//! expansion
//!
//! ```text
//! V_exp = V0 + M_eps (eps V1 + eps^2 V2),   U_exp = U0 + M_eps (eps U1 + eps^2 U2)
//! ```
//!
//! is rebuilt at the fine nodes from the homogenized solution, its recovered
//! derivatives and the cell functions evaluated at `y = x / eps mod 1`. `U0`, `U1`, `U2`
//! follow Rothe chains driven by `V0`, `V1`, `V2` at the fine nodes, so that the
//! displacement error obeys the same update as the fine solution:
//! `Psi_k = Rothe(Psi_{k-1}, Phi_{k-1})`.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::cell::{CellContext, CellError, CellOptions, CellPointData};
use crate::coefficients::{idx3, CoefficientSet, SampleGrid};
use crate::constants::{optimize_eta, sample_norms, BoundConstants, ConstantsError, Objective};
use crate::effective::tabulate_cells;
use crate::expr::{Expr, Point};
use crate::mesh::{CellSpec, DomainSpec, Mesh, MeshError};
use crate::pde::{component, ode_matrices, rothe_step, DerivativeRecovery, OdeMatrices, PdeError, Stepper, TimeGrid};
use crate::sparse::SolverOptions;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorrectorError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Constants(#[from] ConstantsError),
    #[error("cut-off with multiplier {multiplier} vanishes for eps = {epsilon}: ramp start {start} >= inradius 0.5")]
    CutoffVanishes { epsilon: f64, multiplier: f64, start: f64 },
    #[error("mesh inconsistency: {0}")]
    Inconsistent(String),
    #[error("field length mismatch: {0} vs {1}")]
    Mismatch(usize, usize),
}

/// Cut-off `M_eps = clamp((d - c eps) / (c eps), 0, 1)` with `d` the distance to the
/// boundary of the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffField {
    pub epsilon: f64,
    /// Threshold multiplier `c`: `M = 0` for `d <= c eps`, `M = 1` for `d >= 2 c eps`.
    pub multiplier: f64,
    pub values: Vec<f64>,
    /// `max eps |grad M_h|` over the elements.
    pub max_scaled_gradient: f64,
}

/// Distance of `x` to the boundary of the unit square.
pub fn boundary_distance(x: [f64; 2]) -> f64 {
    x[0].min(1.0 - x[0]).min(x[1]).min(1.0 - x[1])
}

/// Nodal cut-off on `mesh`. Rejects `c eps >= 1/2`, where it would vanish identically.
pub fn build_cutoff(mesh: &Mesh, epsilon: f64, multiplier: f64) -> Result<CutoffField, CorrectorError> {
    let start = multiplier * epsilon;
    if !(start > 0.0) || start >= 0.5 {
        return Err(CorrectorError::CutoffVanishes { epsilon, multiplier, start });
    }
    let values: Vec<f64> =
        mesh.nodes.iter().map(|&x| ((boundary_distance(x) - start) / start).clamp(0.0, 1.0)).collect();
    let max_scaled_gradient = (0..mesh.num_elements())
        .map(|e| {
            let g = mesh.gradient(e, &values);
            epsilon * (g[0] * g[0] + g[1] * g[1]).sqrt()
        })
        .fold(0.0, f64::max);
    Ok(CutoffField { epsilon, multiplier, values, max_scaled_gradient })
}

/// `(||grad (a - b)||, ||a - b||)` over all species on `mesh`.
pub fn difference_norms(mesh: &Mesh, n: usize, a: &[f64], b: &[f64]) -> Result<(f64, f64), CorrectorError> {
    if a.len() != b.len() || a.len() != mesh.num_nodes() * n {
        return Err(CorrectorError::Mismatch(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mut semi, mut l2) = (0.0, 0.0);
    for s in 0..n {
        let c = component(&d, n, s);
        semi += mesh.h1_seminorm_sq(&c);
        l2 += mesh.l2_norm_sq(&c);
    }
    Ok((semi.sqrt(), l2.sqrt()))
}

/// `||grad (a - b)||` over the elements whose nodes all have cut-off value one.
fn interior_seminorm(mesh: &Mesh, n: usize, cut: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (e, t) in mesh.triangles.iter().enumerate() {
        if t.iter().any(|&v| cut[v] < 1.0) {
            continue;
        }
        let g = &mesh.grads[e];
        for sp in 0..n {
            let mut d = [0.0; 2];
            for k in 0..3 {
                let v = t[k] * n + sp;
                d[0] += g[k][0] * (a[v] - b[v]);
                d[1] += g[k][1] * (a[v] - b[v]);
            }
            s += mesh.areas[e] * (d[0] * d[0] + d[1] * d[1]);
        }
    }
    s.sqrt()
}

/// Settings of a corrector sweep.
#[derive(Debug, Clone)]
pub struct CorrectorConfig {
    pub coeffs: CoefficientSet,
    /// Cell geometry; `resolution` is the cell grid used at every `eps`.
    pub cell: CellSpec,
    pub grid: TimeGrid,
    pub epsilons: Vec<f64>,
    pub cutoff_multiplier: f64,
    /// Resolution of the grid carrying cell data when `E` or `D` depend on `x`.
    pub slow_resolution: usize,
    pub solver: SolverOptions,
    pub cell_options: CellOptions,
    /// Repeat every row with halved mesh width and step to measure the self-error.
    pub self_check: bool,
    /// Points per axis for the sup-norm sampling of the constants.
    pub sample_points: usize,
    /// Points per axis of the weight search.
    pub eta_points: usize,
}

impl CorrectorConfig {
    pub fn new(coeffs: CoefficientSet, cell: CellSpec, grid: TimeGrid, epsilons: Vec<f64>) -> Self {
        Self {
            coeffs,
            cell,
            grid,
            epsilons,
            cutoff_multiplier: 1.0,
            slow_resolution: 8,
            solver: SolverOptions { direct_max_dim: 2_000_000, ..SolverOptions::default() },
            cell_options: CellOptions::default(),
            self_check: true,
            sample_points: 33,
            eta_points: 7,
        }
    }
}

/// Error norms at one time level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeLog {
    pub t: f64,
    /// `||grad Phi||` on the perforated domain.
    pub phi_norm: f64,
    pub phi_l2: f64,
    /// `||grad Phi||` over the elements where the cut-off equals one.
    pub phi_interior: f64,
    /// `||Psi||_{H1}`.
    pub psi_norm: f64,
    pub psi_l2: f64,
    /// Left-rectangle value of `int_0^t e^{l (t - s)} G_N ||Phi||^2(s) ds`.
    pub psi_bound_sq: f64,
}

impl TimeLog {
    /// Discrete displacement bound `||Psi||^2 <= quadrature of G_N ||Phi||^2`.
    pub fn psi_bound_holds(&self) -> bool {
        self.psi_l2 * self.psi_l2 <= self.psi_bound_sq * (1.0 + 1e-9) + 1e-24
    }
}

/// Result of one `(eps, resolution)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRun {
    pub epsilon: f64,
    pub cell_resolution: usize,
    pub steps: usize,
    pub fine_nodes: usize,
    pub macro_nodes: usize,
    pub cutoff_gradient: f64,
    pub log: Vec<TimeLog>,
}

impl RowRun {
    pub fn last(&self) -> &TimeLog {
        self.log.last().expect("log has the initial level")
    }
}

/// Cell-function values at the fine nodes.
struct NodeCells {
    w: [Vec<f64>; 2],
    z: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    q0: Vec<Vec<f64>>,
    r0: Vec<Vec<f64>>,
    q1: Vec<Vec<f64>>,
    q2: Vec<Vec<f64>>,
}

/// Location of a point as `(element, barycentric)`.
type Located = (usize, [f64; 3]);

fn interp(mesh: &Mesh, loc: &Located, field: &[f64]) -> f64 {
    let t = mesh.triangles[loc.0];
    loc.1[0] * field[t[0]] + loc.1[1] * field[t[1]] + loc.1[2] * field[t[2]]
}

fn locate_all(mesh: &Mesh, points: impl Iterator<Item = [f64; 2]>, what: &str) -> Result<Vec<Located>, CorrectorError> {
    points
        .map(|p| mesh.locate(p).map_err(|_| CorrectorError::Inconsistent(format!("{what} point {p:?} not covered"))))
        .collect()
}

/// Everything fixed for one row: meshes, locations and the derivative recovery.
struct RowGeometry {
    cell: CellContext,
    fine: Mesh,
    macro_mesh: Mesh,
    cutoff: CutoffField,
    in_macro: Vec<Located>,
    in_cell: Vec<Located>,
    slow: Option<(Mesh, Vec<Located>)>,
    recovery: DerivativeRecovery,
}

impl RowGeometry {
    fn new(cfg: &CorrectorConfig, epsilon: f64, resolution: usize) -> Result<Self, CorrectorError> {
        let spec = CellSpec { hole: cfg.cell.hole, resolution };
        let cell = CellContext::new(&spec, cfg.cell_options)?;
        let domain = DomainSpec::from_epsilon(epsilon)?;
        let fine = Mesh::perforated_domain(&cell.mesh, &domain)?;
        let macro_mesh = Mesh::unit_square(domain.cells_per_side * resolution)?;
        let cutoff = build_cutoff(&fine, epsilon, cfg.cutoff_multiplier)?;
        let in_macro = locate_all(&macro_mesh, fine.nodes.iter().copied(), "fine node in macro mesh")?;
        let inv = domain.cells_per_side as f64;
        let to_cell = |x: [f64; 2]| {
            let s = [x[0] * inv, x[1] * inv];
            [s[0] - s[0].floor(), s[1] - s[1].floor()]
        };
        let in_cell = locate_all(&cell.mesh, fine.nodes.iter().map(|&x| to_cell(x)), "cell coordinate (inside the hole?)")?;
        let slow = if cfg.coeffs.elliptic_constant_in_x() {
            None
        } else {
            let m = Mesh::unit_square(cfg.slow_resolution.max(1))?;
            let loc = locate_all(&m, fine.nodes.iter().copied(), "fine node in slow grid")?;
            Some((m, loc))
        };
        let recovery = DerivativeRecovery::new(&macro_mesh);
        Ok(Self { cell, fine, macro_mesh, cutoff, in_macro, in_cell, slow, recovery })
    }

    fn slow_points(&self) -> Vec<[f64; 2]> {
        match &self.slow {
            Some((m, _)) => m.nodes.clone(),
            None => vec![[0.0, 0.0]],
        }
    }

    /// Values at the fine nodes of a cell function given per slow data point.
    fn eval_cells<'a>(&self, pick: impl Fn(usize) -> &'a [f64]) -> Vec<f64> {
        let cm = &self.cell.mesh;
        (0..self.fine.num_nodes())
            .map(|i| match &self.slow {
                None => interp(cm, &self.in_cell[i], pick(0)),
                Some((m, loc)) => {
                    let (e, l) = loc[i];
                    let t = m.triangles[e];
                    (0..3).map(|k| l[k] * interp(cm, &self.in_cell[i], pick(t[k]))).sum()
                }
            })
            .collect()
    }

    /// Evaluates every cell function at every fine node.
    fn node_cells(&self, data: &[Arc<CellPointData>]) -> Result<NodeCells, CorrectorError> {
        let second = |d: &CellPointData| {
            d.second.clone().ok_or_else(|| CorrectorError::Inconsistent("second-order cell data missing".into()))
        };
        let seconds = data.iter().map(|d| second(d)).collect::<Result<Vec<_>, _>>()?;
        let first = &data[0].first;
        let s0 = &seconds[0];
        let w = [self.eval_cells(|s| &data[s].first.w[0]), self.eval_cells(|s| &data[s].first.w[1])];
        let z = (0..first.z.len()).map(|k| self.eval_cells(|s| &data[s].first.z[k])).collect();
        let p = (0..s0.p.len()).map(|k| self.eval_cells(|s| &seconds[s].p[k])).collect();
        let q0 = (0..s0.q0.len()).map(|k| self.eval_cells(|s| &seconds[s].q0[k])).collect();
        let r0 = (0..s0.r0.len()).map(|k| self.eval_cells(|s| &seconds[s].r0[k])).collect();
        let q1 = (0..s0.q1.len()).map(|k| self.eval_cells(|s| &seconds[s].q1[k])).collect();
        let q2 = (0..s0.q2.len()).map(|k| self.eval_cells(|s| &seconds[s].q2[k])).collect();
        Ok(NodeCells { w, z, p, q0, r0, q1, q2 })
    }
}

/// Expansion pieces at the fine nodes: `V0`, `V1`, `V2`.
struct Expansion {
    v0: Vec<f64>,
    v1: Vec<f64>,
    v2: Vec<f64>,
}

fn expansion(g: &RowGeometry, n: usize, cells: &NodeCells, v_macro: &[f64], u0: &[f64]) -> Expansion {
    let nf = g.fine.num_nodes();
    let mm = &g.macro_mesh;
    let mut v0 = vec![0.0; nf * n];
    let mut grad = vec![[0.0; 2]; nf * n];
    let mut hess = vec![[0.0; 3]; nf * n];
    for a in 0..n {
        let comp = component(v_macro, n, a);
        let rec = g.recovery.apply(&comp);
        let gx: Vec<f64> = rec.gradient.iter().map(|d| d[0]).collect();
        let gy: Vec<f64> = rec.gradient.iter().map(|d| d[1]).collect();
        let h: [Vec<f64>; 3] = std::array::from_fn(|k| rec.hessian.iter().map(|d| d[k]).collect());
        for i in 0..nf {
            let loc = &g.in_macro[i];
            v0[i * n + a] = interp(mm, loc, &comp);
            grad[i * n + a] = [interp(mm, loc, &gx), interp(mm, loc, &gy)];
            hess[i * n + a] = [interp(mm, loc, &h[0]), interp(mm, loc, &h[1]), interp(mm, loc, &h[2])];
        }
    }
    let mut v1 = vec![0.0; nf * n];
    let mut v2 = vec![0.0; nf * n];
    for i in 0..nf {
        for a in 0..n {
            let ga = grad[i * n + a];
            let ha = hess[i * n + a];
            let mut s1 = cells.w[0][i] * ga[0] + cells.w[1][i] * ga[1];
            let mut s2 = cells.p[a][i];
            for b in 0..n {
                let ab = a * n + b;
                s1 += cells.z[ab][i] * v0[i * n + b];
                s2 += cells.q0[ab][i] * v0[i * n + b] + cells.r0[ab][i] * u0[i * n + b];
                let gb = grad[i * n + b];
                for j in 0..2 {
                    s2 += cells.q1[idx3(n, j, a, b)][i] * gb[j];
                }
            }
            // d_j d_k V0_a with the symmetric Hessian [d11, d12, d22].
            let d2 = [[ha[0], ha[1]], [ha[1], ha[2]]];
            for j in 0..2 {
                for k in 0..2 {
                    s2 += cells.q2[j * 2 + k][i] * d2[j][k];
                }
            }
            v1[i * n + a] = s1;
            v2[i * n + a] = s2;
        }
    }
    Expansion { v0, v1, v2 }
}

/// Runs fine and homogenized problems for one `eps` at cell resolution `resolution` and
/// logs the error norms at every time level.
pub fn run_row(
    cfg: &CorrectorConfig,
    constants: &BoundConstants,
    epsilon: f64,
    resolution: usize,
    grid: TimeGrid,
) -> Result<RowRun, CorrectorError> {
    let c = &cfg.coeffs;
    let n = c.n;
    let g = RowGeometry::new(cfg, epsilon, resolution)?;
    let nf = g.fine.num_nodes();
    log::info!("eps = {epsilon}: {} fine nodes, {} macro nodes, cell resolution {resolution}", nf, g.macro_mesh.num_nodes());
    let slow_points = g.slow_points();
    let mut cell_data = tabulate_cells(&g.cell, c, 0.0, &slow_points)?;
    let mut cells = g.node_cells(&cell_data)?;
    let mut fine = Stepper::fine(&g.fine, c, epsilon, grid, cfg.solver)?;
    let mut homog = Stepper::homogenized(&g.macro_mesh, c, &g.cell, grid, cfg.solver)?;
    let mut u0 = fine.u().to_vec();
    let mut u12 = vec![0.0; nf * n];
    let cut = &g.cutoff.values;
    let (e1, e2) = (epsilon, epsilon * epsilon);
    let ode_constant = c.ode_constant();
    let mut ode_cache: Option<OdeMatrices> = None;
    let growth = (constants.l * grid.dt).exp();
    let mut log = Vec::with_capacity(grid.steps + 1);
    let mut bound_sq = 0.0;
    loop {
        let k = fine.step_index();
        let t = fine.t();
        let ex = expansion(&g, n, &cells, homog.v(), &u0);
        let mut v_exp = vec![0.0; nf * n];
        let mut u_exp = vec![0.0; nf * n];
        let mut v12 = vec![0.0; nf * n];
        for i in 0..nf {
            for a in 0..n {
                let d = i * n + a;
                v12[d] = e1 * ex.v1[d] + e2 * ex.v2[d];
                v_exp[d] = ex.v0[d] + cut[i] * v12[d];
                u_exp[d] = u0[d] + cut[i] * u12[d];
            }
        }
        let (phi, phi_l2) = difference_norms(&g.fine, n, fine.v(), &v_exp)?;
        let (psi_semi, psi_l2) = difference_norms(&g.fine, n, fine.u(), &u_exp)?;
        let phi_interior = interior_seminorm(&g.fine, n, cut, fine.v(), &v_exp);
        log.push(TimeLog {
            t,
            phi_norm: phi,
            phi_l2,
            phi_interior,
            psi_norm: (psi_semi * psi_semi + psi_l2 * psi_l2).sqrt(),
            psi_l2,
            psi_bound_sq: bound_sq,
        });
        if fine.done() {
            break;
        }
        bound_sq = growth * (bound_sq + grid.dt * constants.g_n * phi_l2 * phi_l2);
        let t_next = grid.time(k + 1);
        let (l, gm) = match (&ode_cache, ode_constant) {
            (Some(cached), true) => cached.clone(),
            _ => {
                let m = (ode_matrices(&c.l, &g.fine.nodes, t_next), ode_matrices(&c.g, &g.fine.nodes, t));
                if ode_constant {
                    ode_cache = Some(m.clone());
                }
                m
            }
        };
        u0 = rothe_step(&g.fine.nodes, n, &u0, &ex.v0, grid.dt, |v| l[v].clone(), |v| gm[v].clone())?;
        u12 = rothe_step(&g.fine.nodes, n, &u12, &v12, grid.dt, |v| l[v].clone(), |v| gm[v].clone())?;
        fine.step()?;
        homog.step()?;
        if !c.elliptic_constant_in_t() {
            cell_data = tabulate_cells(&g.cell, c, t_next, &slow_points)?;
            cells = g.node_cells(&cell_data)?;
        }
    }
    Ok(RowRun {
        epsilon,
        cell_resolution: resolution,
        steps: grid.steps,
        fine_nodes: nf,
        macro_nodes: g.macro_mesh.num_nodes(),
        cutoff_gradient: g.cutoff.max_scaled_gradient,
        log,
    })
}

/// Least-squares slope of `log value` against `log eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeFit {
    Fitted { slope: f64, intercept: f64, points: usize },
    /// Fewer than three usable points.
    InsufficientPoints(usize),
    /// All values sit at the numerical floor.
    Degenerate,
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Fitted { slope, .. } => Some(*slope),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SlopeFit::Fitted { slope, points, .. } => format!("{slope:.6} ({points} points)"),
            SlopeFit::InsufficientPoints(k) => format!("insufficient points ({k})"),
            SlopeFit::Degenerate => "degenerate (values at the numerical floor)".into(),
        }
    }
}

/// Fits `log y = slope log x + intercept` by least squares; values at or below `floor`
/// are not usable.
pub fn fit_slope(points: &[(f64, f64)], floor: f64) -> SlopeFit {
    if points.len() < 3 {
        return SlopeFit::InsufficientPoints(points.len());
    }
    let usable: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > floor && y.is_finite()).map(|(x, y)| (x.ln(), y.ln())).collect();
    if usable.is_empty() {
        return SlopeFit::Degenerate;
    }
    if usable.len() < 3 {
        return SlopeFit::InsufficientPoints(usable.len());
    }
    let k = usable.len() as f64;
    let (mx, my) = (usable.iter().map(|p| p.0).sum::<f64>() / k, usable.iter().map(|p| p.1).sum::<f64>() / k);
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return SlopeFit::InsufficientPoints(1);
    }
    let slope = sxy / sxx;
    SlopeFit::Fitted { slope, intercept: my - slope * mx, points: usable.len() }
}

type RowOutcome = (Result<RowRun, CorrectorError>, Option<Result<f64, CorrectorError>>);

/// One row of the corrector report.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorRow {
    pub epsilon: f64,
    pub run: Result<RowRun, CorrectorError>,
    /// `|phi(h, dt) - phi(h/2, dt/2)|` at the final time.
    pub self_error: Option<Result<f64, CorrectorError>>,
    /// Bound envelope at the final time, without the calibrated constant.
    pub envelope: f64,
    /// Calibrated bound `C(eps, T)`.
    pub bound: Option<f64>,
    pub ratio: Option<f64>,
    /// Observed rate against the previous successful row.
    pub pair_rate: Option<f64>,
}

impl CorrectorRow {
    pub fn phi_norm(&self) -> Option<f64> {
        self.run.as_ref().ok().map(|r| r.last().phi_norm)
    }

    pub fn psi_norm(&self) -> Option<f64> {
        self.run.as_ref().ok().map(|r| r.last().psi_norm)
    }

    /// True when the discrete displacement bound held at every logged time.
    pub fn psi_bound_holds(&self) -> Option<bool> {
        self.run.as_ref().ok().map(|r| r.log.iter().all(TimeLog::psi_bound_holds))
    }
}

/// Outcome of a sweep over `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorReport {
    pub rows: Vec<CorrectorRow>,
    pub phi_slope: SlopeFit,
    pub psi_slope: SlopeFit,
    /// Lumped constant calibrated at the coarsest successful `eps`.
    pub calibration: Option<f64>,
    pub constants: BoundConstants,
    pub t_end: f64,
}

/// Relative floor under which error norms count as solver noise.
pub const NOISE_FLOOR: f64 = 1e-9;

/// Computes the bound constants used by a sweep.
pub fn sweep_constants(cfg: &CorrectorConfig) -> Result<BoundConstants, CorrectorError> {
    let grid = SampleGrid { t_end: cfg.grid.t_end, points_per_axis: cfg.sample_points };
    let norms = sample_norms(&cfg.coeffs, &grid)?;
    Ok(optimize_eta(&norms, Objective::MinLambdaPlusMu, cfg.eta_points)?.constants)
}

/// Runs the sweep; a failing row is reported without stopping the others.
pub fn run_sweep(cfg: &CorrectorConfig) -> Result<CorrectorReport, CorrectorError> {
    let constants = sweep_constants(cfg)?;
    let mut order: Vec<f64> = cfg.epsilons.clone();
    order.sort_by(|a, b| b.total_cmp(a));
    let res = cfg.cell.resolution;
    let runs: Vec<RowOutcome> = order
        .par_iter()
        .map(|&eps| {
            let base = || run_row(cfg, &constants, eps, res, cfg.grid);
            if !cfg.self_check {
                return (base(), None);
            }
            let (a, b) = rayon::join(base, || run_row(cfg, &constants, eps, 2 * res, cfg.grid.refined()));
            let self_err = match (&a, b) {
                (Ok(a), Ok(b)) => Ok((a.last().phi_norm - b.last().phi_norm).abs()),
                (_, Err(e)) => Err(e),
                (Err(e), _) => Err(e.clone()),
            };
            (a, Some(self_err))
        })
        .collect();
    let t_end = cfg.grid.t_end;
    let mut rows: Vec<CorrectorRow> = order
        .iter()
        .zip(runs)
        .map(|(&eps, (run, self_error))| CorrectorRow {
            epsilon: eps,
            run,
            self_error,
            envelope: constants.corrector_envelope(eps, t_end),
            bound: None,
            ratio: None,
            pair_rate: None,
        })
        .collect();
    let calibration = rows.iter().find_map(|r| r.phi_norm().map(|p| p / r.envelope));
    let mut prev: Option<(f64, f64)> = None;
    for r in &mut rows {
        if let (Some(cal), Some(phi)) = (calibration, r.phi_norm()) {
            let bound = cal * r.envelope;
            r.bound = Some(bound);
            r.ratio = Some(if bound > 0.0 { phi / bound } else { f64::NAN });
            if let Some((pe, pp)) = prev {
                r.pair_rate = Some((pp / phi).ln() / (pe / r.epsilon).ln());
            }
            prev = Some((r.epsilon, phi));
        }
    }
    let scale = rows
        .iter()
        .filter_map(|r| r.run.as_ref().ok())
        .flat_map(|r| r.log.iter().map(|l| l.phi_norm.max(l.psi_norm)))
        .fold(0.0, f64::max);
    let floor = |pts: &[(f64, f64)]| {
        if pts.iter().all(|p| p.1 <= NOISE_FLOOR) {
            f64::INFINITY
        } else {
            NOISE_FLOOR * scale.max(1.0)
        }
    };
    let phi_pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.phi_norm().map(|p| (r.epsilon, p))).collect();
    let psi_pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.psi_norm().map(|p| (r.epsilon, p))).collect();
    let phi_slope = fit_slope(&phi_pts, floor(&phi_pts));
    let psi_slope = fit_slope(&psi_pts, floor(&psi_pts));
    Ok(CorrectorReport { rows, phi_slope, psi_slope, calibration, constants, t_end })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.12e}"))
}

impl CorrectorReport {
    /// CSV with one row per `eps`; the first six columns are the report proper, the rest
    /// expose resolutions and diagnostics.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "eps,phi_norm,psi_norm,bound,ratio,pair_rate,cell_resolution,fine_nodes,steps,self_error,cutoff_gradient,psi_bound_holds,status"
        )?;
        for r in &self.rows {
            let (res, nodes, steps, cg) = match &r.run {
                Ok(run) => (run.cell_resolution.to_string(), run.fine_nodes.to_string(), run.steps.to_string(), format!("{:.6e}", run.cutoff_gradient)),
                Err(_) => Default::default(),
            };
            let self_err = match &r.self_error {
                Some(Ok(v)) => format!("{v:.6e}"),
                _ => String::new(),
            };
            let status = match (&r.run, &r.self_error) {
                (Err(e), _) => format!("error: {e}").replace(',', ";"),
                (_, Some(Err(e))) => format!("self-check error: {e}").replace(',', ";"),
                _ => "ok".into(),
            };
            writeln!(
                w,
                "{:.12e},{},{},{},{},{},{res},{nodes},{steps},{self_err},{cg},{},{status}",
                r.epsilon,
                opt(r.phi_norm()),
                opt(r.psi_norm()),
                opt(r.bound),
                opt(r.ratio),
                opt(r.pair_rate),
                r.psi_bound_holds().map_or_else(String::new, |b| b.to_string()),
            )?;
        }
        Ok(())
    }

    /// Log-log points and fitted lines, one record per line: `series,log10_eps,log10_value`.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "series,log10_eps,log10_value")?;
        for (name, fit, get) in [
            ("phi", self.phi_slope, CorrectorRow::phi_norm as fn(&CorrectorRow) -> Option<f64>),
            ("psi", self.psi_slope, CorrectorRow::psi_norm),
        ] {
            for r in &self.rows {
                if let Some(v) = get(r).filter(|v| *v > 0.0) {
                    writeln!(w, "{name},{:.12e},{:.12e}", r.epsilon.log10(), v.log10())?;
                }
            }
            if let SlopeFit::Fitted { slope, intercept, .. } = fit {
                for r in &self.rows {
                    let le = r.epsilon.ln();
                    writeln!(w, "{name}_fit,{:.12e},{:.12e}", r.epsilon.log10(), (slope * le + intercept) / std::f64::consts::LN_10)?;
                }
            }
        }
        Ok(())
    }

    /// Per-time logs of every successful row.
    pub fn write_time_logs<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "eps,t,phi_norm,phi_l2,phi_interior,psi_norm,psi_l2,psi_bound_sq")?;
        for r in &self.rows {
            if let Ok(run) = &r.run {
                for l in &run.log {
                    writeln!(
                        w,
                        "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                        r.epsilon, l.t, l.phi_norm, l.phi_l2, l.phi_interior, l.psi_norm, l.psi_l2, l.psi_bound_sq
                    )?;
                }
            }
        }
        Ok(())
    }

    /// True when the calibrated ratio never increases as `eps` decreases.
    pub fn ratio_non_increasing(&self, rel_tol: f64) -> bool {
        let ratios: Vec<f64> = self.rows.iter().filter_map(|r| r.ratio).collect();
        ratios.windows(2).all(|w| w[1] <= w[0] * (1.0 + rel_tol))
    }
}

/// One line of the oscillation check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationRow {
    pub epsilon: f64,
    pub integral: f64,
    pub target: f64,
    pub difference: f64,
}

/// Oscillation table with the fitted order of the differences.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationTable {
    pub rows: Vec<OscillationRow>,
    pub order: SlopeFit,
    /// Differences below this count as exact cancellation.
    pub floor: f64,
}

impl OscillationTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "eps,integral,target,difference")?;
        for r in &self.rows {
            writeln!(w, "{:.12e},{:.12e},{:.12e},{:.12e}", r.epsilon, r.integral, r.target, r.difference)?;
        }
        Ok(())
    }

    /// True when no difference grows as `eps` decreases (differences at the floor count
    /// as equal).
    pub fn decreasing(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        rows.windows(2).all(|w| w[1].difference <= w[0].difference.max(self.floor))
    }
}

/// Three-point Gauss-Legendre nodes and weights on `[0, 1]`.
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

fn gauss_2d(intervals: usize, f: impl Fn([f64; 2]) -> f64) -> f64 {
    let h = 1.0 / intervals as f64;
    let mut s = 0.0;
    for j in 0..intervals {
        for (gy, wy) in GAUSS3 {
            let y = (j as f64 + gy) * h;
            for i in 0..intervals {
                for (gx, wx) in GAUSS3 {
                    s += wx * wy * f([(i as f64 + gx) * h, y]);
                }
            }
        }
    }
    s * h * h
}

/// Compares `int_Omega f(x, x/eps) dx` with `(1/|Y|) int_Omega int_Y f(x, y) dy dx` on
/// the unit square, both by composite Gauss quadrature. `per_period` intervals resolve
/// each period; the target uses `64` intervals in `x` and the `y`-periodic midpoint rule
/// with `64` points per axis.
pub fn oscillation_check(f: &Expr, epsilons: &[f64], per_period: usize) -> Result<OscillationTable, CorrectorError> {
    let k = 64usize;
    let target = gauss_2d(k, |x| {
        let mut s = 0.0;
        for j in 0..k {
            for i in 0..k {
                let y = [(i as f64 + 0.5) / k as f64, (j as f64 + 0.5) / k as f64];
                s += f.eval(&Point::new(0.0, x, y));
            }
        }
        s / (k * k) as f64
    });
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cells = DomainSpec::from_epsilon(eps)?.cells_per_side;
        let integral = gauss_2d(cells * per_period.max(1), |x| f.eval(&Point::new(0.0, x, [x[0] / eps, x[1] / eps])));
        rows.push(OscillationRow { epsilon: eps, integral, target, difference: (integral - target).abs() });
    }
    let scale = 1.0f64.max(target.abs());
    let floor = 1e-12 * scale;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon, r.difference)).collect();
    let order = if pts.iter().all(|p| p.1 <= floor) { SlopeFit::Degenerate } else { fit_slope(&pts, floor) };
    Ok(OscillationTable { rows, order, floor })
}

/// `int_0^1 x sin(2 pi x / eps) dx = -eps / (2 pi)` for integer `1/eps`.
pub fn weighted_sine_integral(epsilon: f64) -> f64 {
    -epsilon / (2.0 * PI)
}
