//! Time stepping of the pseudo-parabolic system on the perforated domain and of its
//! homogenized counterpart.
//!
//! Each step solves the elliptic equation
//!
//! ```text
//! M V - div(E grad V + D V) = H + K U + eps J . grad U,   V = 0 on the outer boundary,
//! ```
//!
//! with the natural condition on hole boundaries, then advances the ODE
//! `dU/dt + L U = G V` by the Rothe update
//! `(I + dt L(t_k)) U_k = U_{k-1} + dt G(t_{k-1}) V_{k-1}` node by node.
//! Unknowns are ordered `node * N + species`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cell::{CellContext, CellError};
use crate::coefficients::{idx3, CoefficientSet, DIM};
use crate::effective::{tabulate, EffectiveTensors};
use crate::expr::Point;
use crate::mesh::{Mesh, QUAD_BARY};
use crate::sparse::{Constraint, CsrMatrix, LinAlgError, PreparedSystem, SolveReport, SolverOptions, TripletBuilder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PdeError {
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("time grid: {0}")]
    TimeGrid(String),
    #[error("singular ODE matrix I + dt L at node {node} ({x:?})")]
    SingularOde { node: usize, x: [f64; 2] },
    #[error("field length {got} does not match {expected}")]
    Shape { expected: usize, got: usize },
}

/// Uniform time grid on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self, PdeError> {
        if steps == 0 || !(t_end > 0.0) || !t_end.is_finite() {
            return Err(PdeError::TimeGrid(format!("need t_end > 0 and steps >= 1, got {t_end}, {steps}")));
        }
        Ok(Self { t_end, dt: t_end / steps as f64, steps })
    }

    /// Grid with step `dt`; `t_end / dt` must be an integer up to rounding.
    pub fn from_dt(t_end: f64, dt: f64) -> Result<Self, PdeError> {
        if !(dt > 0.0) {
            return Err(PdeError::TimeGrid(format!("dt must be positive, got {dt}")));
        }
        let k = t_end / dt;
        let steps = k.round();
        if (k - steps).abs() > 1e-9 * k.max(1.0) || steps < 1.0 {
            return Err(PdeError::TimeGrid(format!("t_end = {t_end} is not a multiple of dt = {dt}")));
        }
        Self::new(t_end, steps as usize)
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            k as f64 * self.dt
        }
    }

    /// The same interval with half the step.
    pub fn refined(&self) -> Self {
        Self { t_end: self.t_end, dt: 0.5 * self.dt, steps: 2 * self.steps }
    }
}

/// Elliptic coefficients at one quadrature point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients {
    pub m: Vec<f64>,
    pub e: [[f64; 2]; 2],
    pub d: Vec<f64>,
    pub h: Vec<f64>,
    pub k: Vec<f64>,
    pub j: Vec<f64>,
}

impl LocalCoefficients {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n * n],
            e: [[0.0; 2]; 2],
            d: vec![0.0; DIM * n * n],
            h: vec![0.0; n],
            k: vec![0.0; n * n],
            j: vec![0.0; DIM * n * n],
        }
    }
}

/// Where the elliptic coefficients come from.
#[derive(Debug, Clone)]
pub enum EllipticSource<'a> {
    /// Oscillating coefficients evaluated at `(t, x, x / eps)`; `J` is scaled by `eps`.
    Fine { coeffs: &'a CoefficientSet, epsilon: f64 },
    /// Effective coefficients tabulated at the mesh nodes and interpolated linearly.
    Macro { n: usize, tables: Vec<EffectiveTensors> },
}

impl EllipticSource<'_> {
    pub fn n(&self) -> usize {
        match self {
            EllipticSource::Fine { coeffs, .. } => coeffs.n,
            EllipticSource::Macro { n, .. } => *n,
        }
    }

    fn eval(&self, mesh: &Mesh, t: f64, e: usize, q: usize, x: [f64; 2], out: &mut LocalCoefficients) {
        match self {
            EllipticSource::Fine { coeffs, epsilon } => {
                let p = Point::new(t, x, [x[0] / epsilon, x[1] / epsilon]);
                CoefficientSet::eval_into(&coeffs.m, &p, &mut out.m);
                out.e = coeffs.eval_e(&p);
                CoefficientSet::eval_into(&coeffs.d, &p, &mut out.d);
                CoefficientSet::eval_into(&coeffs.h, &p, &mut out.h);
                CoefficientSet::eval_into(&coeffs.k, &p, &mut out.k);
                CoefficientSet::eval_into(&coeffs.j, &p, &mut out.j);
                for v in &mut out.j {
                    *v *= epsilon;
                }
            }
            EllipticSource::Macro { tables, .. } => {
                let tri = mesh.triangles[e];
                let l = QUAD_BARY[q];
                let lerp = |f: &dyn Fn(&EffectiveTensors) -> f64| -> f64 {
                    l[0] * f(&tables[tri[0]]) + l[1] * f(&tables[tri[1]]) + l[2] * f(&tables[tri[2]])
                };
                for (k, v) in out.m.iter_mut().enumerate() {
                    *v = lerp(&|s| s.mbar[k]);
                }
                for i in 0..2 {
                    for j in 0..2 {
                        out.e[i][j] = lerp(&|s| s.estar[i][j]);
                    }
                }
                for (k, v) in out.d.iter_mut().enumerate() {
                    *v = lerp(&|s| s.dstar[k]);
                }
                for (k, v) in out.h.iter_mut().enumerate() {
                    *v = lerp(&|s| s.hbar[k]);
                }
                for (k, v) in out.k.iter_mut().enumerate() {
                    *v = lerp(&|s| s.kbar[k]);
                }
                out.j.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Assembled elliptic system at one time: `A V = b_h + R U`.
pub struct EllipticAssembly {
    pub operator: CsrMatrix,
    pub load: Vec<f64>,
    pub coupling: CsrMatrix,
}

/// Assembles operator, source load and `U`-coupling on `mesh` at time `t`.
pub fn assemble(mesh: &Mesh, src: &EllipticSource<'_>, t: f64) -> EllipticAssembly {
    let n = src.n();
    let dim = mesh.num_nodes() * n;
    let ne = mesh.num_elements();
    let mut a = TripletBuilder::with_capacity(dim, dim, ne * 9 * n * n * 2);
    let mut r = TripletBuilder::with_capacity(dim, dim, ne * 9 * n * n);
    let mut load = vec![0.0; dim];
    let mut lc = LocalCoefficients::zeros(n);
    for e in 0..ne {
        let tri = mesh.triangles[e];
        let g = &mesh.grads[e];
        let area = mesh.areas[e];
        let w = area / 3.0;
        let mut ebar = [[0.0; 2]; 2];
        for (q, (x, l, _)) in mesh.quadrature(e).into_iter().enumerate() {
            src.eval(mesh, t, e, q, x, &mut lc);
            for i in 0..2 {
                for j in 0..2 {
                    ebar[i][j] += lc.e[i][j] / 3.0;
                }
            }
            for r_ in 0..3 {
                for c_ in 0..3 {
                    let phi = w * l[r_] * l[c_];
                    for al in 0..n {
                        let row = tri[r_] * n + al;
                        for be in 0..n {
                            let col = tri[c_] * n + be;
                            let mut v = phi * lc.m[al * n + be];
                            // drift: grad phi_r . D_{.al be} phi_c
                            v += w * l[c_] * (g[r_][0] * lc.d[idx3(n, 0, al, be)] + g[r_][1] * lc.d[idx3(n, 1, al, be)]);
                            if v != 0.0 {
                                a.add(row, col, v);
                            }
                            // K U + J . grad U
                            let rv = phi * lc.k[al * n + be]
                                + w * l[r_] * (lc.j[idx3(n, 0, al, be)] * g[c_][0] + lc.j[idx3(n, 1, al, be)] * g[c_][1]);
                            if rv != 0.0 {
                                r.add(row, col, rv);
                            }
                        }
                    }
                }
                for al in 0..n {
                    load[tri[r_] * n + al] += w * l[r_] * lc.h[al];
                }
            }
        }
        for r_ in 0..3 {
            for c_ in 0..3 {
                let eg = [
                    ebar[0][0] * g[c_][0] + ebar[0][1] * g[c_][1],
                    ebar[1][0] * g[c_][0] + ebar[1][1] * g[c_][1],
                ];
                let v = area * (g[r_][0] * eg[0] + g[r_][1] * eg[1]);
                for al in 0..n {
                    a.add(tri[r_] * n + al, tri[c_] * n + al, v);
                }
            }
        }
    }
    EllipticAssembly { operator: a.build(), load, coupling: r.build() }
}

fn dirichlet_dofs(mesh: &Mesh, n: usize) -> Vec<usize> {
    mesh.exterior_nodes.iter().flat_map(|&v| (0..n).map(move |a| v * n + a)).collect()
}

/// Elliptic solver on a fixed mesh; the factorisation is kept while the operator does
/// not change in time.
pub struct EllipticSolver<'m> {
    mesh: &'m Mesh,
    n: usize,
    opts: SolverOptions,
    operator_constant: bool,
    rhs_constant: bool,
    cached: Option<(f64, PreparedSystem, Vec<f64>, CsrMatrix)>,
    last: Option<Vec<f64>>,
}

impl<'m> EllipticSolver<'m> {
    pub fn new(mesh: &'m Mesh, n: usize, operator_constant: bool, rhs_constant: bool, opts: SolverOptions) -> Self {
        Self { mesh, n, opts, operator_constant, rhs_constant, cached: None, last: None }
    }

    /// Solves for `V` at time `t` given `U` (both `node * N + species`).
    pub fn solve(&mut self, src: &EllipticSource<'_>, t: f64, u: &[f64]) -> Result<(Vec<f64>, SolveReport), PdeError> {
        let dim = self.mesh.num_nodes() * self.n;
        if u.len() != dim {
            return Err(PdeError::Shape { expected: dim, got: u.len() });
        }
        let reuse_op = matches!(&self.cached, Some((t0, ..)) if self.operator_constant || *t0 == t);
        let reuse_rhs = matches!(&self.cached, Some((t0, ..)) if self.rhs_constant || *t0 == t);
        if !(reuse_op && reuse_rhs) {
            let asm = assemble(self.mesh, src, t);
            let system = if reuse_op {
                self.cached.take().map(|c| c.1).expect("cached system")
            } else {
                let dofs = dirichlet_dofs(self.mesh, self.n);
                let values = vec![0.0; dofs.len()];
                PreparedSystem::new(&asm.operator, Constraint::Dirichlet { dofs, values }, self.opts)?
            };
            self.cached = Some((t, system, asm.load, asm.coupling));
        }
        let (_, system, load, coupling) = self.cached.as_ref().expect("assembled");
        let ru = coupling.mul(u);
        let rhs: Vec<f64> = load.iter().zip(&ru).map(|(a, b)| a + b).collect();
        let (v, rep) = system.solve(&rhs, self.last.as_deref())?;
        self.last = Some(v.clone());
        Ok((v, rep))
    }
}

/// One-shot fine elliptic solve at time `t`.
pub fn elliptic_solve_fine(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    epsilon: f64,
    u: &[f64],
    t: f64,
    opts: SolverOptions,
) -> Result<Vec<f64>, PdeError> {
    let src = EllipticSource::Fine { coeffs, epsilon };
    let mut s = EllipticSolver::new(mesh, coeffs.n, false, false, opts);
    Ok(s.solve(&src, t, u)?.0)
}

/// Rothe update `(I + dt L(t_k, x)) U_k = U_{k-1} + dt G(t_{k-1}, x) V_{k-1}` at every
/// node. `l_at(node)` and `g_at(node)` return row-major `N x N` matrices.
pub fn rothe_step(
    nodes: &[[f64; 2]],
    n: usize,
    u_prev: &[f64],
    v_prev: &[f64],
    dt: f64,
    l_at: impl Fn(usize) -> Vec<f64>,
    g_at: impl Fn(usize) -> Vec<f64>,
) -> Result<Vec<f64>, PdeError> {
    let dim = nodes.len() * n;
    if u_prev.len() != dim || v_prev.len() != dim {
        return Err(PdeError::Shape { expected: dim, got: u_prev.len().min(v_prev.len()) });
    }
    let mut out = vec![0.0; dim];
    for (node, x) in nodes.iter().enumerate() {
        let l = l_at(node);
        let g = g_at(node);
        let mut rhs = DVector::zeros(n);
        for a in 0..n {
            rhs[a] = u_prev[node * n + a];
            for b in 0..n {
                rhs[a] += dt * g[a * n + b] * v_prev[node * n + b];
            }
        }
        let sol = if n == 1 {
            let d = 1.0 + dt * l[0];
            if d.abs() < 1e-14 {
                return Err(PdeError::SingularOde { node, x: *x });
            }
            DVector::from_element(1, rhs[0] / d)
        } else {
            let m = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { 0.0 } + dt * l[a * n + b]);
            m.lu().solve(&rhs).ok_or(PdeError::SingularOde { node, x: *x })?
        };
        for a in 0..n {
            out[node * n + a] = sol[a];
        }
    }
    Ok(out)
}

/// Evaluates `L` or `G` (independent of `y`) at the nodes of a mesh.
pub fn ode_matrices(exprs: &[crate::expr::Expr], nodes: &[[f64; 2]], t: f64) -> Vec<Vec<f64>> {
    nodes.iter().map(|&x| CoefficientSet::eval_vec(exprs, &Point::new(t, x, [0.0, 0.0]))).collect()
}

/// Species `a` of an interleaved field.
pub fn component(field: &[f64], n: usize, a: usize) -> Vec<f64> {
    field.iter().skip(a).step_by(n).copied().collect()
}

/// Squared `L2` norms of `d/dx_i` of a scalar P1 field, `i = 1, 2`.
pub fn directional_seminorms_sq(mesh: &Mesh, field: &[f64]) -> [f64; 2] {
    let mut s = [0.0; 2];
    for e in 0..mesh.num_elements() {
        let g = mesh.gradient(e, field);
        s[0] += mesh.areas[e] * g[0] * g[0];
        s[1] += mesh.areas[e] * g[1] * g[1];
    }
    s
}

/// Constants of the discrete a priori inequality
/// `sum m_a |V_a|^2 + sum e_i |d_i V_a|^2 <= H + sum K_a |U_a|^2 + sum J_ia |d_i U_a|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AprioriConstants {
    pub m_tilde: Vec<f64>,
    pub e_tilde: [f64; 2],
    pub h_tilde: f64,
    pub k_tilde: Vec<f64>,
    /// `J_ia` at `i * N + a`.
    pub j_tilde: Vec<f64>,
}

/// Norms recorded at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub t: f64,
    pub u_h1: f64,
    pub v_l2: f64,
    /// `||grad V||`, the seminorm of the solution space.
    pub v_seminorm: f64,
    /// Left and right side of the a priori inequality when constants were supplied.
    pub apriori: Option<(f64, f64)>,
}

impl EnergyRecord {
    fn measure(mesh: &Mesh, n: usize, t: f64, u: &[f64], v: &[f64], c: Option<&AprioriConstants>) -> Self {
        let (mut u_h1, mut v_l2, mut v_semi) = (0.0, 0.0, 0.0);
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for a in 0..n {
            let (ua, va) = (component(u, n, a), component(v, n, a));
            let (ul2, vl2) = (mesh.l2_norm_sq(&ua), mesh.l2_norm_sq(&va));
            let (ud, vd) = (directional_seminorms_sq(mesh, &ua), directional_seminorms_sq(mesh, &va));
            u_h1 += ul2 + ud[0] + ud[1];
            v_l2 += vl2;
            v_semi += vd[0] + vd[1];
            if let Some(c) = c {
                lhs += c.m_tilde[a] * vl2 + c.e_tilde[0] * vd[0] + c.e_tilde[1] * vd[1];
                rhs += c.k_tilde[a] * ul2 + c.j_tilde[a] * ud[0] + c.j_tilde[n + a] * ud[1];
            }
        }
        let apriori = c.map(|c| (lhs, rhs + c.h_tilde));
        Self { t, u_h1: u_h1.sqrt(), v_l2: v_l2.sqrt(), v_seminorm: v_semi.sqrt(), apriori }
    }
}

/// State of a pseudo-parabolic run at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Which states a run keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    All,
    Final,
}

/// Trajectory of a run: kept states plus the energy log of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub grid: TimeGrid,
    pub states: Vec<FieldState>,
    pub energies: Vec<EnergyRecord>,
}

impl Trajectory {
    pub fn last(&self) -> &FieldState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Steps at which the a priori inequality failed (relative slack `1e-10`).
    pub fn apriori_violations(&self) -> Vec<usize> {
        self.energies
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.apriori.and_then(|(l, r)| (l > r * (1.0 + 1e-10) + 1e-14).then_some(k)))
            .collect()
    }
}

/// Nodal `L` and `G` matrices, row-major per node.
pub type OdeMatrices = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Alternates elliptic solves and Rothe updates on one mesh.
pub struct Stepper<'a> {
    pub mesh: &'a Mesh,
    coeffs: &'a CoefficientSet,
    src: EllipticSource<'a>,
    cell: Option<&'a CellContext>,
    solver: EllipticSolver<'a>,
    grid: TimeGrid,
    apriori: Option<AprioriConstants>,
    k: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    ode_cache: Option<OdeMatrices>,
}

impl<'a> Stepper<'a> {
    /// Fine problem on the perforated mesh for period `epsilon`.
    pub fn fine(
        mesh: &'a Mesh,
        coeffs: &'a CoefficientSet,
        epsilon: f64,
        grid: TimeGrid,
        opts: SolverOptions,
    ) -> Result<Self, PdeError> {
        let src = EllipticSource::Fine { coeffs, epsilon };
        Self::start(mesh, coeffs, src, None, grid, opts)
    }

    /// Homogenized problem on an unperforated mesh, with effective tensors from `cell`.
    pub fn homogenized(
        mesh: &'a Mesh,
        coeffs: &'a CoefficientSet,
        cell: &'a CellContext,
        grid: TimeGrid,
        opts: SolverOptions,
    ) -> Result<Self, PdeError> {
        let tables = tabulate(cell, coeffs, 0.0, &mesh.nodes)?;
        let src = EllipticSource::Macro { n: coeffs.n, tables };
        Self::start(mesh, coeffs, src, Some(cell), grid, opts)
    }

    fn start(
        mesh: &'a Mesh,
        coeffs: &'a CoefficientSet,
        src: EllipticSource<'a>,
        cell: Option<&'a CellContext>,
        grid: TimeGrid,
        opts: SolverOptions,
    ) -> Result<Self, PdeError> {
        let n = coeffs.n;
        let op_const = coeffs.operator_constant_in_t();
        let rhs_const = !coeffs.h.iter().chain(&coeffs.k).chain(&coeffs.j).any(|e| e.depends_on_t());
        let solver = EllipticSolver::new(mesh, n, op_const, rhs_const, opts);
        let mut u = vec![0.0; mesh.num_nodes() * n];
        for (v, &x) in mesh.nodes.iter().enumerate() {
            let p = Point::new(0.0, x, [0.0, 0.0]);
            for a in 0..n {
                u[v * n + a] = coeffs.ustar[a].eval(&p);
            }
        }
        let mut s = Self { mesh, coeffs, src, cell, solver, grid, apriori: None, k: 0, u, v: Vec::new(), ode_cache: None };
        s.v = s.solve_v()?;
        Ok(s)
    }

    /// Enables the per-step a priori check.
    pub fn with_apriori(mut self, c: AprioriConstants) -> Self {
        self.apriori = Some(c);
        self
    }

    fn solve_v(&mut self) -> Result<Vec<f64>, PdeError> {
        let t = self.t();
        if let (EllipticSource::Macro { tables, .. }, Some(cell)) = (&mut self.src, self.cell) {
            if self.k > 0 && !self.coeffs.elliptic_constant_in_t() {
                *tables = tabulate(cell, self.coeffs, t, &self.mesh.nodes)?;
            }
        }
        Ok(self.solver.solve(&self.src, t, &self.u)?.0)
    }

    pub fn n(&self) -> usize {
        self.coeffs.n
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.grid.time(self.k)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn done(&self) -> bool {
        self.k >= self.grid.steps
    }

    /// Effective tensors at the nodes for a homogenized run.
    pub fn effective_tables(&self) -> Option<&[EffectiveTensors]> {
        match &self.src {
            EllipticSource::Macro { tables, .. } => Some(tables),
            EllipticSource::Fine { .. } => None,
        }
    }

    pub fn energy(&self) -> EnergyRecord {
        EnergyRecord::measure(self.mesh, self.n(), self.t(), &self.u, &self.v, self.apriori.as_ref())
    }

    /// `L(t)` and `G(t)` at the nodes, cached when they are constant.
    pub fn ode_at(&mut self, t_l: f64, t_g: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        if self.coeffs.ode_constant() {
            if self.ode_cache.is_none() {
                let nodes = &self.mesh.nodes;
                self.ode_cache = Some((ode_matrices(&self.coeffs.l, nodes, 0.0), ode_matrices(&self.coeffs.g, nodes, 0.0)));
            }
            return self.ode_cache.clone().expect("cached");
        }
        (ode_matrices(&self.coeffs.l, &self.mesh.nodes, t_l), ode_matrices(&self.coeffs.g, &self.mesh.nodes, t_g))
    }

    /// Advances `U` with the Rothe update, then solves for the new `V`.
    pub fn step(&mut self) -> Result<(), PdeError> {
        let t_prev = self.t();
        let t_next = self.grid.time(self.k + 1);
        let (l, g) = self.ode_at(t_next, t_prev);
        let u = rothe_step(&self.mesh.nodes, self.n(), &self.u, &self.v, self.grid.dt, |v| l[v].clone(), |v| g[v].clone())?;
        self.u = u;
        self.k += 1;
        self.v = self.solve_v()?;
        Ok(())
    }

    /// Runs to the end of the grid.
    pub fn run(mut self, keep: Keep) -> Result<Trajectory, PdeError> {
        let mut states = Vec::new();
        let mut energies = vec![self.energy()];
        if keep == Keep::All {
            states.push(FieldState { t: self.t(), u: self.u.clone(), v: self.v.clone() });
        }
        while !self.done() {
            self.step()?;
            energies.push(self.energy());
            if keep == Keep::All || self.done() {
                states.push(FieldState { t: self.t(), u: self.u.clone(), v: self.v.clone() });
            }
        }
        Ok(Trajectory { n: self.n(), grid: self.grid, states, energies })
    }
}

/// Runs the fine problem on the perforated mesh.
pub fn run_fine(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    epsilon: f64,
    grid: TimeGrid,
    opts: SolverOptions,
    apriori: Option<AprioriConstants>,
    keep: Keep,
) -> Result<Trajectory, PdeError> {
    let mut s = Stepper::fine(mesh, coeffs, epsilon, grid, opts)?;
    if let Some(c) = apriori {
        s = s.with_apriori(c);
    }
    s.run(keep)
}

/// Runs the homogenized problem on an unperforated mesh.
pub fn run_macro(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    cell: &CellContext,
    grid: TimeGrid,
    opts: SolverOptions,
    keep: Keep,
) -> Result<Trajectory, PdeError> {
    Stepper::homogenized(mesh, coeffs, cell, grid, opts)?.run(keep)
}

/// Recovered first and second derivatives of a scalar nodal field.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub gradient: Vec<[f64; 2]>,
    /// `[d11, d12, d22]` per node.
    pub hessian: Vec<[f64; 3]>,
}

/// Node-to-node adjacency of a mesh.
pub fn node_neighbours(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); mesh.num_nodes()];
    for t in &mesh.triangles {
        for a in 0..3 {
            for b in 0..3 {
                if a != b && !adj[t[a]].contains(&t[b]) {
                    adj[t[a]].push(t[b]);
                }
            }
        }
    }
    adj
}

/// Least-squares quadratic fit over the two-ring patch of every node, prepared once
/// per mesh: each node stores the rows of the pseudo-inverse that map patch values to
/// the first and second derivatives of the fitted polynomial at the node.
#[derive(Debug, Clone)]
pub struct DerivativeRecovery {
    patches: Vec<Vec<usize>>,
    /// Five rows (d1, d2, d11, d12, d22) per node, each of patch length.
    rows: Vec<Vec<[f64; 5]>>,
}

impl DerivativeRecovery {
    pub fn new(mesh: &Mesh) -> Self {
        let adj = node_neighbours(mesh);
        let h = mesh.grid_spacing();
        let scale = [1.0 / h, 1.0 / h, 2.0 / (h * h), 1.0 / (h * h), 2.0 / (h * h)];
        let mut patches = Vec::with_capacity(mesh.num_nodes());
        let mut rows = Vec::with_capacity(mesh.num_nodes());
        for v in 0..mesh.num_nodes() {
            let mut patch = vec![v];
            for &a in &adj[v] {
                if !patch.contains(&a) {
                    patch.push(a);
                }
            }
            let ring1 = patch.len();
            for i in 1..ring1 {
                for &b in &adj[patch[i]] {
                    if !patch.contains(&b) {
                        patch.push(b);
                    }
                }
            }
            let x0 = mesh.nodes[v];
            let a = DMatrix::from_fn(patch.len(), 6, |r, c| {
                let p = mesh.nodes[patch[r]];
                let (dx, dy) = ((p[0] - x0[0]) / h, (p[1] - x0[1]) / h);
                [1.0, dx, dy, dx * dx, dx * dy, dy * dy][c]
            });
            let pinv = a.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(6, patch.len()));
            let r: Vec<[f64; 5]> = (0..patch.len()).map(|c| std::array::from_fn(|k| scale[k] * pinv[(k + 1, c)])).collect();
            patches.push(patch);
            rows.push(r);
        }
        Self { patches, rows }
    }

    /// Derivatives of a scalar nodal field.
    pub fn apply(&self, field: &[f64]) -> Recovered {
        let mut gradient = Vec::with_capacity(self.patches.len());
        let mut hessian = Vec::with_capacity(self.patches.len());
        for (patch, rows) in self.patches.iter().zip(&self.rows) {
            let mut d = [0.0; 5];
            for (&v, r) in patch.iter().zip(rows) {
                for k in 0..5 {
                    d[k] += r[k] * field[v];
                }
            }
            gradient.push([d[0], d[1]]);
            hessian.push([d[2], d[3], d[4]]);
        }
        Recovered { gradient, hessian }
    }
}

/// One-off derivative recovery; see [`DerivativeRecovery`].
pub fn recover_derivatives(mesh: &Mesh, field: &[f64]) -> Recovered {
    DerivativeRecovery::new(mesh).apply(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellOptions;
    use crate::mesh::{CellSpec, DomainSpec};
    use std::f64::consts::PI;

    fn scalar(entries: &[(&str, &str)]) -> CoefficientSet {
        CoefficientSet::from_entries(1, entries.iter().copied()).unwrap()
    }

    #[test]
    fn zero_data_gives_zero() {
        let mesh = Mesh::unit_square(4).unwrap();
        let c = scalar(&[("M.11", "1"), ("E.11", "1"), ("E.22", "1")]);
        let v = elliptic_solve_fine(&mesh, &c, 1.0, &vec![0.0; mesh.num_nodes()], 0.0, SolverOptions::default()).unwrap();
        assert!(v.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn dense_oracle_on_small_grid() {
        let mesh = Mesh::unit_square(4).unwrap();
        let c = scalar(&[("M.11", "1"), ("E.11", "1"), ("E.22", "1"), ("H.1", "1")]);
        let v = elliptic_solve_fine(&mesh, &c, 1.0, &vec![0.0; mesh.num_nodes()], 0.0, SolverOptions::default()).unwrap();
        let asm = assemble(&mesh, &EllipticSource::Fine { coeffs: &c, epsilon: 1.0 }, 0.0);
        let nn = mesh.num_nodes();
        let mut dense = DMatrix::from_fn(nn, nn, |i, j| asm.operator.get(i, j));
        let mut rhs = DVector::from_vec(asm.load.clone());
        for &b in &mesh.exterior_nodes {
            dense.row_mut(b).fill(0.0);
            dense[(b, b)] = 1.0;
            rhs[b] = 0.0;
        }
        let oracle = dense.lu().solve(&rhs).unwrap();
        for i in 0..nn {
            assert!((v[i] - oracle[i]).abs() < 1e-9);
        }
        assert!(v.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn manufactured_solution_converges() {
        let c = scalar(&[("M.11", "1"), ("E.11", "1"), ("E.22", "1"), ("H.1", "(1 + 2*pi^2)*sin(pi*x1)*sin(pi*x2)")]);
        let err = |n: usize| {
            let mesh = Mesh::unit_square(n).unwrap();
            let v = elliptic_solve_fine(&mesh, &c, 1.0, &vec![0.0; mesh.num_nodes()], 0.0, SolverOptions::default()).unwrap();
            let d: Vec<f64> =
                mesh.nodes.iter().zip(&v).map(|(p, a)| a - (PI * p[0]).sin() * (PI * p[1]).sin()).collect();
            mesh.l2_norm_sq(&d).sqrt()
        };
        let (a, b) = (err(16), err(32));
        assert!((a / b).log2() > 1.8, "{a} {b}");
    }

    #[test]
    fn rothe_closed_forms() {
        let nodes = [[0.5, 0.5]];
        let dt = 0.1;
        let mut u = vec![1.0];
        for _ in 0..10 {
            u = rothe_step(&nodes, 1, &u, &[0.0], dt, |_| vec![1.0], |_| vec![0.0]).unwrap();
        }
        assert!((u[0] - 1.1f64.powi(-10)).abs() < 1e-14);
        let mut u = vec![0.0];
        for _ in 0..10 {
            u = rothe_step(&nodes, 1, &u, &[1.0], dt, |_| vec![0.0], |_| vec![1.0]).unwrap();
        }
        assert!((u[0] - 1.0).abs() < 1e-14);
        let err = rothe_step(&nodes, 1, &[1.0], &[0.0], 1.0, |_| vec![-1.0], |_| vec![0.0]).unwrap_err();
        assert!(matches!(err, PdeError::SingularOde { node: 0, .. }));
    }

    #[test]
    fn macro_equals_fine_for_trivial_homogenization() {
        let c = scalar(&[("M.11", "1"), ("E.11", "1"), ("E.22", "2"), ("D.111", "0.3"), ("H.1", "1"), ("K.11", "0.5"), ("L.11", "1"), ("G.11", "1")]);
        let cell = CellContext::new(&CellSpec::unperforated(4), CellOptions::default()).unwrap();
        let fine_mesh = Mesh::perforated_domain(&cell.mesh, &DomainSpec::from_epsilon(0.25).unwrap()).unwrap();
        let macro_mesh = Mesh::unit_square(16).unwrap();
        let grid = TimeGrid::new(0.1, 5).unwrap();
        let f = run_fine(&fine_mesh, &c, 0.25, grid, SolverOptions::default(), None, Keep::Final).unwrap();
        let m = run_macro(&macro_mesh, &c, &cell, grid, SolverOptions::default(), Keep::Final).unwrap();
        // Same node set, possibly in a different order.
        for (p, (uf, vf)) in fine_mesh.nodes.iter().zip(f.last().u.iter().zip(&f.last().v)) {
            let j = macro_mesh.nodes.iter().position(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12).unwrap();
            assert!((uf - m.last().u[j]).abs() < 1e-9 && (vf - m.last().v[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn recovery_is_exact_for_quadratics() {
        let mesh = Mesh::unit_square(8).unwrap();
        let f: Vec<f64> = mesh.nodes.iter().map(|p| 1.0 + 2.0 * p[0] - p[1] + 3.0 * p[0] * p[0] + p[0] * p[1] - 2.0 * p[1] * p[1]).collect();
        let r = recover_derivatives(&mesh, &f);
        for (p, (g, h)) in mesh.nodes.iter().zip(r.gradient.iter().zip(&r.hessian)) {
            assert!((g[0] - (2.0 + 6.0 * p[0] + p[1])).abs() < 1e-8);
            assert!((g[1] - (-1.0 + p[0] - 4.0 * p[1])).abs() < 1e-8);
            assert!((h[0] - 6.0).abs() < 1e-7 && (h[1] - 1.0).abs() < 1e-7 && (h[2] + 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn time_grid_checks() {
        assert!(TimeGrid::from_dt(0.25, 1.0 / 200.0).unwrap().steps == 50);
        assert!(TimeGrid::from_dt(0.25, 0.3).is_err());
        assert!(TimeGrid::new(0.0, 3).is_err());
    }
}
