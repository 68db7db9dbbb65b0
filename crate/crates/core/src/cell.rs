//! Periodic cell problems on the perforated cell `Y*`.
//!
//! Every cell problem has the weak form: find a periodic, mean-zero `w` with
//!
//! ```text
//! int_{Y*} A grad w . grad v = int_{Y*} F v - int_{Y*} G . grad v - int_{hole} g v
//! ```
//!
//! for all periodic `v`. Solvability requires `int F = int g`; the mean-zero constraint
//! is imposed through a bordered system whose multiplier equals the compatibility
//! defect divided by `|Y*|`.
//!
//! The first-order functions `W_j` (flux `E e_j`) and `Z_ab` (flux `D_.ab`) and the
//! second-order functions `P`, `Q0`, `R0`, `Q1`, `Q2` of the two-scale expansion are
//! built on top of this operation. Their loads subtract `Y*`-means so that each
//! problem is compatible on perforated cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coefficients::{idx3, CoefficientSet, DIM};
use crate::effective::EffectiveTensors;
use crate::expr::Point;
use crate::mesh::{BoundaryTag, CellSpec, Mesh, MeshError, EDGE_GAUSS, QUAD_BARY};
use crate::sparse::{Constraint, LinAlgError, PreparedSystem, SolverOptions, TripletBuilder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
    #[error("incompatible cell load: int F - int g = {defect:e} (scale {scale:e})")]
    Incompatible { defect: f64, scale: f64 },
    #[error("weak residual {0:e} exceeds tolerance")]
    WeakResidual(f64),
    #[error("cell load has wrong length: {0}")]
    LoadShape(&'static str),
}

/// Tolerances of cell solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOptions {
    pub solver: SolverOptions,
    /// Relative tolerance on `|int F - int g|` against `int |F| + int |g|`.
    pub compat_tol: f64,
    /// Relative tolerance of the weak-residual check.
    pub residual_tol: f64,
    /// Number of random periodic test fields in the weak-residual check.
    pub residual_probes: usize,
    pub seed: u64,
    /// Step of the central differences in the slow variable for cell solutions.
    pub x_step: f64,
}

impl Default for CellOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            compat_tol: 1e-8,
            residual_tol: 1e-8,
            residual_probes: 20,
            seed: 0x5eed,
            x_step: 1e-4,
        }
    }
}

/// Load of a cell problem. Volume and flux data live at the element quadrature points
/// (`3 * elements`, element-major); boundary data at the two Gauss points of every hole
/// edge (`2 * hole edges`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellLoad {
    pub volume: Option<Vec<f64>>,
    pub flux: Option<Vec<[f64; 2]>>,
    pub boundary: Option<Vec<f64>>,
}

/// Result of one cell solve: nodal values on all mesh nodes (periodic images agree).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    pub values: Vec<f64>,
    pub multiplier: f64,
    pub compat_defect: f64,
    pub weak_residual: f64,
}

/// Quadrature point data on a hole edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePoint {
    pub position: [f64; 2],
    /// Outward normal of `Y*` (pointing into the hole).
    pub normal: [f64; 2],
    pub weight: f64,
    pub nodes: [usize; 2],
    /// Barycentric weights of `nodes` at this point.
    pub shape: [f64; 2],
}

/// Cell mesh with its periodic degree-of-freedom numbering.
#[derive(Debug, Clone)]
pub struct CellContext {
    pub mesh: Mesh,
    pub opts: CellOptions,
    dof_of_node: Vec<usize>,
    ndof: usize,
    weights: Vec<f64>,
    edge_points: Vec<EdgePoint>,
    qp_positions: Vec<[f64; 2]>,
    measure: f64,
}

impl CellContext {
    pub fn new(spec: &CellSpec, opts: CellOptions) -> Result<Self, CellError> {
        Ok(Self::from_mesh(Mesh::cell(spec)?, opts))
    }

    pub fn from_mesh(mesh: Mesh, opts: CellOptions) -> Self {
        let nn = mesh.num_nodes();
        let mut dof_of_node = vec![usize::MAX; nn];
        let mut ndof = 0;
        for v in 0..nn {
            if !mesh.periodic_pairs.contains_key(&v) {
                dof_of_node[v] = ndof;
                ndof += 1;
            }
        }
        for (&s, &m) in &mesh.periodic_pairs {
            dof_of_node[s] = dof_of_node[m];
        }
        let mut weights = vec![0.0; ndof];
        for (v, w) in mesh.lumped_weights().iter().enumerate() {
            weights[dof_of_node[v]] += w;
        }
        let mut edge_points = Vec::new();
        for e in mesh.boundary_edges.iter().filter(|e| e.tag == BoundaryTag::Hole) {
            let (a, b) = (mesh.nodes[e.nodes[0]], mesh.nodes[e.nodes[1]]);
            for &s in &EDGE_GAUSS {
                edge_points.push(EdgePoint {
                    position: [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])],
                    normal: e.normal,
                    weight: 0.5 * e.length,
                    nodes: e.nodes,
                    shape: [1.0 - s, s],
                });
            }
        }
        let mut qp_positions = Vec::with_capacity(3 * mesh.num_elements());
        for e in 0..mesh.num_elements() {
            for (p, _, _) in mesh.quadrature(e) {
                qp_positions.push(p);
            }
        }
        let measure = mesh.area();
        Self { mesh, opts, dof_of_node, ndof, weights, edge_points, qp_positions, measure }
    }

    /// `|Y*|`; the cell `Y` itself has unit measure.
    pub fn measure(&self) -> f64 {
        self.measure
    }

    /// Porosity `|Y*| / |Y|`.
    pub fn porosity(&self) -> f64 {
        self.measure
    }

    pub fn num_dofs(&self) -> usize {
        self.ndof
    }

    pub fn qp_positions(&self) -> &[[f64; 2]] {
        &self.qp_positions
    }

    pub fn num_qp(&self) -> usize {
        self.qp_positions.len()
    }

    pub fn edge_points(&self) -> &[EdgePoint] {
        &self.edge_points
    }

    /// Quadrature weight of flat quadrature index `q`.
    #[inline]
    pub fn qp_weight(&self, q: usize) -> f64 {
        self.mesh.areas[q / 3] / 3.0
    }

    /// `int_{Y*} f` for quadrature-point data.
    pub fn integrate_qp(&self, values: &[f64]) -> f64 {
        values.iter().enumerate().map(|(q, v)| self.qp_weight(q) * v).sum()
    }

    /// `Y*`-mean of quadrature-point data.
    pub fn mean_qp(&self, values: &[f64]) -> f64 {
        self.integrate_qp(values) / self.measure
    }

    /// Interpolates a nodal field at the quadrature points.
    pub fn nodal_to_qp(&self, field: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_qp());
        for t in &self.mesh.triangles {
            let (a, b, c) = (field[t[0]], field[t[1]], field[t[2]]);
            for l in &QUAD_BARY {
                out.push(l[0] * a + l[1] * b + l[2] * c);
            }
        }
        out
    }

    /// Element-wise gradients of a nodal field.
    pub fn gradients(&self, field: &[f64]) -> Vec<[f64; 2]> {
        (0..self.mesh.num_elements()).map(|e| self.mesh.gradient(e, field)).collect()
    }

    /// Evaluates `f` at every quadrature point.
    pub fn sample_qp<T>(&self, f: impl Fn([f64; 2]) -> T) -> Vec<T> {
        self.qp_positions.iter().map(|&p| f(p)).collect()
    }

    /// Assembles and factorises the operator `-div(A grad .)` for `A` given at the
    /// quadrature points.
    pub fn operator(&self, a_qp: &[[[f64; 2]; 2]]) -> Result<CellOperator<'_>, CellError> {
        if a_qp.len() != self.num_qp() {
            return Err(CellError::LoadShape("operator coefficient"));
        }
        let ne = self.mesh.num_elements();
        let mut b = TripletBuilder::with_capacity(self.ndof, self.ndof, 9 * ne);
        for e in 0..ne {
            let mut abar = [[0.0; 2]; 2];
            for q in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        abar[i][j] += a_qp[3 * e + q][i][j] / 3.0;
                    }
                }
            }
            let g = &self.mesh.grads[e];
            let t = self.mesh.triangles[e];
            let area = self.mesh.areas[e];
            for r in 0..3 {
                for c in 0..3 {
                    let ag = [
                        abar[0][0] * g[c][0] + abar[0][1] * g[c][1],
                        abar[1][0] * g[c][0] + abar[1][1] * g[c][1],
                    ];
                    let v = area * (g[r][0] * ag[0] + g[r][1] * ag[1]);
                    b.add(self.dof_of_node[t[r]], self.dof_of_node[t[c]], v);
                }
            }
        }
        let matrix = b.build();
        let system =
            PreparedSystem::new(&matrix, Constraint::ZeroMean { weights: self.weights.clone() }, self.opts.solver)?;
        Ok(CellOperator { ctx: self, matrix, system })
    }
}

/// Factorised cell operator, reusable for many loads.
pub struct CellOperator<'a> {
    ctx: &'a CellContext,
    matrix: crate::sparse::CsrMatrix,
    system: PreparedSystem,
}

impl CellOperator<'_> {
    /// Solves one cell problem after checking compatibility of the load.
    pub fn solve(&self, load: &CellLoad) -> Result<CellSolution, CellError> {
        let ctx = self.ctx;
        let nq = ctx.num_qp();
        let mut rhs = vec![0.0; ctx.ndof];
        // Sum of absolute contributions per dof, the scale of cancellation in `rhs`.
        let mut rhs_abs = vec![0.0; ctx.ndof];
        let (mut int_f, mut abs_f, mut int_g, mut abs_g) = (0.0, 0.0, 0.0, 0.0);
        if let Some(f) = &load.volume {
            if f.len() != nq {
                return Err(CellError::LoadShape("volume"));
            }
            for (e, t) in ctx.mesh.triangles.iter().enumerate() {
                let w = ctx.mesh.areas[e] / 3.0;
                for (q, l) in QUAD_BARY.iter().enumerate() {
                    let fv = f[3 * e + q];
                    int_f += w * fv;
                    abs_f += w * fv.abs();
                    for r in 0..3 {
                        rhs[ctx.dof_of_node[t[r]]] += w * fv * l[r];
                        rhs_abs[ctx.dof_of_node[t[r]]] += (w * fv * l[r]).abs();
                    }
                }
            }
        }
        if let Some(gflux) = &load.flux {
            if gflux.len() != nq {
                return Err(CellError::LoadShape("flux"));
            }
            for (e, t) in ctx.mesh.triangles.iter().enumerate() {
                let w = ctx.mesh.areas[e] / 3.0;
                let grads = &ctx.mesh.grads[e];
                let mut s = [0.0; 2];
                for q in 0..3 {
                    s[0] += w * gflux[3 * e + q][0];
                    s[1] += w * gflux[3 * e + q][1];
                }
                for r in 0..3 {
                    let v = s[0] * grads[r][0] + s[1] * grads[r][1];
                    rhs[ctx.dof_of_node[t[r]]] -= v;
                    rhs_abs[ctx.dof_of_node[t[r]]] += v.abs();
                }
            }
        }
        if let Some(g) = &load.boundary {
            if g.len() != ctx.edge_points.len() {
                return Err(CellError::LoadShape("boundary"));
            }
            for (ep, &gv) in ctx.edge_points.iter().zip(g) {
                int_g += ep.weight * gv;
                abs_g += ep.weight * gv.abs();
                for k in 0..2 {
                    let v = ep.weight * gv * ep.shape[k];
                    rhs[ctx.dof_of_node[ep.nodes[k]]] -= v;
                    rhs_abs[ctx.dof_of_node[ep.nodes[k]]] += v.abs();
                }
            }
        }
        let defect = int_f - int_g;
        let scale = abs_f + abs_g;
        if defect.abs() > ctx.opts.compat_tol * scale.max(f64::MIN_POSITIVE) && defect.abs() > 1e-14 {
            return Err(CellError::Incompatible { defect, scale });
        }
        let (x, report) = self.system.solve(&rhs, None)?;
        let weak_residual = self.weak_residual(&x, &rhs, &rhs_abs);
        if weak_residual > ctx.opts.residual_tol {
            return Err(CellError::WeakResidual(weak_residual));
        }
        let values = ctx.dof_of_node.iter().map(|&d| x[d]).collect();
        Ok(CellSolution { values, multiplier: report.multiplier, compat_defect: defect, weak_residual })
    }

    /// Largest normalised `|v^T (A x - b)|` over random periodic test fields.
    fn weak_residual(&self, x: &[f64], b: &[f64], b_abs: &[f64]) -> f64 {
        let ax = self.matrix.mul(x);
        let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diag = self.matrix.diagonal();
        let scale = (norm(&ax) + norm(b_abs)).max(1e-12 * norm(&diag));
        if scale == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.ctx.opts.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..self.ctx.opts.residual_probes {
            let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(&r).map(|(a, b)| a * b).sum();
            worst = worst.max(dot.abs() / (vn * scale));
        }
        worst
    }
}

/// Solves `-div(A grad w) = F` in `Y*`, `-(A grad w) . n = g` on the hole boundary,
/// periodic with zero mean. `g` receives the point and the outward normal of `Y*`.
pub fn solve_generic(
    ctx: &CellContext,
    a: impl Fn([f64; 2]) -> [[f64; 2]; 2],
    f: impl Fn([f64; 2]) -> f64,
    g: impl Fn([f64; 2], [f64; 2]) -> f64,
) -> Result<CellSolution, CellError> {
    let op = ctx.operator(&ctx.sample_qp(&a))?;
    let load = CellLoad {
        volume: Some(ctx.sample_qp(&f)),
        flux: None,
        boundary: Some(ctx.edge_points.iter().map(|ep| g(ep.position, ep.normal)).collect()),
    };
    op.solve(&load)
}

/// First-order cell functions at one slow point.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderCells {
    /// `W_j`, `j = 1, 2`.
    pub w: [Vec<f64>; 2],
    /// `Z_ab` at index `a * n + b`.
    pub z: Vec<Vec<f64>>,
}

/// Second-order cell functions at one slow point.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderCells {
    /// `P_a`.
    pub p: Vec<Vec<f64>>,
    /// `Q0_ab`, multiplying `V0_b`.
    pub q0: Vec<Vec<f64>>,
    /// `R0_ab`, multiplying `U0_b`.
    pub r0: Vec<Vec<f64>>,
    /// `Q1_jab` at [`idx3`]`(n, j, a, b)`, multiplying `d_j V0_b`.
    pub q1: Vec<Vec<f64>>,
    /// `R1_jab`; identically zero because `U0` carries no fast dependence.
    pub r1: Vec<Vec<f64>>,
    /// `Q2_jk` at `j * 2 + k`, multiplying `d_j d_k V0_a`.
    pub q2: Vec<Vec<f64>>,
}

/// Everything the cell level provides at one slow point `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPointData {
    pub t: f64,
    pub x: [f64; 2],
    pub first: FirstOrderCells,
    pub second: Option<SecondOrderCells>,
    pub effective: EffectiveTensors,
    /// Largest `|multiplier|` over all solves, a measure of residual incompatibility.
    pub max_multiplier: f64,
}

/// Coefficient values at the cell quadrature points for a fixed slow point.
pub(crate) struct QpCoefficients {
    pub e: Vec<[[f64; 2]; 2]>,
    /// `d[q][idx3(n, i, a, b)]`
    pub d: Vec<Vec<f64>>,
}

impl QpCoefficients {
    pub(crate) fn new(ctx: &CellContext, c: &CoefficientSet, t: f64, x: [f64; 2]) -> Self {
        let e = ctx.sample_qp(|y| c.eval_e(&Point::new(t, x, y)));
        let d = ctx.sample_qp(|y| CoefficientSet::eval_vec(&c.d, &Point::new(t, x, y)));
        Self { e, d }
    }
}

/// First-order solutions and their total fluxes at the quadrature points.
pub(crate) struct FirstOrderQp {
    pub cells: FirstOrderCells,
    /// `E_ij + E_ik d_k W_j` at `q`, index `i * 2 + j`.
    pub flux_w: Vec<[f64; 4]>,
    /// `D_iab + E_ik d_k Z_ab` at `q`, index [`idx3`].
    pub flux_z: Vec<Vec<f64>>,
    pub max_multiplier: f64,
}

pub(crate) fn solve_first_order_qp(
    ctx: &CellContext,
    n: usize,
    coef: &QpCoefficients,
) -> Result<FirstOrderQp, CellError> {
    let op = ctx.operator(&coef.e)?;
    let nq = ctx.num_qp();
    let mut maxm: f64 = 0.0;
    let mut solve_flux = |flux: Vec<[f64; 2]>| -> Result<Vec<f64>, CellError> {
        let s = op.solve(&CellLoad { volume: None, flux: Some(flux), boundary: None })?;
        maxm = maxm.max(s.multiplier.abs());
        Ok(s.values)
    };
    let w0 = solve_flux((0..nq).map(|q| [coef.e[q][0][0], coef.e[q][1][0]]).collect())?;
    let w1 = solve_flux((0..nq).map(|q| [coef.e[q][0][1], coef.e[q][1][1]]).collect())?;
    let mut z = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let all_zero = coef.d.iter().all(|d| d[idx3(n, 0, a, b)] == 0.0 && d[idx3(n, 1, a, b)] == 0.0);
            if all_zero {
                z.push(vec![0.0; ctx.mesh.num_nodes()]);
            } else {
                z.push(solve_flux((0..nq).map(|q| [coef.d[q][idx3(n, 0, a, b)], coef.d[q][idx3(n, 1, a, b)]]).collect())?);
            }
        }
    }
    let gw = [ctx.gradients(&w0), ctx.gradients(&w1)];
    let gz: Vec<Vec<[f64; 2]>> = z.iter().map(|f| ctx.gradients(f)).collect();
    let mut flux_w = Vec::with_capacity(nq);
    let mut flux_z = Vec::with_capacity(nq);
    for q in 0..nq {
        let e = q / 3;
        let em = &coef.e[q];
        let mut fw = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                fw[i * 2 + j] = em[i][j] + em[i][0] * gw[j][e][0] + em[i][1] * gw[j][e][1];
            }
        }
        flux_w.push(fw);
        let mut fz = vec![0.0; DIM * n * n];
        for i in 0..2 {
            for a in 0..n {
                for b in 0..n {
                    let g = gz[a * n + b][e];
                    fz[idx3(n, i, a, b)] = coef.d[q][idx3(n, i, a, b)] + em[i][0] * g[0] + em[i][1] * g[1];
                }
            }
        }
        flux_z.push(fz);
    }
    Ok(FirstOrderQp { cells: FirstOrderCells { w: [w0, w1], z }, flux_w, flux_z, max_multiplier: maxm })
}

/// Solves `W_j` and `Z_ab` for `E`, `D` frozen at `(t, x)`.
pub fn solve_first_order(ctx: &CellContext, c: &CoefficientSet, t: f64, x: [f64; 2]) -> Result<FirstOrderCells, CellError> {
    let coef = QpCoefficients::new(ctx, c, t, x);
    Ok(solve_first_order_qp(ctx, c.n, &coef)?.cells)
}

/// Solves all cell problems at `(t, x)`: first order, effective tensors and, when
/// `second_order` is set, the second-order functions. Derivatives in the slow variable
/// are taken by central differences of re-solved cell problems and are skipped when
/// `E` and `D` do not depend on `x`.
pub fn solve_cell_point(
    ctx: &CellContext,
    c: &CoefficientSet,
    t: f64,
    x: [f64; 2],
    second_order: bool,
) -> Result<CellPointData, CellError> {
    let n = c.n;
    let nq = ctx.num_qp();
    let coef = QpCoefficients::new(ctx, c, t, x);
    let base = solve_first_order_qp(ctx, n, &coef)?;
    let effective = EffectiveTensors::from_first_order(ctx, c, t, x, &coef, &base);
    let mut max_multiplier = base.max_multiplier;
    if !second_order {
        return Ok(CellPointData { t, x, first: base.cells, second: None, effective, max_multiplier });
    }

    let x_dependent = c.cell_coefficients().any(|e| e.depends_on_x());
    // Slow derivatives of the total fluxes and of W, Z at the quadrature points.
    let mut dflux_w = vec![[[0.0; 4]; 2]; nq];
    let mut dflux_z = vec![vec![vec![0.0; DIM * n * n]; 2]; nq];
    let mut dw = vec![[[0.0; 2]; 2]; nq]; // dw[q][l][j] = d_{x_l} W_j
    let mut dz = vec![vec![vec![0.0; n * n]; 2]; nq];
    if x_dependent {
        let h = ctx.opts.x_step;
        for l in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[l] += h;
            xm[l] -= h;
            let plus = solve_first_order_qp(ctx, n, &QpCoefficients::new(ctx, c, t, xp))?;
            let minus = solve_first_order_qp(ctx, n, &QpCoefficients::new(ctx, c, t, xm))?;
            max_multiplier = max_multiplier.max(plus.max_multiplier).max(minus.max_multiplier);
            for q in 0..nq {
                for k in 0..4 {
                    dflux_w[q][l][k] = (plus.flux_w[q][k] - minus.flux_w[q][k]) / (2.0 * h);
                }
                for k in 0..DIM * n * n {
                    dflux_z[q][l][k] = (plus.flux_z[q][k] - minus.flux_z[q][k]) / (2.0 * h);
                }
            }
            for j in 0..2 {
                let (a, b) = (ctx.nodal_to_qp(&plus.cells.w[j]), ctx.nodal_to_qp(&minus.cells.w[j]));
                for q in 0..nq {
                    dw[q][l][j] = (a[q] - b[q]) / (2.0 * h);
                }
            }
            for ab in 0..n * n {
                let (a, b) = (ctx.nodal_to_qp(&plus.cells.z[ab]), ctx.nodal_to_qp(&minus.cells.z[ab]));
                for q in 0..nq {
                    dz[q][l][ab] = (a[q] - b[q]) / (2.0 * h);
                }
            }
        }
    }

    let m_qp = ctx.sample_qp(|y| CoefficientSet::eval_vec(&c.m, &Point::new(t, x, y)));
    let h_qp = ctx.sample_qp(|y| CoefficientSet::eval_vec(&c.h, &Point::new(t, x, y)));
    let k_qp = ctx.sample_qp(|y| CoefficientSet::eval_vec(&c.k, &Point::new(t, x, y)));
    let w_qp = [ctx.nodal_to_qp(&base.cells.w[0]), ctx.nodal_to_qp(&base.cells.w[1])];
    let z_qp: Vec<Vec<f64>> = base.cells.z.iter().map(|f| ctx.nodal_to_qp(f)).collect();

    let op = ctx.operator(&coef.e)?;
    let zero_field = vec![0.0; ctx.mesh.num_nodes()];
    // Subtracts the Y*-mean; data constant up to roundoff becomes exactly zero.
    let centred = |v: Vec<f64>| -> Vec<f64> {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if hi - lo <= 1e-14 * hi.abs().max(lo.abs()) {
            return vec![0.0; v.len()];
        }
        let m = ctx.mean_qp(&v);
        v.into_iter().map(|a| a - m).collect()
    };
    let mut run = |volume: Vec<f64>, flux: Option<Vec<[f64; 2]>>| -> Result<Vec<f64>, CellError> {
        let trivial = volume.iter().all(|&v| v == 0.0)
            && flux.as_ref().is_none_or(|f| f.iter().all(|g| g[0] == 0.0 && g[1] == 0.0));
        if trivial {
            return Ok(zero_field.clone());
        }
        let s = op.solve(&CellLoad { volume: Some(volume), flux, boundary: None })?;
        max_multiplier = max_multiplier.max(s.multiplier.abs());
        Ok(s.values)
    };

    let mut p = Vec::with_capacity(n);
    for a in 0..n {
        p.push(run(centred(h_qp.iter().map(|h| h[a]).collect()), None)?);
    }
    let mut r0 = Vec::with_capacity(n * n);
    for ab in 0..n * n {
        r0.push(run(centred(k_qp.iter().map(|k| k[ab]).collect()), None)?);
    }
    let mut q0 = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let ab = a * n + b;
            let div_flux: Vec<f64> = (0..nq)
                .map(|q| dflux_z[q][0][idx3(n, 0, a, b)] + dflux_z[q][1][idx3(n, 1, a, b)])
                .collect();
            let volume: Vec<f64> =
                centred(div_flux).iter().zip(centred(m_qp.iter().map(|m| m[ab]).collect())).map(|(d, m)| d - m).collect();
            let flux = (0..nq)
                .map(|q| {
                    let em = &coef.e[q];
                    let mut g = [0.0; 2];
                    for i in 0..2 {
                        g[i] = em[i][0] * dz[q][0][ab] + em[i][1] * dz[q][1][ab];
                        for cc in 0..n {
                            g[i] += coef.d[q][idx3(n, i, a, cc)] * z_qp[cc * n + b][q];
                        }
                    }
                    g
                })
                .collect();
            q0.push(run(volume, Some(flux))?);
        }
    }
    let mut q1 = vec![Vec::new(); DIM * n * n];
    for j in 0..2 {
        let div_w: Vec<f64> = centred((0..nq).map(|q| dflux_w[q][0][j] + dflux_w[q][1][2 + j]).collect());
        for a in 0..n {
            for b in 0..n {
                let ab = a * n + b;
                let fz = centred((0..nq).map(|q| base.flux_z[q][idx3(n, j, a, b)]).collect());
                let volume: Vec<f64> =
                    (0..nq).map(|q| if a == b { div_w[q] } else { 0.0 } + fz[q]).collect();
                let flux = (0..nq)
                    .map(|q| {
                        let em = &coef.e[q];
                        let mut g = [0.0; 2];
                        for i in 0..2 {
                            if a == b {
                                g[i] += em[i][0] * dw[q][0][j] + em[i][1] * dw[q][1][j];
                            }
                            g[i] += em[i][j] * z_qp[ab][q] + coef.d[q][idx3(n, i, a, b)] * w_qp[j][q];
                        }
                        g
                    })
                    .collect();
                q1[idx3(n, j, a, b)] = run(volume, Some(flux))?;
            }
        }
    }
    let mut q2 = Vec::with_capacity(4);
    for j in 0..2 {
        for k in 0..2 {
            let volume = centred((0..nq).map(|q| base.flux_w[q][j * 2 + k]).collect());
            let flux = (0..nq).map(|q| [coef.e[q][0][j] * w_qp[k][q], coef.e[q][1][j] * w_qp[k][q]]).collect();
            q2.push(run(volume, Some(flux))?);
        }
    }
    let r1 = vec![zero_field.clone(); DIM * n * n];
    Ok(CellPointData {
        t,
        x,
        first: base.cells,
        second: Some(SecondOrderCells { p, q0, r0, q1, r1, q2 }),
        effective,
        max_multiplier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ctx(spec: CellSpec) -> CellContext {
        CellContext::new(&spec, CellOptions::default()).unwrap()
    }

    #[test]
    fn sine_load_recovers_sine() {
        let errs: Vec<f64> = [16, 32]
            .iter()
            .map(|&n| {
                let c = ctx(CellSpec::unperforated(n));
                let s = solve_generic(&c, |_| [[1.0, 0.0], [0.0, 1.0]], |y| 4.0 * PI * PI * (2.0 * PI * y[0]).sin(), |_, _| 0.0).unwrap();
                c.mesh.nodes.iter().zip(&s.values).map(|(p, v)| (v - (2.0 * PI * p[0]).sin()).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[1] < 0.01, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.0, "nodal error should fall at second order: {errs:?}");
    }

    #[test]
    fn compatibility_is_enforced() {
        let c = ctx(CellSpec::disk(0.25, 16));
        let id = |_| [[1.0, 0.0], [0.0, 1.0]];
        let err = solve_generic(&c, id, |_| 1.0, |_, _| 0.0).unwrap_err();
        assert!(matches!(err, CellError::Incompatible { .. }));
        let hole_len: f64 = c.mesh.hole_edges().map(|e| e.length).sum();
        let g = c.measure() / hole_len;
        let s = solve_generic(&c, id, |_| 1.0, move |_, _| g).unwrap();
        assert!(s.multiplier.abs() < 1e-12);
        let mean = c.mesh.integrate_nodal(&s.values);
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn constant_coefficients_give_vanishing_first_order_cells() {
        let c = ctx(CellSpec::unperforated(8));
        let coeffs = CoefficientSet::from_entries(
            1,
            [("M.11", "1"), ("E.11", "2"), ("E.12", "0.3"), ("E.21", "0.3"), ("E.22", "1"), ("D.111", "0.2"), ("D.211", "-0.1")],
        )
        .unwrap();
        let f = solve_first_order(&c, &coeffs, 0.0, [0.5, 0.5]).unwrap();
        for v in f.w.iter().chain(&f.z) {
            assert!(v.iter().all(|a| a.abs() < 1e-12));
        }
    }

    #[test]
    fn w_cells_are_swap_symmetric() {
        let c = ctx(CellSpec::disk(0.3, 24));
        let coeffs = CoefficientSet::identity(1);
        let f = solve_first_order(&c, &coeffs, 0.0, [0.0; 2]).unwrap();
        for (v, p) in c.mesh.nodes.iter().enumerate() {
            let q = [p[1], p[0]];
            let u = c.mesh.nodes.iter().position(|r| (r[0] - q[0]).abs() < 1e-13 && (r[1] - q[1]).abs() < 1e-13).unwrap();
            assert!((f.w[0][v] - f.w[1][u]).abs() < 1e-10);
        }
    }

    #[test]
    fn laminate_oracle() {
        // E = e(y1) I: W_1 solves (e (1 + W_1'))' = 0, so e (1 + W_1') is the harmonic mean.
        let c = ctx(CellSpec::unperforated(64));
        let coeffs = CoefficientSet::from_entries(
            1,
            [("M.11", "1"), ("E.11", "2 + sin(2*pi*y1)"), ("E.22", "2 + sin(2*pi*y1)")],
        )
        .unwrap();
        let d = solve_cell_point(&c, &coeffs, 0.0, [0.0; 2], false).unwrap();
        let harmonic = 3f64.sqrt();
        assert!((d.effective.estar[0][0] - harmonic).abs() < 2e-3, "{}", d.effective.estar[0][0]);
        assert!((d.effective.estar[1][1] - 2.0).abs() < 1e-3);
        assert!(d.effective.estar[0][1].abs() < 1e-10);
    }

    #[test]
    fn constant_source_gives_zero_p() {
        let c = ctx(CellSpec::disk(0.25, 16));
        let coeffs = CoefficientSet::from_entries(1, [("M.11", "1"), ("E.11", "1"), ("E.22", "1"), ("H.1", "3")]).unwrap();
        let d = solve_cell_point(&c, &coeffs, 0.0, [0.5, 0.5], true).unwrap();
        let s = d.second.unwrap();
        assert!(s.p[0].iter().all(|v| v.abs() < 1e-14));
        assert!(s.q0[0].iter().all(|v| v.abs() < 1e-14));
        // Q2 is driven by the W fluxes and does not vanish on a perforated cell.
        assert!(s.q2[0].iter().any(|v| v.abs() > 1e-4));
        assert!(d.max_multiplier < 1e-10);
    }

    #[test]
    fn slow_dependence_is_compatible() {
        let c = ctx(CellSpec::disk(0.25, 12));
        let coeffs = CoefficientSet::from_entries(
            1,
            [
                ("M.11", "1 + 0.5*x1"),
                ("E.11", "1 + 0.3*x1*cos(2*pi*y2)"),
                ("E.22", "1 + 0.2*x2"),
                ("D.111", "0.1*x2"),
                ("D.211", "0.1*sin(2*pi*y1)"),
                ("H.1", "x1 + cos(2*pi*y1)"),
                ("K.11", "0.5*x2"),
            ],
        )
        .unwrap();
        let d = solve_cell_point(&c, &coeffs, 0.0, [0.3, 0.6], true).unwrap();
        assert!(d.max_multiplier < 1e-7, "{}", d.max_multiplier);
        assert!(d.second.is_some());
    }
}
