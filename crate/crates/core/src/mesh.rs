//! Triangulations of the periodicity cell and of the perforated unit square.
//!
//! Cells start from an `n x n` grid of squares, each split along its
//! lower-left/upper-right diagonal. A disk hole is carved out by snapping, for every
//! grid edge that crosses the circle, the endpoint nearer to the circle radially onto
//! it, and then dropping triangles with no vertex strictly outside the disk. The
//! resulting mesh is symmetric under `(y1, y2) -> (y2, y1)` for holes centred on the
//! diagonal.
//!
//! All integrals use the three-point rule with barycentric points `(2/3, 1/6, 1/6)`
//! and permutations, exact for quadratics.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("hole does not fit strictly inside the cell (center {center:?}, radius {radius})")]
    HoleExceedsCell { center: [f64; 2], radius: f64 },
    #[error("resolution {resolution} too coarse: only {found} hole-boundary nodes (need 8)")]
    TooFewHoleNodes { resolution: usize, found: usize },
    #[error("a snapped hole node landed on the cell boundary at {0:?}")]
    SnapOnCellBoundary([f64; 2]),
    #[error("element {element} is inverted or degenerate (signed area {area:e})")]
    InvertedElement { element: usize, area: f64 },
    #[error("resolution must be at least 1")]
    ZeroResolution,
    #[error("1/epsilon = {inverse} is not an integer")]
    NonIntegerEpsilon { inverse: f64 },
    #[error("point {0:?} is not covered by the mesh")]
    PointNotCovered([f64; 2]),
}

/// Shape of the solid inclusion removed from the cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HoleShape {
    None,
    Disk { center: [f64; 2], radius: f64 },
}

/// Cell geometry and grid resolution (squares per side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub hole: HoleShape,
    pub resolution: usize,
}

impl CellSpec {
    pub fn disk(radius: f64, resolution: usize) -> Self {
        Self { hole: HoleShape::Disk { center: [0.5, 0.5], radius }, resolution }
    }

    pub fn unperforated(resolution: usize) -> Self {
        Self { hole: HoleShape::None, resolution }
    }
}

/// The unit square tiled by `cells_per_side^2` scaled cells, i.e. `epsilon = 1 / cells_per_side`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub cells_per_side: usize,
}

impl DomainSpec {
    pub fn from_epsilon(epsilon: f64) -> Result<Self, MeshError> {
        let inverse = 1.0 / epsilon;
        let rounded = inverse.round();
        if !(epsilon > 0.0) || rounded < 1.0 || (inverse - rounded).abs() > 1e-9 * inverse {
            return Err(MeshError::NonIntegerEpsilon { inverse });
        }
        Ok(Self { cells_per_side: rounded as usize })
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    /// Part of the outer boundary of the unit square.
    Exterior,
    /// Part of a hole boundary.
    Hole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
    pub element: usize,
    /// Unit normal pointing out of the meshed region.
    pub normal: [f64; 2],
    pub length: f64,
}

/// Barycentric coordinates of the quadrature points; weights are `area / 3`.
pub const QUAD_BARY: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

/// Two-point Gauss rule on an edge, as parameters in `[0, 1]`.
pub const EDGE_GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

#[derive(Debug, Clone)]
struct GridLocator {
    n: usize,
    origin: [f64; 2],
    scale: f64,
    buckets: Vec<Vec<usize>>,
}

/// P1 triangulation with boundary and periodicity metadata.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub areas: Vec<f64>,
    /// Gradients of the three barycentric basis functions per element.
    pub grads: Vec<[[f64; 2]; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Slave node to master node on the cell faces; empty for non-periodic meshes.
    pub periodic_pairs: BTreeMap<usize, usize>,
    /// Nodes lying on the outer boundary of the unit square (Dirichlet nodes).
    pub exterior_nodes: Vec<usize>,
    /// Grid index each node came from, before any snapping.
    grid_index: Vec<[usize; 2]>,
    snapped: Vec<bool>,
    locator: GridLocator,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn p1_gradients(a: [f64; 2], b: [f64; 2], c: [f64; 2], area: f64) -> [[f64; 2]; 3] {
    let inv = 0.5 / area;
    [
        [(b[1] - c[1]) * inv, (c[0] - b[0]) * inv],
        [(c[1] - a[1]) * inv, (a[0] - c[0]) * inv],
        [(a[1] - b[1]) * inv, (b[0] - a[0]) * inv],
    ]
}

impl Mesh {
    /// Builds the cell triangulation for `spec`.
    pub fn cell(spec: &CellSpec) -> Result<Self, MeshError> {
        let n = spec.resolution;
        if n == 0 {
            return Err(MeshError::ZeroResolution);
        }
        let h = 1.0 / n as f64;
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
        let mut grid_index = Vec::with_capacity(nodes.capacity());
        for j in 0..=n {
            for i in 0..=n {
                nodes.push([i as f64 * h, j as f64 * h]);
                grid_index.push([i, j]);
            }
        }
        let mut tris = Vec::with_capacity(2 * n * n);
        let mut origin = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                origin.push([i, j]);
                origin.push([i, j]);
            }
        }
        let mut snapped = vec![false; nodes.len()];

        if let HoleShape::Disk { center, radius } = spec.hole {
            let clearance = center[0].min(1.0 - center[0]).min(center[1]).min(1.0 - center[1]);
            if !(radius > 0.0) || radius >= clearance {
                return Err(MeshError::HoleExceedsCell { center, radius });
            }
            let dist = |p: [f64; 2]| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
            let d: Vec<f64> = nodes.iter().map(|&p| dist(p)).collect();
            let mut to_snap = vec![false; nodes.len()];
            for t in &tris {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    let (ina, inb) = (d[a] < radius, d[b] < radius);
                    if ina != inb {
                        let (inner, outer) = if ina { (a, b) } else { (b, a) };
                        // Ties go to the outer node, which also keeps the centre from being picked.
                        let near = if radius - d[inner] < d[outer] - radius { inner } else { outer };
                        to_snap[near] = true;
                    }
                }
            }
            let found = to_snap.iter().filter(|&&s| s).count();
            if found < 8 {
                return Err(MeshError::TooFewHoleNodes { resolution: n, found });
            }
            for (v, p) in nodes.iter_mut().enumerate() {
                if to_snap[v] {
                    let r = d[v];
                    *p = [
                        center[0] + radius * (p[0] - center[0]) / r,
                        center[1] + radius * (p[1] - center[1]) / r,
                    ];
                    snapped[v] = true;
                    let [i, j] = grid_index[v];
                    if i == 0 || j == 0 || i == n || j == n {
                        return Err(MeshError::SnapOnCellBoundary(*p));
                    }
                }
            }
            // Two snapped neighbours on nearly the same ray would leave a sliver; collapse
            // such edges onto a single boundary node.
            let mut rep: Vec<usize> = (0..nodes.len()).collect();
            fn find(rep: &mut [usize], v: usize) -> usize {
                let mut r = v;
                while rep[r] != r {
                    r = rep[r];
                }
                rep[v] = r;
                r
            }
            for t in &tris {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    if snapped[a] && snapped[b] {
                        let (pa, pb) = (nodes[a], nodes[b]);
                        if ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt() < 0.25 * h {
                            let (ra, rb) = (find(&mut rep, a), find(&mut rep, b));
                            if ra != rb {
                                rep[ra.max(rb)] = ra.min(rb);
                            }
                        }
                    }
                }
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for v in 0..nodes.len() {
                if snapped[v] {
                    let r = find(&mut rep, v);
                    groups.entry(r).or_default().push(v);
                }
            }
            for (root, members) in &groups {
                if members.len() > 1 {
                    let m = members.len() as f64;
                    let sx = members.iter().map(|&v| nodes[v][0] - center[0]).sum::<f64>() / m;
                    let sy = members.iter().map(|&v| nodes[v][1] - center[1]).sum::<f64>() / m;
                    let len = (sx * sx + sy * sy).sqrt();
                    nodes[*root] = [center[0] + radius * sx / len, center[1] + radius * sy / len];
                }
            }
            for t in &mut tris {
                for v in t.iter_mut() {
                    *v = find(&mut rep, *v);
                }
            }
            let collapsed: Vec<bool> = tris.iter().map(|t| t[0] == t[1] || t[1] == t[2] || t[0] == t[2]).collect();
            let outside: Vec<bool> = (0..nodes.len()).map(|v| !snapped[v] && d[v] > radius).collect();
            let keep: Vec<bool> =
                tris.iter().zip(&collapsed).map(|(t, &c)| !c && t.iter().any(|&v| outside[v])).collect();
            let mut k = 0;
            tris.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            let mut k = 0;
            origin.retain(|_| {
                k += 1;
                keep[k - 1]
            });
        }

        // Drop nodes no longer referenced and renumber.
        let mut used = vec![false; nodes.len()];
        for t in &tris {
            for &v in t {
                used[v] = true;
            }
        }
        let mut new_id = vec![usize::MAX; nodes.len()];
        let mut kept_nodes = Vec::new();
        let mut kept_grid = Vec::new();
        let mut kept_snapped = Vec::new();
        for v in 0..nodes.len() {
            if used[v] {
                new_id[v] = kept_nodes.len();
                kept_nodes.push(nodes[v]);
                kept_grid.push(grid_index[v]);
                kept_snapped.push(snapped[v]);
            }
        }
        for t in &mut tris {
            for v in t.iter_mut() {
                *v = new_id[*v];
            }
        }

        let mut periodic_pairs = BTreeMap::new();
        let mut by_grid: HashMap<[usize; 2], usize> = HashMap::new();
        for (v, g) in kept_grid.iter().enumerate() {
            if !kept_snapped[v] {
                by_grid.insert(*g, v);
            }
        }
        for (v, &[i, j]) in kept_grid.iter().enumerate() {
            if kept_snapped[v] || (i < n && j < n) {
                continue;
            }
            // Wrapping both indices sends every corner to the origin.
            let master = [if i == n { 0 } else { i }, if j == n { 0 } else { j }];
            periodic_pairs.insert(v, by_grid[&master]);
        }

        let mut mesh = Self::assemble(kept_nodes, tris, kept_grid, kept_snapped, periodic_pairs, n, [0.0, 0.0], 1.0)?;
        let locator_buckets = bucket_by_origin(&origin, n);
        mesh.locator.buckets = locator_buckets;
        Ok(mesh)
    }

    /// Unperforated structured mesh of the unit square with `n` squares per side.
    pub fn unit_square(n: usize) -> Result<Self, MeshError> {
        let mut m = Self::cell(&CellSpec::unperforated(n))?;
        m.periodic_pairs.clear();
        Ok(m)
    }

    /// Tiles `domain.cells_per_side^2` scaled copies of `cell` over the unit square.
    pub fn perforated_domain(cell: &Mesh, domain: &DomainSpec) -> Result<Self, MeshError> {
        let nc = cell.locator.n;
        let ncell = domain.cells_per_side;
        if ncell == 0 {
            return Err(MeshError::ZeroResolution);
        }
        let eps = 1.0 / ncell as f64;
        let global_n = nc * ncell;
        let mut nodes = Vec::new();
        let mut grid_index = Vec::new();
        let mut snapped = Vec::new();
        let mut tris = Vec::with_capacity(cell.triangles.len() * ncell * ncell);
        let mut origin = Vec::with_capacity(tris.capacity());
        let mut face_nodes: HashMap<[usize; 2], usize> = HashMap::new();
        let cell_origin = cell_triangle_origins(cell);
        let mut local = vec![0usize; cell.nodes.len()];
        for cj in 0..ncell {
            for ci in 0..ncell {
                for (v, p) in cell.nodes.iter().enumerate() {
                    let [i, j] = cell.grid_index[v];
                    let g = [ci * nc + i, cj * nc + j];
                    let on_face = !cell.snapped[v] && (i == 0 || j == 0 || i == nc || j == nc);
                    let x = [(ci as f64 + p[0]) * eps, (cj as f64 + p[1]) * eps];
                    let idx = if on_face {
                        *face_nodes.entry(g).or_insert_with(|| {
                            nodes.push(x);
                            grid_index.push(g);
                            snapped.push(false);
                            nodes.len() - 1
                        })
                    } else {
                        nodes.push(x);
                        grid_index.push(g);
                        snapped.push(cell.snapped[v]);
                        nodes.len() - 1
                    };
                    local[v] = idx;
                }
                for (t, o) in cell.triangles.iter().zip(&cell_origin) {
                    tris.push([local[t[0]], local[t[1]], local[t[2]]]);
                    origin.push([ci * nc + o[0], cj * nc + o[1]]);
                }
            }
        }
        let mut mesh = Self::assemble(nodes, tris, grid_index, snapped, BTreeMap::new(), global_n, [0.0, 0.0], 1.0)?;
        mesh.locator.buckets = bucket_by_origin(&origin, global_n);
        Ok(mesh)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        grid_index: Vec<[usize; 2]>,
        snapped: Vec<bool>,
        periodic_pairs: BTreeMap<usize, usize>,
        n: usize,
        origin: [f64; 2],
        size: f64,
    ) -> Result<Self, MeshError> {
        let mut areas = Vec::with_capacity(triangles.len());
        let mut grads = Vec::with_capacity(triangles.len());
        let tiny = 1e-14 * (size / n as f64).powi(2);
        for (e, t) in triangles.iter().enumerate() {
            let (a, b, c) = (nodes[t[0]], nodes[t[1]], nodes[t[2]]);
            let area = signed_area(a, b, c);
            if area <= tiny {
                return Err(MeshError::InvertedElement { element: e, area });
            }
            areas.push(area);
            grads.push(p1_gradients(a, b, c, area));
        }

        // Edges used by a single triangle are boundary edges.
        let mut edge_count: HashMap<(usize, usize), (usize, usize, usize)> = HashMap::new();
        for (e, t) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edge_count.entry(key).and_modify(|c| c.0 += 1).or_insert((1, e, t[(k + 2) % 3]));
            }
        }
        let lo = origin;
        let hi = [origin[0] + size, origin[1] + size];
        let on_outer = |p: [f64; 2]| {
            let tol = 1e-12 * size;
            (p[0] - lo[0]).abs() < tol || (p[0] - hi[0]).abs() < tol || (p[1] - lo[1]).abs() < tol || (p[1] - hi[1]).abs() < tol
        };
        let same_side = |p: [f64; 2], q: [f64; 2]| {
            let tol = 1e-12 * size;
            ((p[0] - lo[0]).abs() < tol && (q[0] - lo[0]).abs() < tol)
                || ((p[0] - hi[0]).abs() < tol && (q[0] - hi[0]).abs() < tol)
                || ((p[1] - lo[1]).abs() < tol && (q[1] - lo[1]).abs() < tol)
                || ((p[1] - hi[1]).abs() < tol && (q[1] - hi[1]).abs() < tol)
        };
        let mut boundary_edges = Vec::new();
        let mut keys: Vec<_> = edge_count.into_iter().filter(|(_, c)| c.0 == 1).collect();
        keys.sort_by_key(|(k, _)| *k);
        for ((a, b), (_, element, opposite)) in keys {
            let (pa, pb) = (nodes[a], nodes[b]);
            let tag = if same_side(pa, pb) { BoundaryTag::Exterior } else { BoundaryTag::Hole };
            let tangent = [pb[0] - pa[0], pb[1] - pa[1]];
            let length = (tangent[0].powi(2) + tangent[1].powi(2)).sqrt();
            let mut normal = [tangent[1] / length, -tangent[0] / length];
            let po = nodes[opposite];
            if normal[0] * (po[0] - pa[0]) + normal[1] * (po[1] - pa[1]) > 0.0 {
                normal = [-normal[0], -normal[1]];
            }
            boundary_edges.push(BoundaryEdge { nodes: [a, b], tag, element, normal, length });
        }
        let exterior_nodes: Vec<usize> = (0..nodes.len()).filter(|&v| on_outer(nodes[v])).collect();
        Ok(Self {
            nodes,
            triangles,
            areas,
            grads,
            boundary_edges,
            periodic_pairs,
            exterior_nodes,
            grid_index,
            snapped,
            locator: GridLocator { n, origin, scale: n as f64 / size, buckets: Vec::new() },
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    /// Number of grid squares per side of the underlying structured grid.
    pub fn grid_resolution(&self) -> usize {
        self.locator.n
    }

    /// Mesh width of the underlying grid.
    pub fn grid_spacing(&self) -> f64 {
        1.0 / self.locator.scale
    }

    pub fn area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Nodes placed on a hole boundary.
    pub fn hole_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&v| self.snapped[v]).collect()
    }

    pub fn hole_edges(&self) -> impl Iterator<Item = &BoundaryEdge> {
        self.boundary_edges.iter().filter(|e| e.tag == BoundaryTag::Hole)
    }

    /// Quadrature points of element `e` as `(position, barycentric, weight)`.
    pub fn quadrature(&self, e: usize) -> [([f64; 2], [f64; 3], f64); 3] {
        let t = self.triangles[e];
        let (a, b, c) = (self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]);
        let w = self.areas[e] / 3.0;
        QUAD_BARY.map(|l| {
            let p = [l[0] * a[0] + l[1] * b[0] + l[2] * c[0], l[0] * a[1] + l[1] * b[1] + l[2] * c[1]];
            (p, l, w)
        })
    }

    /// Integral of a function over the mesh with the element rule.
    pub fn integrate_fn(&self, f: impl Fn([f64; 2]) -> f64) -> f64 {
        (0..self.triangles.len())
            .map(|e| self.quadrature(e).iter().map(|(p, _, w)| w * f(*p)).sum::<f64>())
            .sum()
    }

    /// Exact integral of a P1 nodal field.
    pub fn integrate_nodal(&self, field: &[f64]) -> f64 {
        self.triangles
            .iter()
            .zip(&self.areas)
            .map(|(t, a)| a / 3.0 * (field[t[0]] + field[t[1]] + field[t[2]]))
            .sum()
    }

    /// `int phi_i` for every node, the weights of the mean-value functional.
    pub fn lumped_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.nodes.len()];
        for (t, a) in self.triangles.iter().zip(&self.areas) {
            for &v in t {
                w[v] += a / 3.0;
            }
        }
        w
    }

    /// Squared L2 norm of a P1 field (exact).
    pub fn l2_norm_sq(&self, field: &[f64]) -> f64 {
        let mut s = 0.0;
        for (e, t) in self.triangles.iter().enumerate() {
            let (a, b, c) = (field[t[0]], field[t[1]], field[t[2]]);
            s += self.areas[e] / 6.0 * (a * a + b * b + c * c + a * b + b * c + c * a);
        }
        s
    }

    /// Squared H1 seminorm of a P1 field.
    pub fn h1_seminorm_sq(&self, field: &[f64]) -> f64 {
        let mut s = 0.0;
        for (e, t) in self.triangles.iter().enumerate() {
            let g = self.element_gradient(e, field, t);
            s += self.areas[e] * (g[0] * g[0] + g[1] * g[1]);
        }
        s
    }

    /// Constant gradient of a P1 field on element `e`.
    pub fn gradient(&self, e: usize, field: &[f64]) -> [f64; 2] {
        self.element_gradient(e, field, &self.triangles[e])
    }

    fn element_gradient(&self, e: usize, field: &[f64], t: &[usize; 3]) -> [f64; 2] {
        let g = &self.grads[e];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += g[k][0] * field[t[k]];
            out[1] += g[k][1] * field[t[k]];
        }
        out
    }

    /// Finds the element containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3]), MeshError> {
        let loc = &self.locator;
        let n = loc.n as isize;
        let gi = (((p[0] - loc.origin[0]) * loc.scale).floor() as isize).clamp(0, n - 1);
        let gj = (((p[1] - loc.origin[1]) * loc.scale).floor() as isize).clamp(0, n - 1);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for dj in -1..=1 {
            for di in -1..=1 {
                let (i, j) = (gi + di, gj + dj);
                if i < 0 || j < 0 || i >= n || j >= n {
                    continue;
                }
                for &e in &loc.buckets[(j * n + i) as usize] {
                    let l = self.barycentric(e, p);
                    let m = l[0].min(l[1]).min(l[2]);
                    if best.as_ref().is_none_or(|b| m > b.2) {
                        best = Some((e, l, m));
                    }
                }
            }
        }
        match best {
            Some((e, l, m)) if m >= -1e-9 => Ok((e, l)),
            _ => Err(MeshError::PointNotCovered(p)),
        }
    }

    pub fn barycentric(&self, e: usize, p: [f64; 2]) -> [f64; 3] {
        let t = self.triangles[e];
        let (a, b, c) = (self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]);
        let area = self.areas[e];
        let l1 = signed_area(p, b, c) / area;
        let l2 = signed_area(a, p, c) / area;
        [l1, l2, 1.0 - l1 - l2]
    }

    /// Writes the mesh in a plain text format: node, triangle, boundary-edge and
    /// periodic-pair sections, one record per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "nodes {}", self.nodes.len())?;
        for p in &self.nodes {
            writeln!(w, "{:.17e} {:.17e}", p[0], p[1])?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "boundary_edges {}", self.boundary_edges.len())?;
        for e in &self.boundary_edges {
            let tag = match e.tag {
                BoundaryTag::Exterior => "exterior",
                BoundaryTag::Hole => "hole",
            };
            writeln!(w, "{} {} {}", e.nodes[0], e.nodes[1], tag)?;
        }
        writeln!(w, "periodic_pairs {}", self.periodic_pairs.len())?;
        for (s, m) in &self.periodic_pairs {
            writeln!(w, "{s} {m}")?;
        }
        Ok(())
    }
}

fn bucket_by_origin(origin: &[[usize; 2]], n: usize) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); n * n];
    for (e, o) in origin.iter().enumerate() {
        buckets[o[1] * n + o[0]].push(e);
    }
    buckets
}

fn cell_triangle_origins(cell: &Mesh) -> Vec<[usize; 2]> {
    let n = cell.locator.n;
    let mut origin = vec![[0, 0]; cell.triangles.len()];
    for (j, i, bucket) in cell.locator.buckets.iter().enumerate().map(|(k, b)| (k / n, k % n, b)) {
        for &e in bucket {
            origin[e] = [i, j];
        }
    }
    origin
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn plain_cell_counts() {
        let m = Mesh::cell(&CellSpec::unperforated(2)).unwrap();
        assert_eq!(m.num_elements(), 8);
        assert_eq!(m.num_nodes(), 9);
        assert!((m.area() - 1.0).abs() < 1e-15);
        assert!(m.hole_edges().next().is_none());
        // Five slaves on the right and top faces.
        assert_eq!(m.periodic_pairs.len(), 5);
    }

    #[test]
    fn periodic_pairs_are_consistent() {
        for spec in [CellSpec::unperforated(8), CellSpec::disk(0.25, 16), CellSpec::disk(0.4, 32)] {
            let m = Mesh::cell(&spec).unwrap();
            for (&s, &mst) in &m.periodic_pairs {
                assert!(!m.periodic_pairs.contains_key(&mst), "master {mst} is also a slave");
                let (ps, pm) = (m.nodes[s], m.nodes[mst]);
                let dx = (ps[0] - pm[0]).rem_euclid(1.0);
                let dy = (ps[1] - pm[1]).rem_euclid(1.0);
                assert!(dx.min(1.0 - dx) < 1e-14 && dy.min(1.0 - dy) < 1e-14);
                assert!(pm[0] < 1.0 && pm[1] < 1.0);
            }
            let n = spec.resolution;
            let faces = m.nodes.iter().filter(|p| p[0] == 1.0 || p[1] == 1.0).count();
            assert_eq!(faces, 2 * n + 1);
            assert_eq!(m.periodic_pairs.len(), 2 * n + 1);
        }
    }

    #[test]
    fn disk_area_and_boundary() {
        let m = Mesh::cell(&CellSpec::disk(0.25, 32)).unwrap();
        let exact = 1.0 - PI / 16.0;
        assert!((m.area() - exact).abs() / exact < 0.02);
        let hole_len: f64 = m.hole_edges().map(|e| e.length).sum();
        assert!((hole_len - 2.0 * PI * 0.25).abs() < 0.02 * 2.0 * PI * 0.25);
        for e in m.hole_edges() {
            for &v in &e.nodes {
                let p = m.nodes[v];
                let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
                assert!((r - 0.25).abs() < 1e-14);
            }
            // Normals point into the hole.
            let mid = [(m.nodes[e.nodes[0]][0] + m.nodes[e.nodes[1]][0]) / 2.0, (m.nodes[e.nodes[0]][1] + m.nodes[e.nodes[1]][1]) / 2.0];
            assert!(e.normal[0] * (0.5 - mid[0]) + e.normal[1] * (0.5 - mid[1]) > 0.0);
        }
    }

    #[test]
    fn oversized_and_coarse_holes_rejected() {
        assert!(matches!(Mesh::cell(&CellSpec::disk(0.6, 32)), Err(MeshError::HoleExceedsCell { .. })));
        assert!(matches!(Mesh::cell(&CellSpec::disk(0.25, 2)), Err(MeshError::TooFewHoleNodes { .. })));
    }

    #[test]
    fn snapping_never_inverts_elements() {
        for n in [4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128] {
            for k in 1..40 {
                let r = 0.05 + 0.44 * k as f64 / 40.0;
                match Mesh::cell(&CellSpec::disk(r, n)) {
                    Ok(m) => assert!(m.areas.iter().all(|&a| a > 0.0)),
                    Err(MeshError::TooFewHoleNodes { .. }) | Err(MeshError::SnapOnCellBoundary(_)) => {}
                    Err(e) => panic!("n={n} r={r}: {e}"),
                }
            }
        }
    }

    #[test]
    fn swap_symmetry_of_cell_mesh() {
        let m = Mesh::cell(&CellSpec::disk(0.3, 20)).unwrap();
        for p in &m.nodes {
            let q = [p[1], p[0]];
            assert!(m.nodes.iter().any(|r| (r[0] - q[0]).abs() < 1e-14 && (r[1] - q[1]).abs() < 1e-14));
        }
    }

    #[test]
    fn perforated_domain_tiles_and_tags() {
        let cell = Mesh::cell(&CellSpec::disk(0.25, 8)).unwrap();
        let dom = DomainSpec::from_epsilon(0.25).unwrap();
        let m = Mesh::perforated_domain(&cell, &dom).unwrap();
        assert!((m.area() - cell.area()).abs() < 1e-12);
        assert_eq!(m.num_elements(), 16 * cell.num_elements());
        let ext_len: f64 = m.boundary_edges.iter().filter(|e| e.tag == BoundaryTag::Exterior).map(|e| e.length).sum();
        assert!((ext_len - 4.0).abs() < 1e-12);
        let hole_len: f64 = m.hole_edges().map(|e| e.length).sum();
        let cell_hole: f64 = cell.hole_edges().map(|e| e.length).sum();
        assert!((hole_len - 16.0 * cell_hole / 4.0).abs() < 1e-12);
        // No duplicate nodes after merging.
        let mut pts: Vec<_> = m.nodes.iter().map(|p| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64)).collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), m.num_nodes());
        assert_eq!(m.exterior_nodes.len(), 4 * 32);
    }

    #[test]
    fn epsilon_must_divide_unit() {
        assert!(matches!(DomainSpec::from_epsilon(0.3), Err(MeshError::NonIntegerEpsilon { .. })));
        assert_eq!(DomainSpec::from_epsilon(1.0 / 16.0).unwrap().cells_per_side, 16);
    }

    #[test]
    fn quadrature_is_exact_for_quadratics() {
        let m = Mesh::cell(&CellSpec::unperforated(3)).unwrap();
        let v = m.integrate_fn(|p| p[0] * p[0] + 3.0 * p[0] * p[1] - p[1]);
        assert!((v - (1.0 / 3.0 + 0.75 - 0.5)).abs() < 1e-14);
        let field: Vec<f64> = m.nodes.iter().map(|p| 2.0 * p[0] - p[1] + 1.0).collect();
        assert!((m.integrate_nodal(&field) - 1.5).abs() < 1e-14);
        assert!((m.h1_seminorm_sq(&field) - 5.0).abs() < 1e-12);
        let l2 = m.integrate_fn(|p| (2.0 * p[0] - p[1] + 1.0).powi(2));
        assert!((m.l2_norm_sq(&field) - l2).abs() < 1e-13);
    }

    #[test]
    fn locate_finds_nodes_and_interior_points() {
        let cell = Mesh::cell(&CellSpec::disk(0.25, 16)).unwrap();
        for (v, p) in cell.nodes.iter().enumerate() {
            let (e, l) = cell.locate(*p).unwrap();
            let t = cell.triangles[e];
            let k = t.iter().position(|&u| u == v);
            // Either the node itself or a coincident periodic image / neighbouring element vertex.
            if let Some(k) = k {
                assert!((l[k] - 1.0).abs() < 1e-9);
            } else {
                assert!(l.iter().all(|&x| x > -1e-9));
            }
        }
        assert!(cell.locate([0.5, 0.5]).is_err());
        let (e, l) = cell.locate([0.05, 0.9]).unwrap();
        assert!(l.iter().all(|&x| x >= 0.0));
        assert!(e < cell.num_elements());
    }
}
