//! Cell averages and effective tensors.
//!
//! Averages are `(1/|Y|) int_{Y*}` with `|Y| = 1`, evaluated with the assembly
//! quadrature so that the alternative forms agree with the primary ones up to solver
//! tolerance:
//!
//! * `E*_ij = avg E_ik (d_kj + d_k W_j)` against the Gram form
//!   `avg (e_i + grad W_i) . E (e_j + grad W_j)`;
//! * `D*_iab = avg (D_iab + E_ik d_k Z_ab)` against `avg (d_il + d_l W_i) D_lab`.
//!
//! The second pair coincides only for symmetric `E`.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::cell::{solve_cell_point, solve_first_order_qp, CellContext, CellError, FirstOrderQp, QpCoefficients};
use crate::coefficients::{idx3, CoefficientSet, DIM};
use crate::expr::Point;

/// Effective coefficients at one slow point.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTensors {
    pub n: usize,
    pub t: f64,
    pub x: [f64; 2],
    /// `|Y*| / |Y|`.
    pub porosity: f64,
    pub estar: [[f64; 2]; 2],
    pub estar_gram: [[f64; 2]; 2],
    /// `D*` at [`idx3`]`(n, i, a, b)`.
    pub dstar: Vec<f64>,
    pub dstar_alt: Vec<f64>,
    /// `M-bar` at `a * n + b`.
    pub mbar: Vec<f64>,
    pub hbar: Vec<f64>,
    pub kbar: Vec<f64>,
}

/// `(1/|Y|) int_{Y*} f` with the assembly quadrature.
pub fn average(ctx: &CellContext, f: impl Fn([f64; 2]) -> f64) -> f64 {
    ctx.integrate_qp(&ctx.sample_qp(f))
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, a| m.max(a.abs()))
}

impl EffectiveTensors {
    /// Unperforated cell with coefficients constant in `y`: the effective tensors are
    /// the coefficients themselves.
    pub(crate) fn from_first_order(
        ctx: &CellContext,
        c: &CoefficientSet,
        t: f64,
        x: [f64; 2],
        coef: &QpCoefficients,
        base: &FirstOrderQp,
    ) -> Self {
        let n = c.n;
        let nq = ctx.num_qp();
        let gw = [ctx.gradients(&base.cells.w[0]), ctx.gradients(&base.cells.w[1])];
        let mut estar = [[0.0; 2]; 2];
        let mut estar_gram = [[0.0; 2]; 2];
        let mut dstar = vec![0.0; DIM * n * n];
        let mut dstar_alt = vec![0.0; DIM * n * n];
        for q in 0..nq {
            let w = ctx.qp_weight(q);
            let e = q / 3;
            let em = &coef.e[q];
            // Columns of (I + grad W): c_j = e_j + grad W_j.
            let cols = [[1.0 + gw[0][e][0], gw[0][e][1]], [gw[1][e][0], 1.0 + gw[1][e][1]]];
            for i in 0..2 {
                for j in 0..2 {
                    estar[i][j] += w * base.flux_w[q][i * 2 + j];
                    let ec = [em[0][0] * cols[j][0] + em[0][1] * cols[j][1], em[1][0] * cols[j][0] + em[1][1] * cols[j][1]];
                    estar_gram[i][j] += w * (cols[i][0] * ec[0] + cols[i][1] * ec[1]);
                }
            }
            for i in 0..2 {
                for a in 0..n {
                    for b in 0..n {
                        let k = idx3(n, i, a, b);
                        dstar[k] += w * base.flux_z[q][k];
                        dstar_alt[k] +=
                            w * (cols[i][0] * coef.d[q][idx3(n, 0, a, b)] + cols[i][1] * coef.d[q][idx3(n, 1, a, b)]);
                    }
                }
            }
        }
        let avg_vec = |exprs: &[crate::expr::Expr]| -> Vec<f64> {
            let samples = ctx.sample_qp(|y| CoefficientSet::eval_vec(exprs, &Point::new(t, x, y)));
            (0..exprs.len()).map(|k| samples.iter().enumerate().map(|(q, s)| ctx.qp_weight(q) * s[k]).sum()).collect()
        };
        Self {
            n,
            t,
            x,
            porosity: ctx.porosity(),
            estar,
            estar_gram,
            dstar,
            dstar_alt,
            mbar: avg_vec(&c.m),
            hbar: avg_vec(&c.h),
            kbar: avg_vec(&c.k),
        }
    }

    /// Computes first-order cells and the effective tensors at `(t, x)`.
    pub fn compute(ctx: &CellContext, c: &CoefficientSet, t: f64, x: [f64; 2]) -> Result<Self, CellError> {
        let coef = QpCoefficients::new(ctx, c, t, x);
        let base = solve_first_order_qp(ctx, c.n, &coef)?;
        Ok(Self::from_first_order(ctx, c, t, x, &coef, &base))
    }

    /// Largest entry of `|E* - E*_gram|`.
    pub fn estar_discrepancy(&self) -> f64 {
        max_abs((0..4).map(|k| self.estar[k / 2][k % 2] - self.estar_gram[k / 2][k % 2]))
    }

    /// Largest entry of `|D* - D*_alt|`.
    pub fn dstar_discrepancy(&self) -> f64 {
        max_abs(self.dstar.iter().zip(&self.dstar_alt).map(|(a, b)| a - b))
    }

    /// True when both discrepancies stay within `tol` relative to the tensor size.
    pub fn consistent(&self, tol: f64) -> bool {
        let es = max_abs(self.estar.iter().flatten().copied()).max(1.0);
        let ds = max_abs(self.dstar.iter().copied()).max(f64::MIN_POSITIVE);
        self.estar_discrepancy() <= tol * es && (self.dstar_discrepancy() <= tol * ds || self.dstar_discrepancy() <= 1e-12)
    }

    /// Eigenvalues of the symmetric part of `E*`, ascending.
    pub fn estar_eigenvalues(&self) -> [f64; 2] {
        let a = self.estar[0][0];
        let d = self.estar[1][1];
        let b = 0.5 * (self.estar[0][1] + self.estar[1][0]);
        let m = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        [m - r, m + r]
    }

    pub fn csv_header(n: usize) -> String {
        let mut cols = vec!["t".to_string(), "x1".into(), "x2".into()];
        for i in 1..=2 {
            for j in 1..=2 {
                cols.push(format!("Estar{i}{j}"));
            }
        }
        for i in 1..=2 {
            for a in 1..=n {
                for b in 1..=n {
                    cols.push(format!("Dstar{i}{a}{b}"));
                }
            }
        }
        for a in 1..=n {
            for b in 1..=n {
                cols.push(format!("Mbar{a}{b}"));
            }
        }
        for a in 1..=n {
            cols.push(format!("Hbar{a}"));
        }
        for a in 1..=n {
            for b in 1..=n {
                cols.push(format!("Kbar{a}{b}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.t, self.x[0], self.x[1]];
        vals.extend(self.estar.iter().flatten());
        vals.extend(&self.dstar);
        vals.extend(&self.mbar);
        vals.extend(&self.hbar);
        vals.extend(&self.kbar);
        vals.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(",")
    }
}

/// Writes a table of effective tensors as CSV.
pub fn write_csv<W: Write>(mut w: W, rows: &[EffectiveTensors]) -> io::Result<()> {
    let Some(first) = rows.first() else { return Ok(()) };
    writeln!(w, "{}", EffectiveTensors::csv_header(first.n))?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Effective tensors at the given slow points. When no coefficient depends on `x`
/// a single cell solve is shared by all points.
pub fn tabulate(
    ctx: &CellContext,
    c: &CoefficientSet,
    t: f64,
    points: &[[f64; 2]],
) -> Result<Vec<EffectiveTensors>, CellError> {
    if c.elliptic_constant_in_x() {
        let base = EffectiveTensors::compute(ctx, c, t, [0.0, 0.0])?;
        return Ok(points.iter().map(|&x| EffectiveTensors { x, ..base.clone() }).collect());
    }
    points.par_iter().map(|&x| EffectiveTensors::compute(ctx, c, t, x)).collect()
}

/// Full cell data (first and second order) at the given slow points, shared when the
/// coefficients do not depend on `x`.
pub fn tabulate_cells(
    ctx: &CellContext,
    c: &CoefficientSet,
    t: f64,
    points: &[[f64; 2]],
) -> Result<Vec<std::sync::Arc<crate::cell::CellPointData>>, CellError> {
    if c.elliptic_constant_in_x() {
        let base = std::sync::Arc::new(solve_cell_point(ctx, c, t, [0.0, 0.0], true)?);
        return Ok(vec![base; points.len()]);
    }
    points.par_iter().map(|&x| solve_cell_point(ctx, c, t, x, true).map(std::sync::Arc::new)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellOptions;
    use crate::mesh::CellSpec;

    fn ctx(spec: CellSpec) -> CellContext {
        CellContext::new(&spec, CellOptions::default()).unwrap()
    }

    #[test]
    fn averages() {
        let full = ctx(CellSpec::unperforated(8));
        assert!((average(&full, |_| 1.0) - 1.0).abs() < 1e-14);
        assert!(average(&full, |y| (2.0 * std::f64::consts::PI * y[0]).sin()).abs() < 1e-10);
        let holed = ctx(CellSpec::disk(0.25, 32));
        let exact = 1.0 - std::f64::consts::PI / 16.0;
        assert!((average(&holed, |_| 1.0) - exact).abs() < 0.02 * exact);
    }

    #[test]
    fn constant_coefficients_unperforated() {
        let c = ctx(CellSpec::unperforated(6));
        let coeffs = CoefficientSet::from_entries(
            2,
            [("M.11", "2"), ("M.22", "3"), ("M.12", "0.5"), ("E.11", "2"), ("E.22", "1"), ("D.112", "0.4"), ("H.1", "1")],
        )
        .unwrap();
        let t = EffectiveTensors::compute(&c, &coeffs, 0.0, [0.0; 2]).unwrap();
        assert!((t.estar[0][0] - 2.0).abs() < 1e-9 && (t.estar[1][1] - 1.0).abs() < 1e-9);
        assert!((t.dstar[idx3(2, 0, 0, 1)] - 0.4).abs() < 1e-9);
        assert_eq!(t.mbar.len(), 4);
        assert!((t.mbar[1] - 0.5).abs() < 1e-12 && (t.hbar[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disk_cell_forms_agree() {
        let c = ctx(CellSpec::disk(0.25, 32));
        let coeffs =
            CoefficientSet::from_entries(1, [("M.11", "1"), ("E.11", "1"), ("E.22", "1"), ("D.111", "0.5"), ("D.211", "-0.3")])
                .unwrap();
        let t = EffectiveTensors::compute(&c, &coeffs, 0.0, [0.0; 2]).unwrap();
        assert!(t.estar_discrepancy() < 1e-9, "{}", t.estar_discrepancy());
        assert!(t.dstar_discrepancy() < 1e-9, "{}", t.dstar_discrepancy());
        assert!(t.consistent(1e-8));
        let e = t.estar[0][0];
        assert!(e < t.porosity && e > 0.6, "{e}");
        // Swap symmetry of the mesh is exact; the reflection y1 -> 1 - y1 is not.
        assert!((t.estar[0][0] - t.estar[1][1]).abs() < 1e-9);
        assert!(t.estar[0][1].abs() < 1e-3);
        assert!(t.estar_eigenvalues()[0] > 0.0);
    }
}
