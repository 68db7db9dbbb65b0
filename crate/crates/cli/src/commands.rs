//! Subcommand implementations. Each writes its files into the output directory and a
//! short summary to stdout.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use homog_core::cell::{solve_first_order, CellContext};
use homog_core::coefficients::{
    corrosion_interaction_det, corrosion_preset, validate_assumptions, CoefficientSet, SampleGrid,
};
use homog_core::constants::{
    compute_constants, optimize_eta, rescaled_rates, sample_norms, BoundConstants, EtaChoices, Objective,
};
use homog_core::corrector::{oscillation_check, run_sweep, CorrectorConfig};
use homog_core::effective::{tabulate, write_csv};
use homog_core::expr::Expr;
use homog_core::mesh::{DomainSpec, Mesh};
use homog_core::pde::{run_fine, run_macro, Keep, Trajectory};
use log::{info, warn};
use serde::Serialize;

use crate::config::Config;
use crate::CliError;

fn numerical(e: impl Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a Config,
}

/// Echoes the command and the parsed configuration to `manifest.toml`.
pub fn write_manifest(dir: &Path, command: &str, cfg: &Config) -> Result<(), CliError> {
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), config: cfg };
    let text = toml::to_string(&m).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn cell_context(cfg: &Config) -> Result<CellContext, CliError> {
    CellContext::new(&cfg.cell_spec()?, cfg.cell_options()).map_err(numerical)
}

fn sample_grid(cfg: &Config, points: usize) -> Result<SampleGrid, CliError> {
    let t_end = cfg.time.as_ref().map_or(1.0, |t| t.t_end);
    if points < 2 {
        return Err(CliError::Config("sample_points must be at least 2".into()));
    }
    Ok(SampleGrid { t_end, points_per_axis: points })
}

pub fn cell(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let coeffs = cfg.coefficients()?;
    let ctx = cell_context(cfg)?;
    let points = cfg.slow_points()?;
    info!("cell mesh: {} nodes, {} triangles", ctx.mesh.num_nodes(), ctx.mesh.num_elements());
    let table = tabulate(&ctx, &coeffs, 0.0, &points).map_err(numerical)?;
    write_csv(create(out, "effective.csv")?, &table)?;

    let first = solve_first_order(&ctx, &coeffs, 0.0, points[0]).map_err(numerical)?;
    let n = coeffs.n;
    let mut w = create(out, "cell_fields.csv")?;
    let mut header = vec!["y1".to_string(), "y2".into(), "W1".into(), "W2".into()];
    header.extend((0..n * n).map(|k| format!("Z{}{}", k / n + 1, k % n + 1)));
    writeln!(w, "{}", header.join(","))?;
    for (i, y) in ctx.mesh.nodes.iter().enumerate() {
        let mut row = vec![y[0], y[1], first.w[0][i], first.w[1][i]];
        row.extend(first.z.iter().map(|z| z[i]));
        writeln!(w, "{}", row.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(","))?;
    }
    w.flush()?;

    let e = &table[0];
    println!("porosity {:.12}", e.porosity);
    println!("E* = [[{:.12}, {:.12}], [{:.12}, {:.12}]]", e.estar[0][0], e.estar[0][1], e.estar[1][0], e.estar[1][1]);
    println!("E* vs Gram form {:.3e}, D* vs alternative form {:.3e}", e.estar_discrepancy(), e.dstar_discrepancy());
    Ok(())
}

fn write_trajectory(out: &Path, prefix: &str, mesh: &Mesh, traj: &Trajectory) -> Result<(), CliError> {
    let mut w = create(out, &format!("{prefix}_energy.csv"))?;
    writeln!(w, "t,u_h1,v_l2,v_seminorm,apriori_lhs,apriori_rhs")?;
    for e in &traj.energies {
        let (l, r) = e.apriori.map_or((String::new(), String::new()), |(l, r)| (format!("{l:.12e}"), format!("{r:.12e}")));
        writeln!(w, "{:.12e},{:.12e},{:.12e},{:.12e},{l},{r}", e.t, e.u_h1, e.v_l2, e.v_seminorm)?;
    }
    w.flush()?;

    let n = traj.n;
    let last = traj.last();
    let mut w = create(out, &format!("{prefix}_final.csv"))?;
    let mut header = vec!["x1".to_string(), "x2".into()];
    header.extend((1..=n).map(|a| format!("u{a}")));
    header.extend((1..=n).map(|a| format!("v{a}")));
    writeln!(w, "{}", header.join(","))?;
    for (i, x) in mesh.nodes.iter().enumerate() {
        let mut row = vec![x[0], x[1]];
        row.extend(&last.u[i * n..(i + 1) * n]);
        row.extend(&last.v[i * n..(i + 1) * n]);
        writeln!(w, "{}", row.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn fine(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let coeffs = cfg.coefficients()?;
    let grid = cfg.grid()?;
    let fc = cfg.fine()?;
    let domain = DomainSpec::from_epsilon(fc.epsilon).map_err(|e| CliError::Config(e.to_string()))?;
    let cell_mesh = Mesh::cell(&cfg.cell_spec()?).map_err(numerical)?;
    let mesh = Mesh::perforated_domain(&cell_mesh, &domain).map_err(numerical)?;
    info!("fine mesh: {} nodes, {} steps", mesh.num_nodes(), grid.steps);
    let apriori = if fc.apriori {
        let nb = sample_norms(&coeffs, &sample_grid(cfg, 33)?).map_err(numerical)?;
        match compute_constants(&nb, &EtaChoices::defaults(&nb)) {
            Ok(bc) => Some(bc.apriori()),
            Err(e) => {
                warn!("a priori check disabled: {e}");
                None
            }
        }
    } else {
        None
    };
    let traj = run_fine(&mesh, &coeffs, fc.epsilon, grid, cfg.solver(), apriori, Keep::Final).map_err(numerical)?;
    write_trajectory(out, "fine", &mesh, &traj)?;
    let e = traj.energies.last().expect("energy log is never empty");
    println!("fine run: {} nodes, t = {}, ||u||_H1 = {:.6e}, ||v||_L2 = {:.6e}", mesh.num_nodes(), e.t, e.u_h1, e.v_l2);
    let violations = traj.apriori_violations();
    if !violations.is_empty() {
        return Err(CliError::Numerical(format!("a priori inequality violated at steps {violations:?}")));
    }
    Ok(())
}

pub fn macro_run(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let coeffs = cfg.coefficients()?;
    let grid = cfg.grid()?;
    let mc = cfg.macro_run()?;
    let ctx = cell_context(cfg)?;
    let mesh = Mesh::unit_square(mc.resolution).map_err(|e| CliError::Config(e.to_string()))?;
    let traj = run_macro(&mesh, &coeffs, &ctx, grid, cfg.solver(), Keep::Final).map_err(numerical)?;
    write_trajectory(out, "macro", &mesh, &traj)?;
    let e = traj.energies.last().expect("energy log is never empty");
    println!("macro run: {} nodes, t = {}, ||u||_H1 = {:.6e}, ||v||_L2 = {:.6e}", mesh.num_nodes(), e.t, e.u_h1, e.v_l2);
    Ok(())
}

pub fn sweep(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let sc = cfg.sweep()?;
    let mut cc = CorrectorConfig::new(cfg.coefficients()?, cfg.cell_spec()?, cfg.grid()?, sc.epsilons.clone());
    cc.cutoff_multiplier = sc.cutoff_multiplier;
    cc.slow_resolution = sc.slow_resolution;
    cc.self_check = sc.self_check;
    cc.sample_points = sc.sample_points;
    cc.eta_points = sc.eta_points;
    cc.cell_options = cfg.cell_options();
    if let Some(s) = &cfg.solver {
        cc.solver.tol = s.tol.unwrap_or(cc.solver.tol);
        cc.solver.max_iter = s.max_iter.or(cc.solver.max_iter);
        cc.solver.direct_max_dim = s.direct_max_dim.unwrap_or(cc.solver.direct_max_dim);
        cc.solver.check_tol = s.check_tol.unwrap_or(cc.solver.check_tol);
    }
    let rep = run_sweep(&cc).map_err(numerical)?;
    rep.write_csv(create(out, "corrector.csv")?)?;
    rep.write_plot_data(create(out, "corrector_plot.dat")?)?;
    rep.write_time_logs(create(out, "corrector_time.csv")?)?;
    std::fs::write(out.join("constants.txt"), rep.constants.to_string())?;
    for r in &rep.rows {
        match &r.run {
            Ok(run) => println!(
                "eps {:<10} phi {:.6e} psi {:.6e} ratio {}",
                r.epsilon,
                run.last().phi_norm,
                run.last().psi_norm,
                r.ratio.map_or("-".into(), |v| format!("{v:.4}"))
            ),
            Err(e) => println!("eps {:<10} failed: {e}", r.epsilon),
        }
    }
    println!("phi slope {}, psi slope {}", rep.phi_slope.describe(), rep.psi_slope.describe());
    let failed = rep.rows.iter().filter(|r| r.run.is_err()).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} rows failed", rep.rows.len())));
    }
    Ok(())
}

fn constants_for(cfg: &Config, coeffs: &CoefficientSet) -> Result<BoundConstants, CliError> {
    let cc = cfg.constants_table();
    let nb = sample_norms(coeffs, &sample_grid(cfg, cc.sample_points)?).map_err(numerical)?;
    let objective = match cc.optimize.as_str() {
        "default" => return compute_constants(&nb, &EtaChoices::defaults(&nb)).map_err(numerical),
        "min_mu" => Objective::MinMu,
        "min_lambda_plus_mu" => Objective::MinLambdaPlusMu,
        other => return Err(CliError::Config(format!("unknown constants.optimize {other:?}"))),
    };
    let opt = optimize_eta(&nb, objective, cc.eta_points).map_err(numerical)?;
    info!("weight search: {} feasible of {} evaluated", opt.feasible, opt.evaluated);
    Ok(opt.constants)
}

pub fn constants(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let coeffs = cfg.coefficients()?;
    let cc = cfg.constants_table();
    if !(0.0..0.5).contains(&cc.q) {
        return Err(CliError::Config(format!("constants.q = {} outside [0, 1/2)", cc.q)));
    }
    let bc = constants_for(cfg, &coeffs)?;
    std::fs::write(out.join("constants.txt"), bc.to_string())?;
    let table = rescaled_rates(&bc, cc.q, cc.p, cc.rate_points).map_err(numerical)?;
    table.write_csv(create(out, "rates.csv")?)?;
    println!("kappa {:.6e}, l {:.6e}, lambda {:.6e}, mu {:.6e}, m {:.6e}", bc.kappa, bc.l, bc.lambda, bc.mu, bc.m);
    println!("rate branch {}, {} rows", table.branch, table.rows.len());
    Ok(())
}

pub fn oscillation(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let oc = cfg.oscillation()?;
    let f = Expr::parse(&oc.function).map_err(|e| CliError::Config(e.to_string()))?;
    let table = oscillation_check(&f, &oc.epsilons, oc.per_period).map_err(numerical)?;
    table.write_csv(create(out, "oscillation.csv")?)?;
    for r in &table.rows {
        println!("eps {:<10} integral {:.6e} target {:.6e} difference {:.3e}", r.epsilon, r.integral, r.target, r.difference);
    }
    println!("order {}", table.order.describe());
    Ok(())
}

pub fn corrosion(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let params = cfg.corrosion_params();
    let (set, mats) = corrosion_preset(&params).map_err(|e| CliError::Config(e.to_string()))?;
    let grid = sample_grid(cfg, 33)?;
    let validation = validate_assumptions(&set, &grid);
    let det = corrosion_interaction_det(&params);
    let mut w = create(out, "corrosion.txt")?;
    let show = |m: [[f64; 2]; 2]| format!("[[{:.12}, {:.12}], [{:.12}, {:.12}]]", m[0][0], m[0][1], m[1][0], m[1][1]);
    for (name, m) in [
        ("M~", mats.m_tilde),
        ("F", mats.f),
        ("G~", mats.g_tilde),
        ("M", mats.m),
        ("L", mats.l),
        ("G", mats.g),
        ("K", mats.k),
    ] {
        writeln!(w, "{name:<3}= {}", show(m))?;
    }
    writeln!(w, "H  = [{:.12}, {:.12}]", mats.h[0], mats.h[1])?;
    writeln!(w, "det G~ = {det:.15}")?;
    writeln!(w, "\n{validation}")?;
    w.flush()?;
    set.write_entries(create(out, "corrosion_coefficients.txt")?)?;
    let bc = constants_for(cfg, &set)?;
    std::fs::write(out.join("constants.txt"), bc.to_string())?;
    println!("det G~ = {det:.12}, assumptions {}", if validation.passed() { "pass" } else { "fail" });
    println!("kappa {:.6e}, lambda {:.6e}, mu {:.6e}", bc.kappa, bc.lambda, bc.mu);
    if !validation.passed() {
        return Err(CliError::Config(format!("corrosion parameters violate the assumptions:\n{validation}")));
    }
    Ok(())
}
