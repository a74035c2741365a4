//! The four subcommands. Each writes its files into the output directory and
//! returns the report text.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use koopman_hj::basis::value_basis_xi3;
use koopman_hj::galerkin::{approximate_eigenfunction_set, convergence_study, derive_seed, sample_domain, write_blocks_csv, Reference};
use koopman_hj::io::fmt17;
use koopman_hj::procedure1::{example1_eigenfunctions, procedure1_solve, EigenfunctionSet, Solution1Export};
use koopman_hj::procedure2::{fit_value_Jn, procedure2_solve, Procedure2Config, Solution2Export};
use koopman_hj::simulate::{closed_loop, initial_condition_cloud, lqr_controller, ComparisonRow, ComparisonTable, ControlLaw};
use koopman_hj::solution::{write_evaluation_csv, HjSolution};
use koopman_hj::spectral::real_spectral_decomposition;
use koopman_hj::system::{linearize, Drift};
use koopman_hj::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{ConfigError, EigenfunctionSource, Resolved};

/// Failure of a command after the config was accepted.
pub enum Failure {
    Config(ConfigError),
    Numerical(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Numerical(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(io)?;
    }
    Ok(BufWriter::new(File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text).map_err(|e| Error::Io(format!("{name}: {e}")))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io)?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn matrix_lines(name: &str, m: &DMatrix<f64>) -> String {
    let mut s = format!("{name} =\n");
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|v| fmt17(*v)).collect();
        let _ = writeln!(s, "  [{}]", cells.join(", "));
    }
    s
}

/// Prepare the output directory and write the resolved config.
pub fn prepare(res: &Resolved) -> Result<()> {
    fs::create_dir_all(&res.cfg.output_dir).map_err(|e| Error::Io(format!("{}: {e}", res.cfg.output_dir.display())))?;
    write_text(&res.cfg.output_dir, "resolved_config.toml", &res.to_toml())
}

fn finish(res: &Resolved, command: &str, body: String) -> Result<String> {
    let report = format!("koopman-hj {command}\n\n{body}\nresolved configuration:\n{}", res.to_toml());
    write_text(&res.cfg.output_dir, "report.txt", &report)?;
    Ok(report)
}

fn galerkin_set(res: &Resolved) -> Result<EigenfunctionSet> {
    let lin = linearize(res.sys.as_ref())?;
    let samples = sample_domain(&res.domain, res.cfg.eigfun.samples, res.cfg.seed)?;
    approximate_eigenfunction_set(&Drift(res.sys.clone()), &lin.A, &res.cfg.eigfun.basis_spec(), &samples)
}

pub fn eigfun(res: &Resolved) -> std::result::Result<String, Failure> {
    let out = &res.cfg.output_dir;
    let set = galerkin_set(res)?;
    let parts = set.galerkin_parts().expect("galerkin set");
    write_blocks_csv(parts, create(out, "eigenfunctions.csv")?)?;
    write_json(out, "eigenfunctions.json", &set.export()?)?;
    let mut body = String::new();
    let _ = writeln!(body, "samples: {}  seed: {}", res.cfg.eigfun.samples, res.cfg.seed);
    let _ = writeln!(body, "block  eigenvalue                       basis  cond_J                   train_rms                holdout_rms              holdout_ok");
    for p in parts {
        let ev = if p.block.size == 1 { fmt17(p.block.re) } else { format!("{} +- {}i", fmt17(p.block.re), fmt17(p.block.im)) };
        let d = &p.diagnostics;
        let _ = writeln!(
            body,
            "{:<6} {:<32} {:<6} {:<24} {:<24} {:<24} {}",
            p.block.start,
            ev,
            p.basis.exponents().len(),
            fmt17(d.cond_J),
            fmt17(d.train_residual_rms),
            fmt17(d.holdout_residual_rms),
            d.holdout_ok
        );
    }
    let worst = parts.iter().map(|p| p.diagnostics.holdout_residual_rms).fold(0.0, f64::max);
    let _ = writeln!(body, "max held-out residual RMS: {}", fmt17(worst));
    Ok(finish(res, "eigfun", body)?)
}

/// Tensor grid over the domain, first coordinate slowest.
fn grid(res: &Resolved, per_dim: usize) -> Vec<DVector<f64>> {
    let n = res.domain.dim();
    let total = per_dim.pow(n as u32);
    (0..total)
        .map(|mut k| {
            let mut x = DVector::zeros(n);
            for i in (0..n).rev() {
                let j = k % per_dim;
                k /= per_dim;
                let (lo, hi) = (res.domain.lo[i], res.domain.hi[i]);
                x[i] = lo + (hi - lo) * j as f64 / (per_dim - 1) as f64;
            }
            x
        })
        .collect()
}

fn read_states(path: &Path, n: usize) -> std::result::Result<Vec<DVector<f64>>, ConfigError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| ConfigError(format!("states file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| ConfigError(format!("states file line {}: {e}", i + 1)))?;
        let v: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        match v {
            Ok(v) if v.len() == n => out.push(DVector::from_vec(v)),
            _ => return Err(ConfigError(format!("states file line {}: expected {n} numbers", i + 1))),
        }
    }
    Ok(out)
}

fn hj_field(sol: &dyn HjSolution, states: &[DVector<f64>], out: &Path) -> Result<f64> {
    let residuals: Vec<Option<f64>> = states.par_iter().map(|x| sol.hj_residual(x).ok()).collect();
    let n = states.first().map_or(0, |x| x.len());
    let mut w = csv::Writer::from_writer(create(out, "hj_residual.csv")?);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("hj_residual".into());
    w.write_record(&header).map_err(io)?;
    for (x, r) in states.iter().zip(&residuals) {
        let mut rec: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
        rec.push(r.map(fmt17).unwrap_or_default());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(residuals.iter().flatten().fold(0.0, |m, r| m.max(r.abs())))
}

pub fn solve(res: &Resolved) -> std::result::Result<String, Failure> {
    let out = &res.cfg.output_dir;
    let s = &res.cfg.solve;
    let states = match &s.states_file {
        Some(p) => Some(read_states(&res.path(p), res.sys.n())?),
        None => None,
    };
    let mut body = String::new();
    let sol: Box<dyn HjSolution> = if s.procedure == 1 {
        let eig = match s.eigenfunctions {
            EigenfunctionSource::Galerkin => galerkin_set(res)?,
            EigenfunctionSource::Linear => {
                EigenfunctionSet::linear(real_spectral_decomposition(&linearize(res.sys.as_ref())?.A)?, res.domain.clone())
            }
            EigenfunctionSource::ClosedForm => example1_eigenfunctions(res.domain.clone()),
        };
        let eig = match &s.scale {
            Some(f) => eig.rescaled(f).map_err(|e| ConfigError(format!("solve: scale: {e}")))?,
            None => eig,
        };
        let sol = procedure1_solve(res.sys.clone(), eig)?;
        let _ = writeln!(body, "procedure 1, eigenfunctions: {:?}", s.eigenfunctions);
        body += &matrix_lines("L", &sol.L);
        body += &matrix_lines("R1", &sol.R1);
        body += &matrix_lines("Q1", &sol.Q1);
        body += &matrix_lines("P_r = Vt^T L Vt", &(sol.eig.Vt.transpose() * &sol.L * &sol.eig.Vt));
        let _ = writeln!(body, "riccati residual: {}", fmt17(sol.riccati_residual));
        if let Some(parts) = sol.eig.galerkin_parts() {
            let worst = parts.iter().map(|p| p.diagnostics.holdout_residual_rms).fold(0.0, f64::max);
            let _ = writeln!(body, "max eigenfunction held-out residual RMS: {}", fmt17(worst));
        }
        match s.eigenfunctions {
            EigenfunctionSource::ClosedForm => {
                let _ = writeln!(body, "closed-form eigenfunctions are not serializable; no solution.json written");
            }
            _ => write_json::<Solution1Export>(out, "solution.json", &sol.export()?)?,
        }
        Box::new(sol)
    } else {
        let cfg = Procedure2Config {
            d1: s.d1,
            d2: s.d2,
            x_domain: res.domain.clone(),
            samples: res.cfg.eigfun.samples,
            seed: res.cfg.seed,
            p_sampling: s.p_sampling,
        };
        let mut sol = procedure2_solve(res.sys.clone(), &cfg)?;
        if s.value_degree >= 2 {
            let xs = sample_domain(&res.domain, s.value_samples, derive_seed(res.cfg.seed, 2000))?;
            sol.value_fit = Some(fit_value_Jn(&sol, value_basis_xi3(res.sys.n(), s.value_degree)?, &xs)?);
        }
        let _ = writeln!(body, "procedure 2, d1 = {}, d2 = {}", s.d1, s.d2);
        body += &matrix_lines("P_r = Jl", &sol.Jl);
        let _ = writeln!(body, "Jl relative asymmetry: {}", fmt17(sol.asymmetry));
        for (k, d) in sol.eigs.diagnostics.iter().enumerate() {
            let _ = writeln!(
                body,
                "unstable block {k}: cond_J {}, train residual RMS {}, held-out residual RMS {}",
                fmt17(d.cond_J),
                fmt17(d.train_residual_rms),
                fmt17(d.holdout_residual_rms)
            );
        }
        if let Some(f) = &sol.value_fit {
            let _ = writeln!(
                body,
                "value fit (degree {}): gradient residual {}, after PSD clipping {}, objective residual {}",
                s.value_degree,
                fmt17(f.fit_residual),
                fmt17(f.fit_residual_psd),
                fmt17(f.objective_residual)
            );
        }
        write_json::<Solution2Export>(out, "solution.json", &sol.export())?;
        Box::new(sol)
    };
    let g = grid(res, s.grid_per_dim);
    write_evaluation_csv(sol.as_ref(), &g, create(out, "evaluation.csv")?)?;
    let worst = hj_field(sol.as_ref(), &g, out)?;
    let _ = writeln!(body, "max |HJ residual| on the {}-per-axis grid: {}", s.grid_per_dim, fmt17(worst));
    if let Some(states) = states {
        write_evaluation_csv(sol.as_ref(), &states, create(out, "states_evaluation.csv")?)?;
        let _ = writeln!(body, "evaluated {} states from the states file", states.len());
    }
    Ok(finish(res, "solve", body)?)
}

fn load_solution(res: &Resolved, path: &Path) -> std::result::Result<(String, Arc<dyn HjSolution>), Failure> {
    let full = res.path(path);
    let text = fs::read_to_string(&full).map_err(|e| ConfigError(format!("solution file {}: {e}", full.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("solution file {}: {e}", full.display())))?;
    let parse_err = |e: serde_json::Error| ConfigError(format!("solution file {}: {e}", full.display()));
    let restore_err = |e: Error| ConfigError(format!("solution file {}: {e}", full.display()));
    match value.get("procedure").and_then(|p| p.as_u64()) {
        Some(1) => {
            let e: Solution1Export = serde_json::from_value(value).map_err(parse_err)?;
            Ok(("procedure1".into(), Arc::new(e.restore(res.sys.clone()).map_err(restore_err)?)))
        }
        Some(2) => {
            let e: Solution2Export = serde_json::from_value(value).map_err(parse_err)?;
            Ok(("procedure2".into(), Arc::new(e.restore(res.sys.clone()).map_err(restore_err)?)))
        }
        _ => Err(ConfigError(format!("solution file {}: missing procedure field", full.display())).into()),
    }
}

pub fn simulate(res: &Resolved) -> std::result::Result<String, Failure> {
    let out = &res.cfg.output_dir;
    let m = &res.cfg.simulate;
    let sys = res.sys.clone();
    let mut controllers: Vec<(String, Box<ControlLaw>)> = Vec::new();
    for name in &m.controllers {
        let law: Box<ControlLaw> = match name.as_str() {
            "lqr" => {
                let lqr = lqr_controller(&linearize(sys.as_ref())?)?;
                Box::new(move |x: &DVector<f64>| Ok(lqr.control(x)))
            }
            _ => {
                let mm = sys.m();
                Box::new(move |_: &DVector<f64>| Ok(DVector::zeros(mm)))
            }
        };
        controllers.push((name.clone(), law));
    }
    for path in &m.solution_files {
        let (mut name, sol) = load_solution(res, path)?;
        if controllers.iter().any(|(c, _)| *c == name) {
            name = format!("{name}_{}", controllers.len());
        }
        controllers.push((name, Box::new(move |x: &DVector<f64>| sol.control(x))));
    }
    if controllers.is_empty() {
        return Err(ConfigError("simulate: no controllers configured".into()).into());
    }
    let mut ics: Vec<DVector<f64>> = m.initial_conditions.iter().map(|x| DVector::from_column_slice(x)).collect();
    if let Some(c) = &m.cloud {
        ics.extend(initial_condition_cloud(&c.center, c.rel, c.count, derive_seed(res.cfg.seed, 3000)));
    }
    if ics.is_empty() {
        return Err(ConfigError("simulate: no initial conditions (set initial_conditions or cloud)".into()).into());
    }
    let cells: Vec<(usize, usize)> = (0..controllers.len()).flat_map(|c| (0..ics.len()).map(move |i| (c, i))).collect();
    let trajectories: Vec<_> =
        cells.par_iter().map(|&(c, i)| closed_loop(sys.as_ref(), controllers[c].1.as_ref(), &ics[i], m.dt, m.t_final)).collect();
    let mut rows = Vec::with_capacity(cells.len());
    for (&(c, i), traj) in cells.iter().zip(&trajectories) {
        let name = &controllers[c].0;
        traj.write_csv(create(out, &format!("trajectories/{name}_ic{i}.csv"))?)?;
        rows.push(ComparisonRow {
            controller: name.clone(),
            ic_index: i,
            x0: ics[i].clone(),
            converged: traj.converged,
            cost: traj.running_cost,
            max_norm: traj.max_norm(),
            final_norm: traj.final_state().norm(),
            diagnostic: traj.diagnostic.clone(),
        });
    }
    let table = ComparisonTable { rows };
    table.write_csv(create(out, "comparison.csv")?)?;
    let mut body = String::new();
    let _ = writeln!(body, "{} initial conditions, dt = {}, T = {}", ics.len(), fmt17(m.dt), fmt17(m.t_final));
    for (name, _) in &controllers {
        let costs: Vec<f64> = table.rows.iter().filter(|r| &r.controller == name && r.converged).map(|r| r.cost).collect();
        let mean = if costs.is_empty() { f64::NAN } else { costs.iter().sum::<f64>() / costs.len() as f64 };
        let _ = writeln!(
            body,
            "{name}: converged {}/{}, mean cost over converged runs {}",
            table.converged_count(name),
            ics.len(),
            fmt17(mean)
        );
    }
    Ok(finish(res, "simulate", body)?)
}

pub fn converge(res: &Resolved) -> std::result::Result<String, Failure> {
    let out = &res.cfg.output_dir;
    let c = &res.cfg.converge;
    let lin = linearize(res.sys.as_ref())?;
    let table = convergence_study(
        &Drift(res.sys.clone()),
        &lin.A,
        c.block,
        &res.cfg.eigfun.basis_spec(),
        &res.domain,
        &c.samples,
        c.trials,
        res.cfg.seed,
        Reference::Quadrature { per_dim: c.reference_per_dim },
        c.eval_per_dim,
    )?;
    table.write_csv(create(out, "convergence.csv")?)?;
    let mut body = String::new();
    let _ = writeln!(body, "block {}, {} trials per sample size", c.block, c.trials);
    let _ = writeln!(body, "L        mean                     q1                       median                   q3");
    for s in &table.summary {
        let _ = writeln!(body, "{:<8} {:<24} {:<24} {:<24} {}", s.samples, fmt17(s.mean), fmt17(s.q1), fmt17(s.median), fmt17(s.q3));
    }
    let _ = writeln!(body, "log-log slope (means): {}", fmt17(table.slope));
    let _ = writeln!(body, "log-log slope (medians): {}", fmt17(table.median_slope));
    let _ = writeln!(body, "medians strictly decrease: {}", table.medians_strictly_decrease());
    Ok(finish(res, "converge", body)?)
}
