//! Fixed-step RK4 integration, closed-loop rollouts with running cost, and
//! the LQR baseline.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::io::fmt17;
use crate::spectral::solve_riccati;
use crate::system::{ControlAffineSystem, Linearization, VectorField};
use crate::{Error, Result};

/// A feedback law `u = k(x)`; evaluation may fail (e.g. a singular solve).
pub type ControlLaw = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync;

/// Final-state norm below which a rollout counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `(K+1) x n`.
    pub states: DMatrix<f64>,
    /// `K x m`, input applied at the start of each step.
    pub inputs: DMatrix<f64>,
    /// Running cost accumulated up to each time (trapezoid rule).
    pub cumulative_cost: Vec<f64>,
    pub running_cost: f64,
    pub converged: bool,
    pub diverged: bool,
    /// Why integration stopped early, if it did.
    pub diagnostic: Option<String>,
}

impl Trajectory {
    pub fn final_state(&self) -> DVector<f64> {
        self.states.row(self.states.nrows() - 1).transpose()
    }

    pub fn max_norm(&self) -> f64 {
        self.states.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// CSV with columns `t, x1..xn, u1..um, cumulative_cost`. The last row
    /// repeats the final input (inputs are piecewise constant per step).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.states.ncols();
        let m = self.inputs.ncols();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("cumulative_cost".into());
        w.write_record(&header).map_err(io_err)?;
        for k in 0..self.times.len() {
            let mut rec = vec![fmt17(self.times[k])];
            rec.extend(self.states.row(k).iter().map(|v| fmt17(*v)));
            if self.inputs.nrows() > 0 {
                let ku = k.min(self.inputs.nrows() - 1);
                rec.extend(self.inputs.row(ku).iter().map(|v| fmt17(*v)));
            } else {
                rec.extend((0..m).map(|_| String::new()));
            }
            rec.push(fmt17(self.cumulative_cost[k]));
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

pub(crate) fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn step_count(dt: f64, t_final: f64) -> usize {
    assert!(dt > 0.0 && t_final >= dt, "need dt > 0 and T >= dt");
    (t_final / dt).round() as usize
}

fn rk4_step(field: impl Fn(&DVector<f64>) -> Result<DVector<f64>>, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    let k1 = field(x)?;
    let k2 = field(&(x + &k1 * (dt / 2.0)))?;
    let k3 = field(&(x + &k2 * (dt / 2.0)))?;
    let k4 = field(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

fn assemble(
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    m: usize,
    cum: Vec<f64>,
    diverged: bool,
    diagnostic: Option<String>,
) -> Trajectory {
    let n = states[0].len();
    let states = DMatrix::from_fn(states.len(), n, |i, j| states[i][j]);
    let inputs = DMatrix::from_fn(inputs.len(), m, |i, j| inputs[i][j]);
    let last = states.row(states.nrows() - 1).norm();
    let truncated = diverged || diagnostic.is_some();
    Trajectory {
        times,
        running_cost: *cum.last().unwrap(),
        cumulative_cost: cum,
        states,
        inputs,
        converged: !truncated && last <= CONVERGENCE_TOL,
        diverged,
        diagnostic,
    }
}

/// Classical fixed-step RK4 for an autonomous field. A non-finite state
/// truncates the trajectory with the `diverged` flag set.
pub fn integrate_rk4(field: &dyn VectorField, x0: &DVector<f64>, dt: f64, t_final: f64) -> Trajectory {
    let steps = step_count(dt, t_final);
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut diverged = false;
    let mut diagnostic = None;
    for k in 0..steps {
        let next = rk4_step(|z| Ok(field.eval(z)), &states[k], dt).expect("autonomous field is infallible");
        let t = (k + 1) as f64 * dt;
        if next.iter().any(|v| !v.is_finite()) {
            diverged = true;
            diagnostic = Some(format!("diverged at t = {t}"));
            break;
        }
        times.push(t);
        states.push(next);
    }
    let cum = vec![0.0; times.len()];
    assemble(times, states, Vec::new(), 0, cum, diverged, diagnostic)
}

/// Rollout of `xdot = f(x) + g(x) u` with `u = controller(x)` evaluated at every
/// RK4 stage, accumulating `q(x) + 1/2 u^T D u` by the trapezoid rule.
pub fn closed_loop(sys: &dyn ControlAffineSystem, controller: &ControlLaw, x0: &DVector<f64>, dt: f64, t_final: f64) -> Trajectory {
    let steps = step_count(dt, t_final);
    let m = sys.m();
    let running = |x: &DVector<f64>, u: &DVector<f64>| sys.q(x) + 0.5 * (sys.d() * u).dot(u);
    let field = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let u = controller(x)?;
        Ok(sys.f(x) + sys.g(x) * u)
    };
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(steps);
    let mut cum = vec![0.0];
    let mut diverged = false;
    let mut diagnostic = None;
    let mut u = match controller(x0) {
        Ok(u) => u,
        Err(e) => {
            return assemble(times, states, inputs, m, cum, false, Some(format!("controller failed at t = 0: {e}")));
        }
    };
    let mut c_prev = running(x0, &u);
    for k in 0..steps {
        let t = (k + 1) as f64 * dt;
        let next = match rk4_step(field, &states[k], dt) {
            Ok(x) => x,
            Err(e) => {
                diagnostic = Some(format!("controller failed at t = {}: {e}", k as f64 * dt));
                break;
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            diverged = true;
            diagnostic = Some(format!("diverged at t = {t}"));
            break;
        }
        let u_next = match controller(&next) {
            Ok(u) if u.iter().all(|v| v.is_finite()) => u,
            Ok(_) => {
                diverged = true;
                diagnostic = Some(format!("non-finite input at t = {t}"));
                break;
            }
            Err(e) => {
                diagnostic = Some(format!("controller failed at t = {t}: {e}"));
                break;
            }
        };
        let c_next = running(&next, &u_next);
        cum.push(cum[k] + 0.5 * dt * (c_prev + c_next));
        inputs.push(u);
        times.push(t);
        states.push(next);
        u = u_next;
        c_prev = c_next;
    }
    assemble(times, states, inputs, m, cum, diverged, diagnostic)
}

/// LQR gain `K = D^{-1} B^T P` and the Riccati solution `P`.
#[derive(Debug, Clone)]
pub struct Lqr {
    pub K: DMatrix<f64>,
    pub P: DMatrix<f64>,
}

impl Lqr {
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.K * x)
    }
}

pub fn lqr_controller(lin: &Linearization) -> Result<Lqr> {
    let sol = solve_riccati(&lin.A, &lin.R0, &lin.Q0)?;
    let d_inv = lin.D.clone().try_inverse().ok_or(Error::ControlWeightSingular)?;
    Ok(Lqr { K: d_inv * lin.B.transpose() * &sol.P, P: sol.P })
}

/// Points i.i.d. uniform in the box `center +- rel * |center|` per coordinate.
pub fn initial_condition_cloud(center: &[f64], rel: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            DVector::from_iterator(
                center.len(),
                center.iter().map(|&c| {
                    let w = rel * c.abs();
                    if w == 0.0 {
                        c
                    } else {
                        rng.random_range(c - w..c + w)
                    }
                }),
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub controller: String,
    pub ic_index: usize,
    pub x0: DVector<f64>,
    pub converged: bool,
    pub cost: f64,
    pub max_norm: f64,
    pub final_norm: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn converged_count(&self, controller: &str) -> usize {
        self.rows.iter().filter(|r| r.controller == controller && r.converged).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.rows.first().map_or(0, |r| r.x0.len());
        let mut header: Vec<String> = vec!["controller".into(), "ic".into()];
        header.extend((1..=n).map(|i| format!("x0_{i}")));
        header.extend(["converged", "cost", "max_norm", "final_norm", "diagnostic"].map(String::from));
        w.write_record(&header).map_err(io_err)?;
        for r in &self.rows {
            let mut rec = vec![r.controller.clone(), r.ic_index.to_string()];
            rec.extend(r.x0.iter().map(|v| fmt17(*v)));
            rec.push(r.converged.to_string());
            rec.push(fmt17(r.cost));
            rec.push(fmt17(r.max_norm));
            rec.push(fmt17(r.final_norm));
            rec.push(r.diagnostic.clone().unwrap_or_default());
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

/// Roll out every controller from every initial condition. Cells run in
/// parallel; rows keep controller-major input order.
pub fn compare_controllers(
    sys: &dyn ControlAffineSystem,
    controllers: &[(String, Box<ControlLaw>)],
    x0_list: &[DVector<f64>],
    dt: f64,
    t_final: f64,
) -> ComparisonTable {
    let cells: Vec<(usize, usize)> = (0..controllers.len()).flat_map(|c| (0..x0_list.len()).map(move |i| (c, i))).collect();
    let rows = cells
        .par_iter()
        .map(|&(c, i)| {
            let (name, law) = &controllers[c];
            let traj = closed_loop(sys, law.as_ref(), &x0_list[i], dt, t_final);
            ComparisonRow {
                controller: name.clone(),
                ic_index: i,
                x0: x0_list[i].clone(),
                converged: traj.converged,
                cost: traj.running_cost,
                max_norm: traj.max_norm(),
                final_norm: traj.final_state().norm(),
                diagnostic: traj.diagnostic,
            }
        })
        .collect();
    ComparisonTable { rows }
}
