//! Common interface of HJ solutions and batch evaluation to CSV.

use std::io::Write;

use nalgebra::DVector;

use crate::io::fmt17;
use crate::simulate::io_err;
use crate::system::{hj_residual, SystemRef};
use crate::{Error, Result};

/// A value-function gradient `p(x)` (a Lagrangian manifold) with its feedback law.
pub trait HjSolution: Send + Sync {
    /// `V(x)` when the solution carries one.
    fn value(&self, x: &DVector<f64>) -> Result<Option<f64>>;
    fn grad_value(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn system(&self) -> &SystemRef;

    /// `-D^{-1} g(x)^T p(x)`.
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sys = self.system();
        Ok(-(sys.d_inv() * sys.g(x).transpose() * self.grad_value(x)?))
    }

    fn hj_residual(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.grad_value(x)?;
        Ok(hj_residual(self.system().as_ref(), |_| p.clone(), x))
    }
}

/// Rows `x1..xn, V, u1..um, hj_residual`; failed points get empty cells.
pub fn write_evaluation_csv<W: Write>(sol: &dyn HjSolution, states: &[DVector<f64>], out: W) -> Result<()> {
    let sys = sol.system();
    let (n, m) = (sys.n(), sys.m());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("V".into());
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("hj_residual".into());
    w.write_record(&header).map_err(io_err)?;
    for x in states {
        let mut rec: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
        rec.push(match sol.value(x) {
            Ok(Some(v)) => fmt17(v),
            _ => String::new(),
        });
        match sol.control(x) {
            Ok(u) => rec.extend(u.iter().map(|v| fmt17(*v))),
            Err(_) => rec.extend((0..m).map(|_| String::new())),
        }
        rec.push(sol.hj_residual(x).map(fmt17).unwrap_or_default());
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
