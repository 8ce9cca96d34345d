//! Dense inequality-constrained quadratic program solver.
//!
//! The safety filter produces a fixed shape: 3 variables (two footstep
//! correction components and one slack) under 9 inequality rows. At that size
//! exhaustive enumeration of candidate active sets is exact and cheap, so no
//! iterative active-set bookkeeping is needed. For each subset of at most 3
//! rows the equality-constrained KKT system is solved directly; the first
//! candidate that is primal and dual feasible is a global optimum of the
//! convex program and is returned.
//!
//! The Hessian may be singular (the slack enters the objective linearly), in
//! which case subsets that leave the null direction unconstrained produce a
//! singular KKT system and are skipped. The program must therefore be bounded
//! below; an unbounded or infeasible program exhausts the enumeration and
//! comes back as an error carrying a diagnostic summary.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

pub const QP_VARS: usize = 3;
pub const QP_ROWS: usize = 9;

const FEAS_TOL: f64 = 1e-8;
const DUAL_TOL: f64 = 1e-8;

/// minimize 1/2 z' H z + f' z  subject to  A z <= b.
#[derive(Debug, Clone, PartialEq)]
pub struct Qp {
    pub hessian: Matrix3<f64>,
    pub linear: Vector3<f64>,
    pub a_ineq: SMatrix<f64, QP_ROWS, QP_VARS>,
    pub b_ineq: SVector<f64, QP_ROWS>,
}

impl Qp {
    pub fn validate(&self) -> Result<()> {
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.a_ineq.iter().all(|v| v.is_finite())
            && self.b_ineq.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("qp data"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &Vector3<f64>) -> f64 {
        0.5 * (self.hessian * z).dot(z) + self.linear.dot(z)
    }

    /// Largest constraint violation at `z` (negative means strictly interior).
    pub fn max_violation(&self, z: &Vector3<f64>) -> f64 {
        let r = self.a_ineq * z - self.b_ineq;
        r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vector3<f64>,
    /// Multipliers for all rows; zero on inactive rows.
    pub lambda: SVector<f64, QP_ROWS>,
    pub active: Vec<usize>,
    pub objective: f64,
    /// Stationarity residual norm plus worst feasibility violation, clamped
    /// at zero. Near machine precision for well-scaled data.
    pub kkt_residual: f64,
    pub candidates_tried: usize,
}

/// Solves the program by KKT enumeration. See the module docs for scope.
pub fn solve(qp: &Qp) -> Result<QpSolution> {
    qp.validate()?;
    let mut tried = 0;
    let mut best_violation = f64::INFINITY;
    let mut singular = 0;

    let mut subset = |rows: &[usize], tried: &mut usize| -> Option<QpSolution> {
        *tried += 1;
        let k = rows.len();
        let n = QP_VARS + k;
        let mut kkt = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for i in 0..QP_VARS {
            for j in 0..QP_VARS {
                kkt[(i, j)] = qp.hessian[(i, j)];
            }
            rhs[i] = -qp.linear[i];
        }
        for (c, &row) in rows.iter().enumerate() {
            for j in 0..QP_VARS {
                kkt[(QP_VARS + c, j)] = qp.a_ineq[(row, j)];
                kkt[(j, QP_VARS + c)] = qp.a_ineq[(row, j)];
            }
            rhs[QP_VARS + c] = qp.b_ineq[row];
        }
        let lu = kkt.full_piv_lu();
        let sol = lu.solve(&rhs)?;
        let z = Vector3::new(sol[0], sol[1], sol[2]);
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut lambda = SVector::<f64, QP_ROWS>::zeros();
        for (c, &row) in rows.iter().enumerate() {
            lambda[row] = sol[QP_VARS + c];
        }
        let violation = qp.max_violation(&z);
        best_violation = best_violation.min(violation.max(0.0));
        let scale = 1.0 + z.norm() + qp.b_ineq.norm();
        if violation > FEAS_TOL * scale {
            return None;
        }
        if lambda.iter().any(|l| *l < -DUAL_TOL * (1.0 + qp.linear.norm())) {
            return None;
        }
        let stationarity = qp.hessian * z + qp.linear + qp.a_ineq.transpose() * lambda;
        Some(QpSolution {
            z,
            lambda,
            active: rows.to_vec(),
            objective: qp.objective(&z),
            kkt_residual: stationarity.norm() + violation.max(0.0),
            candidates_tried: *tried,
        })
    };

    // Sizes ascending so the unconstrained and single-row cases, which cover
    // almost every call from the filter, return first.
    if let Some(s) = subset(&[], &mut tried) {
        return Ok(s);
    }
    for i in 0..QP_ROWS {
        if let Some(s) = subset(&[i], &mut tried) {
            return Ok(s);
        }
    }
    for i in 0..QP_ROWS {
        for j in i + 1..QP_ROWS {
            if let Some(s) = subset(&[i, j], &mut tried) {
                return Ok(s);
            }
        }
    }
    for i in 0..QP_ROWS {
        for j in i + 1..QP_ROWS {
            for k in j + 1..QP_ROWS {
                if let Some(s) = subset(&[i, j, k], &mut tried) {
                    return Ok(s);
                }
            }
        }
    }
    // Count singular subsets for the diagnostic only after failure.
    for rows in all_subsets() {
        let k = rows.len();
        let n = QP_VARS + k;
        let mut kkt = DMatrix::zeros(n, n);
        for i in 0..QP_VARS {
            for j in 0..QP_VARS {
                kkt[(i, j)] = qp.hessian[(i, j)];
            }
        }
        for (c, &row) in rows.iter().enumerate() {
            for j in 0..QP_VARS {
                kkt[(QP_VARS + c, j)] = qp.a_ineq[(row, j)];
                kkt[(j, QP_VARS + c)] = qp.a_ineq[(row, j)];
            }
        }
        if !kkt.full_piv_lu().is_invertible() {
            singular += 1;
        }
    }
    Err(Error::QpNoConvergence {
        iterations: tried,
        diagnostic: format!(
            "no KKT-consistent active set; best residual infeasibility {best_violation:.3e}, {singular}/{tried} singular subsets; problem likely infeasible or unbounded"
        ),
    })
}

fn all_subsets() -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for i in 0..QP_ROWS {
        out.push(vec![i]);
    }
    for i in 0..QP_ROWS {
        for j in i + 1..QP_ROWS {
            out.push(vec![i, j]);
        }
    }
    for i in 0..QP_ROWS {
        for j in i + 1..QP_ROWS {
            for k in j + 1..QP_ROWS {
                out.push(vec![i, j, k]);
            }
        }
    }
    out
}
