//! Least-squares conditional expectations on polynomial bases.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Largest accepted condition number of the (standardised) Gram matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// A fitted design: basis rows for every sample plus the factorised Gram matrix.
#[derive(Clone, Debug)]
pub struct Design {
    n: usize,
    nb: usize,
    rows: Vec<f64>,
    alive: Option<Vec<bool>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
}

/// Total-degree exponent tuples for `d` variables.
fn exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; d]];
    for total in 1..=degree {
        let mut cur = vec![0; d];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
}

impl Design {
    /// `x` is row-major `n x d`. Only rows with `alive[i]` enter the fit.
    /// Variables with no spread among the fitted rows are dropped, so a
    /// deterministic state reduces to the sample mean.
    pub fn new(
        exec: Exec,
        x: &[f64],
        d: usize,
        degree: usize,
        alive: Option<&[bool]>,
        step: usize,
    ) -> Result<Self> {
        let n = x
            .len()
            .checked_div(d)
            .unwrap_or_else(|| alive.map_or(0, |a| a.len()));
        let is_alive = |i: usize| alive.is_none_or(|a| a[i]);
        let count = (0..n).filter(|&i| is_alive(i)).count();
        if count == 0 {
            return Err(Error::RankDeficient {
                step,
                detail: "no samples".into(),
            });
        }
        // standardise
        let mut keep = Vec::new();
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for j in 0..d {
            let s = exec.sum(n, |i| if is_alive(i) { x[i * d + j] } else { 0.0 });
            let mu = s / count as f64;
            let v = exec.sum(n, |i| {
                if is_alive(i) {
                    (x[i * d + j] - mu).powi(2)
                } else {
                    0.0
                }
            }) / count as f64;
            mean[j] = mu;
            sd[j] = v.sqrt();
            if sd[j] > 1e-12 * (1.0 + mu.abs()) {
                keep.push(j);
            }
        }
        let mut degree = degree;
        let mut exps = exponents(keep.len().max(1), degree);
        if keep.is_empty() {
            exps.truncate(1);
        }
        // shrink the basis when few samples remain
        while exps.len() > 1 && count < 4 * exps.len() {
            degree -= 1;
            exps = exponents(keep.len(), degree);
        }
        let nb = exps.len();
        let mut rows = vec![0.0; n * nb];
        exec.for_each_row(&mut rows, nb, |i, row| {
            let z: Vec<f64> = keep
                .iter()
                .map(|&j| (x[i * d + j] - mean[j]) / sd[j])
                .collect();
            for (r, e) in row.iter_mut().zip(&exps) {
                *r = e
                    .iter()
                    .zip(&z)
                    .map(|(&p, &zz)| zz.powi(p as i32))
                    .product();
            }
        });
        let gram = exec.sum_vec(n, nb * nb, |i, acc| {
            if !is_alive(i) {
                return;
            }
            let r = &rows[i * nb..(i + 1) * nb];
            for a in 0..nb {
                for b in 0..nb {
                    acc[a * nb + b] += r[a] * r[b];
                }
            }
        });
        let g = DMatrix::from_row_slice(nb, nb, &gram) / count as f64;
        let eig = SymmetricEigen::new(g.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if condition > MAX_CONDITION {
            return Err(Error::RankDeficient {
                step,
                detail: format!("condition number {condition:.3e} with {nb} basis functions and {count} samples"),
            });
        }
        let chol = g.cholesky().ok_or_else(|| Error::RankDeficient {
            step,
            detail: "Gram matrix not positive definite".into(),
        })?;
        Ok(Self {
            n,
            nb,
            rows,
            alive: alive.map(|a| a.to_vec()),
            chol,
            condition,
        })
    }

    pub fn basis_len(&self) -> usize {
        self.nb
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.nb..(i + 1) * self.nb]
    }

    fn alive(&self, i: usize) -> bool {
        self.alive.as_ref().is_none_or(|a| a[i])
    }

    /// Coefficients `nb x r` for row-major targets `n x r`.
    pub fn coefficients(&self, exec: Exec, targets: &[f64], r: usize) -> DMatrix<f64> {
        let nb = self.nb;
        let rhs = exec.sum_vec(self.n, nb * r, |i, acc| {
            if !self.alive(i) {
                return;
            }
            let row = self.row(i);
            let y = &targets[i * r..(i + 1) * r];
            for a in 0..nb {
                for c in 0..r {
                    acc[a * r + c] += row[a] * y[c];
                }
            }
        });
        let count = (0..self.n).filter(|&i| self.alive(i)).count() as f64;
        let rhs = DMatrix::from_row_slice(nb, r, &rhs) / count;
        self.chol.solve(&rhs)
    }

    /// Fitted values `n x r`; rows outside the fit get the prediction too.
    pub fn fit_predict(&self, exec: Exec, targets: &[f64], r: usize) -> Vec<f64> {
        let coef = self.coefficients(exec, targets, r);
        let mut out = vec![0.0; self.n * r];
        exec.for_each_row(&mut out, r, |i, o| {
            let row = self.row(i);
            for (c, oc) in o.iter_mut().enumerate() {
                *oc = (0..self.nb).map(|a| row[a] * coef[(a, c)]).sum();
            }
        });
        out
    }
}
