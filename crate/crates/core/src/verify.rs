//! Discrete checks of the variational inequality, terminal behaviour,
//! a priori bounds, continuity, uniqueness and Itô identities.

use serde::Serialize;

use crate::engine::{refine_epsilon, MultivaluedSolution, PenalizedSolution, Problem, SolverOpts};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generator::{norm, DriverKind};
use crate::regression::Design;
use crate::sim::{exp_smooth, n_p, simulate, GridConfig, MartingalePair, PathEnsemble};

/// Time-step coefficient of the path-averaged residual tolerance.
pub const VI_C1: f64 = 2.0;
/// Sampling coefficient of the residual tolerance (multiplies `N^{-1/2}`).
pub const VI_C2: f64 = 3.0;
/// Gap allowed by [`check_terminal`].
pub const TERMINAL_TOL: f64 = 1e-12;

/// `n_q = (q - 1) ^ 1`.
pub fn n_q(q: f64) -> f64 {
    (q - 1.0).min(1.0)
}

/// `delta_q = delta 1[1 <= q < 2]`.
pub fn delta_q(delta: f64, q: f64) -> f64 {
    if (1.0..2.0).contains(&q) {
        delta
    } else {
        0.0
    }
}

/// `{2, p ^ 2}` without duplicates.
pub fn q_set(p: f64) -> Vec<f64> {
    if p < 2.0 {
        vec![2.0, p]
    } else {
        vec![2.0]
    }
}

/// Grid pair `(Y, Z)` under test.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub m: usize,
    pub k: usize,
    pub steps: usize,
    pub paths: usize,
    /// `N x (K + 1) x m`.
    pub y: Vec<f64>,
    /// `N x K x (m k)`.
    pub z: Vec<f64>,
}

impl Candidate {
    /// Projected solution.
    pub fn from_solution(sol: &MultivaluedSolution) -> Self {
        Self {
            m: sol.m,
            k: sol.k,
            steps: sol.steps,
            paths: sol.paths,
            y: sol.y.clone(),
            z: sol.z.clone(),
        }
    }

    /// Raw penalised iterate.
    pub fn from_penalized(sol: &PenalizedSolution) -> Self {
        Self {
            m: sol.m,
            k: sol.k,
            steps: sol.steps,
            paths: sol.paths,
            y: sol.y.clone(),
            z: sol.z.clone(),
        }
    }

    /// `Y + h` before the final node.
    pub fn shifted(&self, h: f64) -> Self {
        let mut out = self.clone();
        let w = (self.steps + 1) * self.m;
        for (idx, v) in out.y.iter_mut().enumerate() {
            if idx % w < self.steps * self.m {
                *v += h;
            }
        }
        out
    }

    pub fn y_at(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * (self.steps + 1) + i) * self.m;
        &self.y[o..o + self.m]
    }

    pub fn z_at(&self, p: usize, i: usize) -> &[f64] {
        let w = self.m * self.k;
        let o = (p * self.steps + i) * w;
        &self.z[o..o + w]
    }
}

/// `M_i = M_{i+1} + N_i dQ_i - R_i dB_i` on the grid.
#[derive(Clone, Debug)]
pub struct TestMartingale {
    pub tag: String,
    pub m: usize,
    pub k: usize,
    pub steps: usize,
    /// `N x (K + 1) x m`.
    pub mv: Vec<f64>,
    /// `N x K x m`.
    pub nv: Vec<f64>,
    /// `N x K x (m k)`.
    pub rv: Vec<f64>,
}

impl TestMartingale {
    pub fn constant(gamma: &[f64], ens: &PathEnsemble) -> Self {
        let (n, steps, m, k) = (ens.paths(), ens.steps(), gamma.len(), ens.k());
        let mv = (0..n * (steps + 1))
            .flat_map(|_| gamma.iter().copied())
            .collect();
        Self {
            tag: format!(
                "constant({})",
                gamma
                    .iter()
                    .map(|g| g.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            m,
            k,
            steps,
            mv,
            nv: vec![0.0; n * steps * m],
            rv: vec![0.0; n * steps * m * k],
        }
    }

    pub fn from_pair(pair: &MartingalePair, tag: &str) -> Self {
        let n = pair.xi.len() / ((pair.steps + 1) * pair.m);
        Self {
            tag: format!("pair({tag})"),
            m: pair.m,
            k: pair.k,
            steps: pair.steps,
            mv: pair.xi.clone(),
            nv: vec![0.0; n * pair.steps * pair.m],
            rv: pair.zeta.clone(),
        }
    }

    /// `M = E_t U^eps` with `N = 1[t >= eps] (U - M) / Q_eps` and `R` from
    /// the increment regression.
    pub fn exp_smoothed(
        u: &[f64],
        m: usize,
        ens: &PathEnsemble,
        eps: f64,
        degree: usize,
        exec: Exec,
    ) -> Result<Self> {
        let sm = exp_smooth(u, m, ens, eps, degree, exec)?;
        let (n, steps, k) = (ens.paths(), ens.steps(), ens.k());
        let mut nv = vec![0.0; n * steps * m];
        for p in 0..n {
            for i in 0..steps {
                if ens.t(i) < eps {
                    continue;
                }
                for a in 0..m {
                    let o = (p * (steps + 1) + i) * m + a;
                    nv[(p * steps + i) * m + a] = (u[o] - sm.m_eps[o]) / sm.q_eps[p];
                }
            }
        }
        let rv = increment_regression(&sm.m_eps, m, ens, degree, exec)?;
        Ok(Self {
            tag: format!("smoothed({eps})"),
            m,
            k,
            steps,
            mv: sm.m_eps,
            nv,
            rv,
        })
    }

    /// `M = Y`, `N = -H(Y, Z)`, `R = Z`.
    pub fn from_candidate(c: &Candidate, ens: &PathEnsemble, prob: &Problem) -> Self {
        let mut nv = vec![0.0; c.paths * c.steps * c.m];
        let mut h = vec![0.0; c.m];
        for p in 0..c.paths {
            for i in 0..c.steps {
                prob.h_value(ens, p, i, c.y_at(p, i), Some(c.z_at(p, i)), &mut h);
                for a in 0..c.m {
                    nv[(p * c.steps + i) * c.m + a] = -h[a];
                }
            }
        }
        Self {
            tag: "solution".into(),
            m: c.m,
            k: c.k,
            steps: c.steps,
            mv: c.y.clone(),
            nv,
            rv: c.z.clone(),
        }
    }

    pub fn m_at(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * (self.steps + 1) + i) * self.m;
        &self.mv[o..o + self.m]
    }

    pub fn n_at(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * self.steps + i) * self.m;
        &self.nv[o..o + self.m]
    }

    pub fn r_at(&self, p: usize, i: usize) -> &[f64] {
        let w = self.m * self.k;
        let o = (p * self.steps + i) * w;
        &self.rv[o..o + w]
    }

    /// Mean over paths and steps of `|M_i - M_{i+1} - N_i dQ_i + R_i dB_i|`.
    pub fn construction_residual(&self, ens: &PathEnsemble) -> f64 {
        let (n, steps, m, k) = (ens.paths(), self.steps, self.m, self.k);
        let mut s = 0.0;
        for p in 0..n {
            for i in 0..steps {
                let db = ens.db_at(p, i);
                let (m0, m1, nn, r) = (
                    self.m_at(p, i),
                    self.m_at(p, i + 1),
                    self.n_at(p, i),
                    self.r_at(p, i),
                );
                let d: Vec<f64> = (0..m)
                    .map(|a| {
                        m0[a] - m1[a] - nn[a] * ens.dq(p, i)
                            + (0..k).map(|c| r[a * k + c] * db[c]).sum::<f64>()
                    })
                    .collect();
                s += norm(&d);
            }
        }
        s / (n * steps) as f64
    }
}

/// `R_i = E_i[(X_{i+1} - X_i) dB_i] / dt`.
fn increment_regression(
    x: &[f64],
    m: usize,
    ens: &PathEnsemble,
    degree: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    let (n, steps, k) = (ens.paths(), ens.steps(), ens.k());
    let mut out = vec![0.0; n * steps * m * k];
    for i in 0..steps {
        let alive: Vec<bool> = (0..n).map(|p| ens.in_horizon(p, i)).collect();
        if !alive.iter().any(|&a| a) {
            continue;
        }
        let (f, d) = ens.features(i);
        let design = Design::new(exec, &f, d, degree, Some(&alive), i)?;
        let mut inc = vec![0.0; n * m * k];
        for p in 0..n {
            let db = ens.db_at(p, i);
            for a in 0..m {
                let dx = x[(p * (steps + 1) + i + 1) * m + a] - x[(p * (steps + 1) + i) * m + a];
                for c in 0..k {
                    inc[(p * m + a) * k + c] = dx * db[c] / ens.dt;
                }
            }
        }
        let fit = design.fit_predict(exec, &inc, m * k);
        for p in 0..n {
            if alive[p] {
                let o = (p * steps + i) * m * k;
                out[o..o + m * k].copy_from_slice(&fit[p * m * k..(p + 1) * m * k]);
            }
        }
    }
    Ok(out)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Terms shared by the evaluators at node `(p, i)`.
struct Node {
    diff2: f64,
    rz2: f64,
    inner_nh: f64,
    inner_db: f64,
    psi_y: f64,
    psi_m: f64,
    dq: f64,
}

fn node(
    c: &Candidate,
    tm: &TestMartingale,
    ens: &PathEnsemble,
    prob: &Problem,
    p: usize,
    i: usize,
) -> Node {
    let (m, k) = (c.m, c.k);
    let y = c.y_at(p, i);
    let z = c.z_at(p, i);
    let mm = tm.m_at(p, i);
    let r = tm.r_at(p, i);
    let nn = tm.n_at(p, i);
    let db = ens.db_at(p, i);
    let mut h = vec![0.0; m];
    prob.h_value(ens, p, i, y, Some(z), &mut h);
    let diff: Vec<f64> = (0..m).map(|a| mm[a] - y[a]).collect();
    let rz2 = r.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
    let inner_nh = (0..m).map(|a| diff[a] * (nn[a] - h[a])).sum();
    let inner_db = (0..m)
        .map(|a| {
            diff[a]
                * (0..k)
                    .map(|c2| (r[a * k + c2] - z[a * k + c2]) * db[c2])
                    .sum::<f64>()
        })
        .sum();
    Node {
        diff2: diff.iter().map(|v| v * v).sum(),
        rz2,
        inner_nh,
        inner_db,
        psi_y: prob.psi_value(ens, p, i, y),
        psi_m: prob.psi_value(ens, p, i, mm),
        dq: ens.dq(p, i),
    }
}

fn gamma(c: &Candidate, tm: &TestMartingale, p: usize, i: usize, dq: f64) -> f64 {
    let d2: f64 = tm
        .m_at(p, i)
        .iter()
        .zip(c.y_at(p, i))
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    (d2 + dq).sqrt()
}

/// `Psi * w` with `0 * inf = 0`.
fn times(w: f64, psi: f64) -> f64 {
    if psi == 0.0 {
        0.0
    } else {
        w * psi
    }
}

/// Per-path `LHS - RHS` of the discrete inequality on `[t_a, t_b]`.
#[allow(clippy::too_many_arguments)]
pub fn vi_residual(
    c: &Candidate,
    tm: &TestMartingale,
    ens: &PathEnsemble,
    prob: &Problem,
    q: f64,
    delta: f64,
    window: (usize, usize),
    exec: Exec,
) -> Vec<f64> {
    vi_residuals(c, tm, ens, prob, &[(q, delta, window)], exec).remove(0)
}

/// [`vi_residual`] for several `(q, delta, window)` tuples, sharing the node
/// terms of each path. Result is indexed `[tuple][path]`.
pub fn vi_residuals(
    c: &Candidate,
    tm: &TestMartingale,
    ens: &PathEnsemble,
    prob: &Problem,
    tuples: &[(f64, f64, (usize, usize))],
    exec: Exec,
) -> Vec<Vec<f64>> {
    let hi = tuples.iter().map(|t| t.2 .1).max().unwrap_or(0);
    let lo = tuples.iter().map(|t| t.2 .0).min().unwrap_or(0);
    let rows: Vec<Vec<f64>> = exec.map(c.paths, |p| {
        let nodes: Vec<Node> = (lo..hi).map(|i| node(c, tm, ens, prob, p, i)).collect();
        tuples
            .iter()
            .map(|&(q, delta, (wa, wb))| {
                let dq_ = delta_q(delta, q);
                let mut lhs = gamma(c, tm, p, wa, dq_).powf(q);
                let mut rhs = gamma(c, tm, p, wb, dq_).powf(q);
                for nd in &nodes[wa - lo..wb - lo] {
                    let g = (nd.diff2 + dq_).sqrt();
                    let w = if q == 2.0 { 1.0 } else { g.powf(q - 2.0) };
                    lhs +=
                        0.5 * q * (q - 1.0) * w * nd.rz2 * ens.dt + q * times(w, nd.psi_y) * nd.dq;
                    rhs += q * times(w, nd.psi_m) * nd.dq + q * w * nd.inner_nh * nd.dq
                        - q * w * nd.inner_db;
                }
                lhs - rhs
            })
            .collect()
    });
    (0..tuples.len())
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

/// The `q = 2` inequality coded on its own.
pub fn vi_residual_q2(
    c: &Candidate,
    tm: &TestMartingale,
    ens: &PathEnsemble,
    prob: &Problem,
    window: (usize, usize),
) -> Vec<f64> {
    let (wa, wb) = window;
    let (m, k) = (c.m, c.k);
    let mut out = Vec::with_capacity(c.paths);
    let mut h = vec![0.0; m];
    for p in 0..c.paths {
        let sq = |i: usize| -> f64 {
            tm.m_at(p, i)
                .iter()
                .zip(c.y_at(p, i))
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        };
        let (mut energy, mut pen_y, mut pen_m, mut drift, mut mart) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in wa..wb {
            let (y, z, mm, r, nn) = (
                c.y_at(p, i),
                c.z_at(p, i),
                tm.m_at(p, i),
                tm.r_at(p, i),
                tm.n_at(p, i),
            );
            prob.h_value(ens, p, i, y, Some(z), &mut h);
            let db = ens.db_at(p, i);
            let dq = ens.dq(p, i);
            for a in 0..m {
                let d = mm[a] - y[a];
                drift += d * (nn[a] - h[a]) * dq;
                for cc in 0..k {
                    let rz = r[a * k + cc] - z[a * k + cc];
                    energy += rz * rz * ens.dt;
                    mart += d * rz * db[cc];
                }
            }
            let py = prob.psi_value(ens, p, i, y);
            let pm = prob.psi_value(ens, p, i, mm);
            if py != 0.0 {
                pen_y += py * dq;
            }
            if pm != 0.0 {
                pen_m += pm * dq;
            }
        }
        out.push(sq(wa) + energy + 2.0 * pen_y - sq(wb) - 2.0 * pen_m - 2.0 * drift + 2.0 * mart);
    }
    out
}

/// Weighted form with a bounded-variation process `L` (`N x (K + 1)`).
#[allow(clippy::too_many_arguments)]
pub fn vi_residual_weighted(
    c: &Candidate,
    tm: &TestMartingale,
    ens: &PathEnsemble,
    prob: &Problem,
    q: f64,
    delta: f64,
    window: (usize, usize),
    l: &[f64],
) -> Vec<f64> {
    let dq_ = delta_q(delta, q);
    let (wa, wb) = window;
    let nq = n_q(q);
    let lw = |p: usize, i: usize| l[p * (c.steps + 1) + i];
    (0..c.paths)
        .map(|p| {
            let ga = gamma(c, tm, p, wa, dq_);
            let gb = gamma(c, tm, p, wb, dq_);
            let mut lhs = (q * lw(p, wa)).exp() * ga.powf(q);
            let mut rhs = (q * lw(p, wb)).exp() * gb.powf(q);
            for i in wa..wb {
                let nd = node(c, tm, ens, prob, p, i);
                let g = gamma(c, tm, p, i, dq_);
                let e = (q * lw(p, i)).exp();
                let w = if q == 2.0 { 1.0 } else { g.powf(q - 2.0) };
                let dl = lw(p, i + 1) - lw(p, i);
                lhs += q * e * g.powf(q) * dl
                    + 0.5 * q * nq * e * w * nd.rz2 * ens.dt
                    + q * times(e * w, nd.psi_y) * nd.dq;
                rhs += q * times(e * w, nd.psi_m) * nd.dq + q * e * w * nd.inner_nh * nd.dq
                    - q * e * w * nd.inner_db;
            }
            lhs - rhs
        })
        .collect()
}

/// The three families: a constant inside the domain, the martingale pair of
/// `eta`, and the exponential smoothing of the midpoint `(Y + xi) / 2`.
pub fn standard_martingales(
    c: &Candidate,
    ens: &PathEnsemble,
    prob: &Problem,
    pair: &MartingalePair,
    smooth_eps: f64,
    degree: usize,
    exec: Exec,
) -> Result<Vec<TestMartingale>> {
    let m = c.m;
    let mut gamma = vec![0.0; m];
    for a in 0..m {
        let y0 = (0..c.paths).map(|p| c.y_at(p, 0)[a]).sum::<f64>() / c.paths as f64;
        let (lo1, hi1) = prob.phi.domain(a);
        let (lo2, hi2) = prob.psi.domain(a);
        gamma[a] = (y0 + 0.5).clamp(lo1.max(lo2), hi1.min(hi2));
    }
    let mid: Vec<f64> =
        c.y.iter()
            .zip(&pair.xi)
            .map(|(y, x)| 0.5 * (y + x))
            .collect();
    Ok(vec![
        TestMartingale::constant(&gamma, ens),
        TestMartingale::from_pair(pair, &prob.eta.to_string()),
        TestMartingale::exp_smoothed(&mid, m, ens, smooth_eps, degree, exec)?,
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct VariationalEntry {
    pub q: f64,
    pub delta: f64,
    pub martingale: String,
    pub window: (usize, usize),
    pub residual: f64,
    pub std_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariationalReport {
    pub entries: Vec<VariationalEntry>,
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub c1: f64,
    pub c2: f64,
}

impl VariationalReport {
    /// Every evaluated tuple passes; skipped tuples do not count.
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass || e.note.is_some())
    }

    pub fn evaluated(&self) -> usize {
        self.entries.iter().filter(|e| e.note.is_none()).count()
    }

    pub fn worst(&self) -> Option<&VariationalEntry> {
        self.entries
            .iter()
            .filter(|e| e.note.is_none())
            .max_by(|a, b| (a.residual - a.tolerance).total_cmp(&(b.residual - b.tolerance)))
    }
}

/// `c1 dt + c2 / sqrt(N)`.
pub fn vi_tolerance(dt: f64, paths: usize) -> f64 {
    VI_C1 * dt + VI_C2 / (paths as f64).sqrt()
}

/// Path-averaged discrete inequality for every `(q, delta, M, window)`.
#[allow(clippy::too_many_arguments)]
pub fn check_def1(
    c: &Candidate,
    ens: &PathEnsemble,
    prob: &Problem,
    p_list: &[f64],
    martingales: &[TestMartingale],
    deltas: &[f64],
    windows: &[(usize, usize)],
    exec: Exec,
) -> Result<VariationalReport> {
    if p_list.iter().any(|p| !(*p > 1.0)) || deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
        return Err(Error::Domain(
            "check_def1 needs p > 1 and delta in (0, 1]".into(),
        ));
    }
    let mut qs: Vec<f64> = p_list.iter().flat_map(|&p| q_set(p)).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let tolerance = vi_tolerance(ens.dt, c.paths);
    let mut entries = Vec::new();
    for tm in martingales {
        let finite = (0..c.paths)
            .all(|p| (0..c.steps).all(|i| prob.psi_value(ens, p, i, tm.m_at(p, i)).is_finite()));
        let mut tuples = Vec::new();
        for &q in &qs {
            for &delta in deltas {
                for &w in windows {
                    tuples.push((q, delta, (w.0, w.1.min(c.steps))));
                }
            }
        }
        let residuals = if finite {
            vi_residuals(c, tm, ens, prob, &tuples, exec)
        } else {
            Vec::new()
        };
        for (j, &(q, delta, w)) in tuples.iter().enumerate() {
            if !finite {
                entries.push(VariationalEntry {
                    q,
                    delta,
                    martingale: tm.tag.clone(),
                    window: w,
                    residual: f64::NAN,
                    std_err: 0.0,
                    tolerance,
                    pass: false,
                    note: Some("Psi(M) infinite on the grid; skipped".into()),
                });
                continue;
            }
            let (mean, se) = mean_se(&residuals[j]);
            entries.push(VariationalEntry {
                q,
                delta,
                martingale: tm.tag.clone(),
                window: w,
                residual: mean,
                std_err: se,
                tolerance,
                pass: mean <= tolerance,
                note: None,
            });
        }
    }
    Ok(VariationalReport {
        entries,
        paths: c.paths,
        steps: c.steps,
        dt: ens.dt,
        c1: VI_C1,
        c2: VI_C2,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TerminalReport {
    pub p: f64,
    pub gap_mean: f64,
    pub gap_max: f64,
    /// `max |Y_i - xi_i|` over nodes past each path's exit.
    pub beyond_exit_max: f64,
    pub pass: bool,
}

/// `e^{pV}|Y - xi|^p` at the exit node (or `T`) plus the pinning gap.
pub fn check_terminal(
    c: &Candidate,
    ens: &PathEnsemble,
    pair: &MartingalePair,
    p: f64,
) -> TerminalReport {
    let mut gaps = Vec::with_capacity(c.paths);
    let mut beyond = 0.0f64;
    for path in 0..c.paths {
        let ex = ens.exit_step[path];
        let d: Vec<f64> = c
            .y_at(path, ex)
            .iter()
            .zip(pair.xi_at(path, ex))
            .map(|(a, b)| a - b)
            .collect();
        gaps.push((p * ens.vplus_at(path, ex)).exp() * norm(&d).powf(p));
        for i in ex + 1..=c.steps {
            let d: Vec<f64> = c
                .y_at(path, i)
                .iter()
                .zip(pair.xi_at(path, i))
                .map(|(a, b)| a - b)
                .collect();
            beyond = beyond.max(norm(&d));
        }
    }
    let gap_max = gaps.iter().copied().fold(0.0, f64::max);
    TerminalReport {
        p,
        gap_mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
        gap_max,
        beyond_exit_max: beyond,
        pass: gap_max <= TERMINAL_TOL && beyond <= TERMINAL_TOL,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AprioriReport {
    pub p: f64,
    /// `(name, value)` for each left-hand term.
    pub lhs_terms: Vec<(String, f64)>,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, `0` when both vanish.
    pub ratio: f64,
    pub finite: bool,
}

/// `|y|^{q-2} 1{y != 0}`.
fn pow_weighted(y: &[f64], q: f64) -> f64 {
    let r = norm(y);
    if q == 2.0 {
        1.0
    } else if r == 0.0 {
        0.0
    } else {
        r.powf(q - 2.0)
    }
}

/// Left-hand terms of the a priori estimate and its data bracket.
pub fn check_apriori(c: &Candidate, ens: &PathEnsemble, prob: &Problem, p: f64) -> AprioriReport {
    let n = c.paths;
    let mut sup = 0.0;
    let mut zterm = 0.0;
    let mut psiterm = 0.0;
    let mut mixed = vec![(0.0, 0.0); q_set(p).len()];
    let mut rhs = 0.0;
    let eta = prob.terminal(ens);
    let zero = vec![0.0; c.m];
    let mut h0 = vec![0.0; c.m];
    for path in 0..n {
        let mut s = 0.0f64;
        let (mut zz, mut ps, mut hint) = (0.0, 0.0, 0.0);
        let mut mix = vec![(0.0, 0.0); mixed.len()];
        for i in 0..=c.steps {
            let v = ens.vplus_at(path, i);
            let y = c.y_at(path, i);
            s = s.max((p * v).exp() * norm(y).powf(p));
            if i == c.steps {
                break;
            }
            let z2: f64 = c.z_at(path, i).iter().map(|a| a * a).sum();
            let psi = prob.psi_value(ens, path, i, y);
            let dq = ens.dq(path, i);
            zz += (2.0 * v).exp() * z2 * ens.dt;
            ps += times((2.0 * v).exp(), psi) * dq;
            for (j, &q) in q_set(p).iter().enumerate() {
                let w = (q * v).exp();
                let yw = pow_weighted(y, q);
                mix[j].0 += w * yw * z2 * ens.dt;
                if yw != 0.0 {
                    mix[j].1 += times(w * yw, psi) * dq;
                }
            }
            prob.h_value(ens, path, i, &zero, None, &mut h0);
            hint += v.exp() * norm(&h0) * dq;
        }
        sup += s;
        zterm += zz.powf(p / 2.0);
        psiterm += ps.powf(p / 2.0);
        for (j, &q) in q_set(p).iter().enumerate() {
            mixed[j].0 += mix[j].0.powf(p / q);
            mixed[j].1 += mix[j].1.powf(p / q);
        }
        let ex = ens.exit_step[path];
        rhs += (p * ens.vplus_at(path, ex)).exp()
            * norm(&eta[path * c.m..(path + 1) * c.m]).powf(p)
            + hint.powf(p);
    }
    let nf = n as f64;
    let mut lhs_terms = vec![
        ("sup_y".to_string(), sup / nf),
        ("z_energy".to_string(), zterm / nf),
        ("psi_energy".to_string(), psiterm / nf),
    ];
    for (j, &q) in q_set(p).iter().enumerate() {
        lhs_terms.push((format!("z_mixed_q{q}"), mixed[j].0 / nf));
        lhs_terms.push((format!("psi_mixed_q{q}"), mixed[j].1 / nf));
    }
    let lhs: f64 = lhs_terms.iter().map(|t| t.1).sum();
    let rhs = rhs / nf;
    let finite = lhs_terms.iter().all(|t| t.1.is_finite());
    AprioriReport {
        p,
        lhs_terms,
        lhs,
        rhs,
        ratio: if lhs == 0.0 && rhs == 0.0 {
            0.0
        } else {
            lhs / rhs
        },
        finite,
    }
}

/// Ratios within a factor 2 of each other.
pub fn apriori_stable(reports: &[AprioriReport]) -> bool {
    let r: Vec<f64> = reports.iter().map(|a| a.ratio).collect();
    if r.iter().all(|&v| v == 0.0) {
        return true;
    }
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(0.0, f64::max);
    lo > 0.0 && hi / lo <= 2.0 && reports.iter().all(|a| a.finite)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Perturbation {
    /// `eta + h`.
    Terminal,
    /// `F + h`.
    Driver,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    pub perturbation: Perturbation,
    pub hs: Vec<f64>,
    /// `D(h) = E max_i e^{alpha q V_i} |Y^h_i - Y_i|^{alpha q}`.
    pub distances: Vec<f64>,
    /// `D(h) / h^{alpha q}`.
    pub ratios: Vec<f64>,
    pub decreasing: bool,
    pub spread: f64,
    pub pass: bool,
}

/// Solves the base problem and each perturbation on the same ensemble.
#[allow(clippy::too_many_arguments)]
pub fn check_continuity(
    ens: &PathEnsemble,
    prob: &Problem,
    perturbation: Perturbation,
    hs: &[f64],
    schedule: &[f64],
    tol: f64,
    opts: &SolverOpts,
    q: f64,
    alpha: f64,
) -> Result<ContinuityReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let base = refine_epsilon(ens, prob, schedule, tol, opts)?;
    let e = alpha * q;
    let mut distances = Vec::new();
    for &h in hs {
        let mut pr = prob.clone();
        match perturbation {
            Perturbation::Terminal => {
                pr.eta = pr.eta.shifted(h);
                if let Some(v) = pr.eta_values.as_mut() {
                    v.iter_mut().for_each(|x| *x += h);
                }
            }
            Perturbation::Driver => pr.gen.f = DriverKind::Shifted(Box::new(pr.gen.f.clone()), h),
        }
        let sol = refine_epsilon(ens, &pr, schedule, tol, opts)?;
        let d = opts.exec.sum(ens.paths(), |p| {
            (0..=ens.steps())
                .map(|i| {
                    let diff: Vec<f64> = sol
                        .y_at(p, i)
                        .iter()
                        .zip(base.y_at(p, i))
                        .map(|(a, b)| a - b)
                        .collect();
                    (e * ens.vplus_at(p, i)).exp() * norm(&diff).powf(e)
                })
                .fold(0.0, f64::max)
        }) / ens.paths() as f64;
        distances.push(d);
    }
    let ratios: Vec<f64> = hs
        .iter()
        .zip(&distances)
        .map(|(h, d)| if *h == 0.0 { 0.0 } else { d / h.powf(e) })
        .collect();
    let decreasing = distances.windows(2).all(|w| w[1] < w[0]);
    let pos: Vec<f64> = ratios.iter().copied().filter(|r| *r > 0.0).collect();
    let spread = if pos.is_empty() {
        1.0
    } else {
        pos.iter().copied().fold(0.0, f64::max) / pos.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let pass = match perturbation {
        Perturbation::Terminal => decreasing && spread < 3.0,
        Perturbation::Driver => decreasing,
    };
    Ok(ContinuityReport {
        perturbation,
        hs: hs.to_vec(),
        distances,
        ratios,
        decreasing,
        spread,
        pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct UniquenessReport {
    pub seeds: (u64, u64),
    pub y0: (f64, f64),
    pub se: (f64, f64),
    pub gap: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Same problem on two independent ensembles; agreement within 3 SE.
pub fn check_uniqueness(
    grid: &GridConfig,
    seeds: (u64, u64),
    prob: &Problem,
    schedule: &[f64],
    tol: f64,
    opts: &SolverOpts,
) -> Result<UniquenessReport> {
    if seeds.0 == seeds.1 {
        return Err(Error::InvalidSpec(
            "uniqueness check needs two distinct seeds".into(),
        ));
    }
    let run = |seed: u64| -> Result<(f64, f64)> {
        let cfg = GridConfig {
            seed,
            ..grid.clone()
        };
        let ens = simulate(&cfg, opts.exec)?;
        let sol = refine_epsilon(&ens, prob, schedule, tol, opts)?;
        Ok((sol.y0[0], sol.y0_se[0]))
    };
    let a = run(seeds.0)?;
    let b = run(seeds.1)?;
    let gap = (a.0 - b.0).abs();
    let bound = 3.0 * (a.1 * a.1 + b.1 * b.1).sqrt();
    Ok(UniquenessReport {
        seeds,
        y0: (a.0, b.0),
        se: (a.1, b.1),
        gap,
        bound,
        pass: gap <= bound,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoReport {
    pub p: f64,
    pub delta: f64,
    pub steps: usize,
    /// Ensemble mean of `LHS - RHS` of the identity.
    pub residual: f64,
    pub std_err: f64,
    /// Ensemble mean of the one-sided excess `LHS - RHS` of the inequality.
    pub one_sided: f64,
}

/// Discrete Itô identity for `(|Y|^2 + delta)^{p/2}` with `Y_i = Y_{i+1} + G_i - Z_i dB_i`,
/// where `G_i` is the finite-variation increment of the grid process.
pub fn ito_residual(
    c: &Candidate,
    ens: &PathEnsemble,
    p: f64,
    delta: f64,
    exec: Exec,
) -> Result<ItoReport> {
    if p < 2.0 && !(delta > 0.0) {
        return Err(Error::Domain("p < 2 needs delta > 0".into()));
    }
    let (m, k, steps) = (c.m, c.k, c.steps);
    let np = n_p(p);
    let rows: Vec<(f64, f64)> = exec.map(c.paths, |path| {
        let phi = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>() + delta;
        let y0 = c.y_at(path, 0);
        let yt = c.y_at(path, steps);
        let mut lhs = phi(y0).powf(p / 2.0);
        let mut lhs4 = lhs;
        let mut rhs = phi(yt).powf(p / 2.0);
        for i in 0..steps {
            let y = c.y_at(path, i);
            let yn = c.y_at(path, i + 1);
            let z = c.z_at(path, i);
            let db = ens.db_at(path, i);
            let s = phi(y);
            let z2: f64 = z.iter().map(|v| v * v).sum();
            // |Z^* Y|^2 with Z an m x k matrix
            let zty2: f64 = (0..k)
                .map(|cc| (0..m).map(|a| z[a * k + cc] * y[a]).sum::<f64>().powi(2))
                .sum();
            let w2 = if p == 2.0 {
                1.0
            } else {
                s.powf((p - 2.0) / 2.0)
            };
            // s^{(p-4)/2} only ever multiplies terms of order |y|^2, which vanish with s
            let w4 = if s == 0.0 {
                0.0
            } else if p == 4.0 {
                1.0
            } else {
                s.powf((p - 4.0) / 2.0)
            };
            lhs += 0.5 * p * (w2 * z2 + (p - 2.0) * w4 * zty2) * ens.dt;
            lhs4 += 0.5 * p * (np * w2 + (1.0 - np) * delta * w4) * z2 * ens.dt;
            let mut g_inner = 0.0;
            let mut db_inner = 0.0;
            for a in 0..m {
                let zdb: f64 = (0..k).map(|cc| z[a * k + cc] * db[cc]).sum();
                g_inner += y[a] * (y[a] - yn[a] + zdb);
                db_inner += y[a] * zdb;
            }
            rhs += p * w2 * g_inner - p * w2 * db_inner;
        }
        (lhs - rhs, lhs4 - rhs)
    });
    let id: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let (residual, std_err) = mean_se(&id);
    let one_sided = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(ItoReport {
        p,
        delta,
        steps,
        residual,
        std_err,
        one_sided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::ConvexSpec;
    use crate::engine::PenaltyMode;
    use crate::generator::GeneratorSpec;
    use crate::sim::{martingale_pair, PairMethod, Terminal, TerminalKind};
    use approx::assert_abs_diff_eq;

    fn ens(n: usize, k: usize, seed: u64) -> PathEnsemble {
        simulate(
            &GridConfig {
                paths: n,
                steps: k,
                seed,
                ..Default::default()
            },
            Exec::Parallel,
        )
        .unwrap()
    }

    fn linear(eta: Terminal) -> Problem {
        Problem::new(
            GeneratorSpec::linear(1.0),
            ConvexSpec::zero(1),
            ConvexSpec::zero(1),
            eta,
        )
        .unwrap()
    }

    fn reflected() -> Problem {
        Problem::new(
            GeneratorSpec::new(DriverKind::constant(-1.0), DriverKind::Zero, 1, 1).unwrap(),
            ConvexSpec::indicator(0.0, f64::INFINITY).unwrap(),
            ConvexSpec::zero(1),
            Terminal::constant(0.0),
        )
        .unwrap()
    }

    fn implicit() -> SolverOpts {
        SolverOpts {
            penalty: PenaltyMode::Implicit,
            ..Default::default()
        }
    }

    #[test]
    fn bookkeeping_constants() {
        for p in [1.1f64, 1.5, 1.9, 2.0, 3.0] {
            let q = p.min(2.0);
            assert_eq!(n_q(q), n_p(p));
            assert_eq!(delta_q(0.3, 2.0), 0.0);
            assert_eq!(delta_q(0.3, q), if p < 2.0 { 0.3 } else { 0.0 });
            assert!(n_p(p) <= n_q(2.0));
        }
        assert_eq!(q_set(1.5), vec![2.0, 1.5]);
        assert_eq!(q_set(3.0), vec![2.0]);
    }

    #[test]
    fn self_test_and_q2_agreement() {
        let e = ens(500, 50, 1);
        let prob = linear(Terminal::new(TerminalKind::Brownian));
        let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
        let c = Candidate::from_solution(&sol);
        let own = TestMartingale::from_candidate(&c, &e, &prob);
        for q in [2.0, 1.5] {
            let r = vi_residual(&c, &own, &e, &prob, q, 0.5, (0, 50), Exec::Parallel);
            assert!(r.iter().all(|v| v.abs() < 1e-12));
        }
        let pair = martingale_pair(
            &Terminal::new(TerminalKind::BrownianSquared),
            &e,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        let tms = [
            TestMartingale::constant(&[0.3], &e),
            TestMartingale::from_pair(&pair, "brownian_sq"),
            TestMartingale::exp_smoothed(&c.y, 1, &e, 0.1, 3, Exec::Parallel).unwrap(),
        ];
        for tm in &tms {
            for w in [(0, 50), (10, 30)] {
                let g = vi_residual(&c, tm, &e, &prob, 2.0, 0.5, w, Exec::Sequential);
                let a = vi_residual_q2(&c, tm, &e, &prob, w);
                for (x, y) in g.iter().zip(&a) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }

    #[test]
    fn weight_conjugation() {
        let e = ens(200, 40, 2);
        let prob = linear(Terminal::new(TerminalKind::Brownian));
        let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
        let c = Candidate::from_solution(&sol);
        let tm = TestMartingale::constant(&[0.2], &e);
        let l0 = 0.7;
        let l = vec![l0; 200 * 41];
        for q in [2.0, 1.5] {
            let plain = vi_residual(&c, &tm, &e, &prob, q, 0.1, (0, 40), Exec::Sequential);
            let b = vi_residual_weighted(&c, &tm, &e, &prob, q, 0.1, (0, 40), &l);
            for (x, y) in plain.iter().zip(&b) {
                assert_abs_diff_eq!((q * l0).exp() * x, y, epsilon = 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn construction_identity() {
        let e = ens(2000, 50, 3);
        assert_eq!(
            TestMartingale::constant(&[1.0], &e).construction_residual(&e),
            0.0
        );
        let pair = martingale_pair(
            &Terminal::new(TerminalKind::Brownian),
            &e,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        assert!(TestMartingale::from_pair(&pair, "b").construction_residual(&e) < 1e-12);
        let pair = martingale_pair(
            &Terminal::new(TerminalKind::BrownianSquared),
            &e,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        // |dt - dB^2| has mean about dt
        let r = TestMartingale::from_pair(&pair, "b2").construction_residual(&e);
        assert!(r < 2.0 * e.dt, "{r}");
    }

    #[test]
    fn linear_problem_passes_and_shifted_candidate_fails() {
        let e = ens(4000, 50, 4);
        let prob = linear(Terminal::new(TerminalKind::Brownian));
        let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
        let c = Candidate::from_solution(&sol);
        let tms = vec![
            TestMartingale::constant(&[0.0], &e),
            TestMartingale::constant(&[1.0], &e),
        ];
        let r = check_def1(
            &c,
            &e,
            &prob,
            &[1.5, 2.0],
            &tms,
            &[0.01, 0.5],
            &[(0, 50), (25, 50)],
            Exec::Parallel,
        )
        .unwrap();
        assert!(r.pass(), "{:?}", r.worst());
        let bad = c.shifted(0.5);
        let r = check_def1(
            &bad,
            &e,
            &prob,
            &[2.0],
            &tms,
            &[0.5],
            &[(0, 50)],
            Exec::Parallel,
        )
        .unwrap();
        assert!(!r.pass());
    }

    #[test]
    fn skips_infinite_test_martingale() {
        let e = ens(100, 20, 5);
        let sol = refine_epsilon(&e, &reflected(), &[0.4, 0.2], 1e-9, &implicit()).unwrap();
        let c = Candidate::from_solution(&sol);
        let r = check_def1(
            &c,
            &e,
            &reflected(),
            &[2.0],
            &[TestMartingale::constant(&[-1.0], &e)],
            &[0.5],
            &[(0, 20)],
            Exec::Parallel,
        )
        .unwrap();
        assert!(r.entries[0].note.is_some());
        assert_eq!(r.evaluated(), 0);
    }

    #[test]
    fn terminal_gaps() {
        let e = ens(200, 20, 6);
        let prob = linear(Terminal::new(TerminalKind::Brownian));
        let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
        let c = Candidate::from_solution(&sol);
        let pair =
            martingale_pair(&prob.eta, &e, PairMethod::ClosedForm, 3, Exec::Parallel).unwrap();
        assert!(check_terminal(&c, &e, &pair, 1.5).pass);
        let other = martingale_pair(
            &Terminal::constant(1.0),
            &e,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        let r = check_terminal(&c, &e, &other, 1.5);
        assert!(!r.pass && r.gap_max > 0.0);

        let mut cfg = GridConfig {
            paths: 300,
            steps: 40,
            seed: 6,
            ..Default::default()
        };
        cfg.exit = Some((-0.3, 0.3));
        let e = simulate(&cfg, Exec::Parallel).unwrap();
        let mut prob = reflected();
        prob.eta = Terminal::new(TerminalKind::Clamped { lo: -0.3, hi: 0.3 }).shifted(0.3);
        let sol =
            crate::engine::solve_random_horizon(&e, &prob, &[0.2, 0.1], 1e-9, &implicit()).unwrap();
        let pair =
            martingale_pair(&prob.eta, &e, PairMethod::Regression, 3, Exec::Parallel).unwrap();
        let r = check_terminal(&Candidate::from_solution(&sol), &e, &pair, 2.0);
        assert_eq!(r.beyond_exit_max, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn apriori_examples() {
        let e = ens(300, 20, 7);
        let zero = Problem::new(
            GeneratorSpec::zero(1, 1),
            ConvexSpec::zero(1),
            ConvexSpec::zero(1),
            Terminal::constant(0.0),
        )
        .unwrap();
        let sol = refine_epsilon(&e, &zero, &[0.2, 0.1], 1e-9, &SolverOpts::default()).unwrap();
        let r = check_apriori(&Candidate::from_solution(&sol), &e, &zero, 2.0);
        assert_eq!((r.lhs, r.rhs, r.ratio), (0.0, 0.0, 0.0));

        let prob = linear(Terminal::new(TerminalKind::Brownian).shifted(1.0));
        let mut reports = Vec::new();
        for (n, k) in [(2000, 25), (2000, 50), (4000, 50)] {
            let mut e = ens(n, k, 8);
            e.compute_weights(&prob.gen, 1.5, 0.5).unwrap();
            let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
            let c = Candidate::from_solution(&sol);
            let r = check_apriori(&c, &e, &prob, 1.5);
            assert!(r.finite);
            assert_eq!(r.lhs_terms.len(), 7);
            assert!(r.lhs_terms.iter().any(|t| t.0 == "z_mixed_q1.5"));
            reports.push(r);
        }
        assert!(apriori_stable(&reports));
    }

    #[test]
    fn continuity_and_uniqueness() {
        let e = ens(2000, 50, 9);
        let prob = linear(Terminal::new(TerminalKind::Brownian));
        let opts = SolverOpts::default();
        let r = check_continuity(
            &e,
            &prob,
            Perturbation::Terminal,
            &[0.2, 0.1, 0.05],
            &[0.2, 0.1],
            1e-6,
            &opts,
            2.0,
            0.5,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        let r0 = check_continuity(
            &e,
            &prob,
            Perturbation::Terminal,
            &[0.0],
            &[0.2, 0.1],
            1e-6,
            &opts,
            2.0,
            0.5,
        )
        .unwrap();
        assert_eq!(r0.distances, vec![0.0]);
        let rd = check_continuity(
            &e,
            &prob,
            Perturbation::Driver,
            &[0.2, 0.1, 0.05],
            &[0.2, 0.1],
            1e-6,
            &opts,
            2.0,
            0.5,
        )
        .unwrap();
        assert!(rd.pass);

        let grid = GridConfig {
            paths: 2000,
            steps: 50,
            ..Default::default()
        };
        let zero = Problem::new(
            GeneratorSpec::zero(1, 1),
            ConvexSpec::zero(1),
            ConvexSpec::zero(1),
            Terminal::constant(0.0),
        )
        .unwrap();
        let u = check_uniqueness(&grid, (1, 2), &zero, &[0.2, 0.1], 1e-9, &opts).unwrap();
        assert_eq!(u.y0, (0.0, 0.0));
        assert!(u.pass);
        let u = check_uniqueness(&grid, (1, 2), &prob, &[0.2, 0.1], 1e-9, &opts).unwrap();
        assert!(u.pass, "{u:?}");
        assert!(check_uniqueness(&grid, (3, 3), &prob, &[0.2, 0.1], 1e-9, &opts).is_err());
    }

    #[test]
    fn ito_identity_is_exact_for_deterministic_paths() {
        // Z = 0 and Y linear in t: only the Taylor remainder is left
        let e = ens(10, 100, 10);
        let prob = Problem::new(
            GeneratorSpec::new(DriverKind::constant(1.0), DriverKind::Zero, 1, 1).unwrap(),
            ConvexSpec::zero(1),
            ConvexSpec::zero(1),
            Terminal::constant(1.0),
        )
        .unwrap();
        let sol = refine_epsilon(&e, &prob, &[0.2, 0.1], 1e-6, &SolverOpts::default()).unwrap();
        let c = Candidate::from_solution(&sol);
        let r = ito_residual(&c, &e, 2.0, 0.0, Exec::Parallel).unwrap();
        // sum of -(dY)^2 = -K dt^2
        assert_abs_diff_eq!(r.residual, -0.01, epsilon = 1e-10);
        assert!(ito_residual(&c, &e, 1.5, 0.0, Exec::Parallel).is_err());
    }
}
